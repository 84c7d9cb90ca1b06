use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use oner::eval::TokenFeatures;
use oner::synth::{PromptTemplate, SynthConfig};
use oner::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Everything a `--config` file may carry. Each section is optional and
/// falls back to its defaults field by field.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: SynthConfig,
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub count: u64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { count: 20_000, seed: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub suites: Vec<String>,
    /// Held-out dataset file; when absent, scenes are generated from the
    /// `data` section with `seed`.
    pub data: Option<PathBuf>,
    pub scenes: usize,
    pub seed: u64,
    pub localization_scenes: usize,
    pub recall_ks: Vec<usize>,
    pub top_k: usize,
    pub template: PromptTemplate,
    pub token_features: TokenFeatures,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            suites: vec!["retrieval".into(), "gap".into(), "localization".into()],
            data: None,
            scenes: 1000,
            seed: 2,
            localization_scenes: 500,
            recall_ks: vec![1, 5, 10],
            top_k: 10,
            template: PromptTemplate::Bare,
            token_features: TokenFeatures::Hidden,
        }
    }
}

/// A malformed config file is the caller's mistake rather than an I/O fault.
#[derive(Debug, thiserror::Error)]
#[error("invalid config {path}: {source}")]
pub struct ConfigError {
    pub path: String,
    pub source: serde_json::Error,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).map_err(|source| ConfigError { path: path.display().to_string(), source }.into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_sections_keep_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"train": {"epochs": 3}, "data": {"grid_size": 4}}"#).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(c.data.grid_size, 4);
        assert_eq!(c.eval, EvalConfig::default());
    }

    #[test]
    fn unknown_sections_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
    }

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn readme_documents_the_defaults() {
        let readme = include_str!("../../../README.md");
        let start = readme.find("```json\n").expect("json block") + "```json\n".len();
        let end = start + readme[start..].find("```").unwrap();
        let documented: RunConfig = serde_json::from_str(&readme[start..end]).unwrap();
        assert_eq!(documented, RunConfig::default());
        // every documented key exists and none is missing; numbers differ by f32 widening only
        fn keys(v: &serde_json::Value) -> serde_json::Value {
            match v {
                serde_json::Value::Object(m) => m.iter().map(|(k, v)| (k.clone(), keys(v))).collect(),
                _ => serde_json::Value::Null,
            }
        }
        let documented: serde_json::Value = serde_json::from_str(&readme[start..end]).unwrap();
        assert_eq!(keys(&documented), keys(&serde_json::to_value(RunConfig::default()).unwrap()));
    }
}
