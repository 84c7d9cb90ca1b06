//! Training loop, checkpoints and run manifests.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderConfig, Weights};
use crate::error::{Error, Result};
use crate::objectives::{self, MetricsRecord, ObjectiveConfig, Pair};
use crate::optim::{lr_schedule, AdamW, AdamWConfig};
use crate::params::ParamSet;
use crate::synth::{self, SceneRecord};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemperatureConfig {
    pub init: f32,
    pub learnable: bool,
    pub min: f32,
    pub max: f32,
}

impl Default for TemperatureConfig {
    fn default() -> Self {
        Self { init: 0.07, learnable: true, min: 0.01, max: 0.3 }
    }
}

impl TemperatureConfig {
    /// Constant temperature of 0.1.
    pub fn fixed() -> Self {
        Self { init: 0.1, learnable: false, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub objective: ObjectiveConfig,
    pub optimizer: AdamWConfig,
    pub temperature: TemperatureConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Peak learning rate.
    pub lr: f64,
    pub ema_momentum: f32,
    /// Parameter initialisation seed.
    pub seed: u64,
    /// Shuffling and masking seed.
    pub data_seed: u64,
    pub train_data: PathBuf,
    /// Use only the first this many scenes of the dataset.
    pub max_scenes: Option<usize>,
    pub out_dir: PathBuf,
    /// Write a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    /// Hash the momentum weights around every optimizer step.
    pub check_invariants: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            objective: ObjectiveConfig::default(),
            optimizer: AdamWConfig::default(),
            temperature: TemperatureConfig::default(),
            batch_size: 64,
            epochs: 30,
            warmup_epochs: 4,
            lr: 5e-4,
            ema_momentum: 0.996,
            seed: 0,
            data_seed: 1,
            train_data: PathBuf::from("train.bin"),
            max_scenes: None,
            out_dir: PathBuf::from("run"),
            checkpoint_every: 0,
            check_invariants: true,
        }
    }
}

/// Peak learning rate under the linear batch-size scaling rule.
pub fn scaled_lr(base: f64, batch_size: usize) -> f64 {
    base * batch_size as f64 / 256.0
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.objective.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Contract("batch_size must be at least 2".into()));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::Contract("warmup_epochs must be smaller than epochs".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Contract("learning rate must be finite and non-negative".into()));
        }
        let t = &self.temperature;
        if !(t.min > 0.0 && t.min <= t.init && t.init <= t.max) {
            return Err(Error::Contract("temperature must satisfy 0 < min <= init <= max".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, scenes: usize) -> usize {
        scenes.div_ceil(self.batch_size)
    }

    /// Encoder dimensions that follow from the data generator.
    pub fn fit_encoder_to(&mut self, data: &synth::SynthConfig) {
        self.encoder.vocab_size = data.vocab().size();
        self.encoder.patch_dim = data.patch_dim;
        self.encoder.grid_size = data.grid_size;
        self.encoder.max_text_len = data.max_text_len();
        self.encoder.max_seq_len = data.num_patches() + data.max_text_len() + 1;
    }
}

/// Decay applies to matrices only; vectors (biases, norm gains) and the
/// temperature are exempt.
fn decay_mask(params: &ParamSet) -> Vec<bool> {
    params.tensors().iter().map(|t| t.ndim() >= 2).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub encoder: EncoderConfig,
    pub step: usize,
    pub seed: u64,
    pub tau: f32,
    pub params: Vec<String>,
    pub online_hash: String,
    pub momentum_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub online: Weights,
    pub momentum: Weights,
    pub tau: f32,
    pub step: usize,
    pub seed: u64,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.online.params.save_dir(dir, "online.")?;
        self.momentum.params.save_dir(dir, "momentum.")?;
        let m = CheckpointManifest {
            version: CHECKPOINT_VERSION,
            encoder: self.online.config.clone(),
            step: self.step,
            seed: self.seed,
            tau: self.tau,
            params: self.online.params.names().to_vec(),
            online_hash: self.online.params.content_hash(),
            momentum_hash: self.momentum.params.content_hash(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: CheckpointManifest =
            serde_json::from_slice(&fs::read(dir.join("manifest.json"))?).map_err(|e| Error::Format(format!("bad checkpoint manifest: {e}")))?;
        if m.version != CHECKPOINT_VERSION {
            return Err(Error::Version(format!("checkpoint version {}, expected {CHECKPOINT_VERSION}", m.version)));
        }
        let online = ParamSet::load_dir(dir, "online.", &m.params)?;
        let momentum = ParamSet::load_dir(dir, "momentum.", &m.params)?;
        if online.content_hash() != m.online_hash || momentum.content_hash() != m.momentum_hash {
            return Err(Error::Format("checkpoint tensors do not match the manifest hashes".into()));
        }
        let fresh = Weights::init(m.encoder.clone(), 0)?;
        if !fresh.params.same_inventory(&online) {
            return Err(Error::Format("checkpoint parameters do not match the encoder config".into()));
        }
        Ok(Self {
            online: Weights { config: m.encoder.clone(), params: online },
            momentum: Weights { config: m.encoder, params: momentum },
            tau: m.tau,
            step: m.step,
            seed: m.seed,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub itc: f64,
    pub xmc: Option<f64>,
    pub cic: Option<f64>,
    pub cmc: Option<f64>,
    pub mlm: Option<f64>,
    pub mim: Option<f64>,
    pub cmc_equiv_gap_median: Option<f64>,
    pub total: f64,
    pub tau: f32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InvariantCounts {
    /// Steps whose optimizer update left the momentum weights bit-identical.
    pub ema_untouched: usize,
    /// Steps whose momentum inputs carried no mask.
    pub momentum_inputs_clean: usize,
    pub skipped_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub dataset_hash: String,
    pub scenes: usize,
    pub steps_per_epoch: usize,
    pub total_steps: usize,
    pub epochs: Vec<EpochSummary>,
    pub invariants: InvariantCounts,
    pub final_checkpoint: PathBuf,
    pub final_online_hash: String,
    pub metrics_path: PathBuf,
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

pub fn pairs_from_records(records: &[SceneRecord]) -> Result<Vec<Pair>> {
    records
        .iter()
        .map(|r| {
            let s = r.text_sample();
            Ok(Pair { scene_id: r.index, image: r.image_tokens()?, text: s.text.expect("text sample") })
        })
        .collect()
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn summarize(epoch: usize, records: &[MetricsRecord]) -> EpochSummary {
    let n = records.len().max(1) as f64;
    let mean = |f: &dyn Fn(&MetricsRecord) -> Option<f32>| -> Option<f64> {
        let v: Vec<f64> = records.iter().filter_map(f).map(f64::from).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let mut gaps: Vec<f64> = records.iter().filter_map(|r| r.cmc_equiv_gap).map(f64::from).collect();
    EpochSummary {
        epoch,
        steps: records.len(),
        itc: records.iter().map(|r| r.itc as f64).sum::<f64>() / n,
        xmc: mean(&|r| r.xmc),
        cic: mean(&|r| r.cic),
        cmc: mean(&|r| r.cmc),
        mlm: mean(&|r| r.mlm),
        mim: mean(&|r| r.mim),
        cmc_equiv_gap_median: median(&mut gaps),
        total: records.iter().map(|r| r.total as f64).sum::<f64>() / n,
        tau: records.last().map_or(0.0, |r| r.tau),
    }
}

/// Reads the dataset named in the config and trains on it. The encoder's
/// input dimensions are taken from the dataset header.
pub fn train(config: &TrainConfig) -> Result<RunManifest> {
    let ds = synth::read_dataset(&config.train_data)?;
    let mut config = config.clone();
    config.fit_encoder_to(&ds.header.config);
    config.validate()?;
    let hash = file_hash(&config.train_data)?;
    let mut records = ds.records;
    if let Some(max) = config.max_scenes {
        records.truncate(max);
    }
    train_records(&config, &records, hash)
}

/// Trains on in-memory scenes. Writes `metrics.jsonl`, checkpoints and
/// `manifest.json` under `config.out_dir`.
pub fn train_records(config: &TrainConfig, records: &[SceneRecord], dataset_hash: String) -> Result<RunManifest> {
    config.validate()?;
    let pairs = pairs_from_records(records)?;
    let n = pairs.len();
    if config.epochs > 0 && n < 2 {
        return Err(Error::Contract("training needs at least 2 scenes".into()));
    }
    if n % config.batch_size == 1 {
        return Err(Error::Contract(format!("{n} scenes leave a final batch of one pair under batch_size {}", config.batch_size)));
    }
    fs::create_dir_all(&config.out_dir)?;
    let steps_per_epoch = config.steps_per_epoch(n);
    let total_steps = config.epochs * steps_per_epoch;
    let warmup_steps = config.warmup_epochs * steps_per_epoch;

    let mut online = Weights::init(config.encoder.clone(), config.seed)?;
    let mut momentum = online.clone();
    let mut tau = Tensor::scalar(config.temperature.init);
    let mut shapes: Vec<&[usize]> = online.params.tensors().iter().map(|t| t.shape()).collect();
    shapes.push(&[]);
    let mut decay = decay_mask(&online.params);
    decay.push(false);
    let shapes: Vec<Vec<usize>> = shapes.iter().map(|s| s.to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut opt = AdamW::new(config.optimizer, &shape_refs, decay)?;

    let metrics_path = config.out_dir.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    let mut invariants = InvariantCounts::default();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    let ckpt_dir = |s: usize| config.out_dir.join("checkpoints").join(format!("step-{s}"));

    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.data_seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_records = Vec::with_capacity(steps_per_epoch);
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let batch: Vec<Pair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            let diag = config.objective.diag_every > 0 && (step - 1).is_multiple_of(config.objective.diag_every);
            let inputs = objectives::prepare_step(&batch, &config.objective, config.data_seed, step - 1, total_steps);
            if !inputs.clean_inputs_unmasked() {
                return Err(Error::Contract(format!("step {step}: momentum inputs contain masks")));
            }
            invariants.momentum_inputs_clean += 1;
            let keys = objectives::momentum_streams(&config.objective, diag);
            let mom_feats = objectives::momentum_features(&momentum, &inputs, &keys)?;

            let mut tape = Tape::new();
            let bound = online.bind(&mut tape, true);
            let tau_var = if config.temperature.learnable { tape.param(tau.clone()) } else { tape.constant(tau.clone()) };
            let graph = objectives::total_loss(&mut tape, &bound, &mom_feats, &inputs, tau_var, &config.objective, diag)?;
            if !graph.bundle.is_finite() {
                let dump = config.out_dir.join("nonfinite_batch.json");
                let ids: Vec<u64> = batch.iter().map(|p| p.scene_id).collect();
                let body = serde_json::json!({ "step": step, "scene_ids": ids, "losses": graph.bundle });
                fs::write(&dump, serde_json::to_string_pretty(&body)?)?;
                return Err(Error::NonFinite(format!("loss at step {step}; batch dumped to {}", dump.display())));
            }
            let grads = tape.backward(graph.loss)?;
            let mut grad_list: Vec<Tensor> = bound.vars().iter().zip(online.params.tensors()).map(|(&v, t)| grads.get_or_zeros(v, t)).collect();
            grad_list.push(grads.get_or_zeros(tau_var, &tau));
            drop(bound);

            let lr = lr_schedule(step, total_steps, warmup_steps, config.lr);
            let before = config.check_invariants.then(|| momentum.params.content_hash());
            let mut targets: Vec<&mut Tensor> = online.params.tensors_mut().iter_mut().collect();
            targets.push(&mut tau);
            if !opt.step(&mut targets, &grad_list, lr as f32)? {
                invariants.skipped_steps += 1;
            }
            if let Some(h) = before {
                if momentum.params.content_hash() != h {
                    return Err(Error::Contract(format!("step {step}: optimizer modified momentum weights")));
                }
                invariants.ema_untouched += 1;
            }
            let t = &config.temperature;
            let clamped = tau.item()?.clamp(t.min, t.max);
            tau = Tensor::scalar(clamped);
            objectives::ema_update(&online.params, &mut momentum.params, config.ema_momentum)?;

            let rec = MetricsRecord::new(step, &graph.bundle, clamped, lr, inputs.mim_ratio);
            serde_json::to_writer(&mut metrics, &rec)?;
            metrics.write_all(b"\n")?;
            log::debug!("step {step}/{total_steps} loss {:.4}", rec.total);
            epoch_records.push(rec);
        }
        let summary = summarize(epoch, &epoch_records);
        log::info!("epoch {} mean loss {:.4} (itc {:.4}) tau {:.4}", epoch + 1, summary.total, summary.itc, summary.tau);
        epochs.push(summary);
        let last = epoch + 1 == config.epochs;
        if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 && !last {
            let ck = Checkpoint { online: online.clone(), momentum: momentum.clone(), tau: tau.item()?, step, seed: config.seed };
            ck.save(&ckpt_dir(step))?;
        }
    }
    metrics.flush()?;

    let final_checkpoint = ckpt_dir(step);
    let ck = Checkpoint { online, momentum, tau: tau.item()?, step, seed: config.seed };
    ck.save(&final_checkpoint)?;
    let manifest = RunManifest {
        config: config.clone(),
        dataset_hash,
        scenes: n,
        steps_per_epoch,
        total_steps,
        epochs,
        invariants,
        final_checkpoint,
        final_online_hash: ck.online.params.content_hash(),
        metrics_path,
    };
    fs::write(config.out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Parses a metrics log written by [`train_records`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("metrics line {}: {e}", i + 1))))
        .collect()
}
