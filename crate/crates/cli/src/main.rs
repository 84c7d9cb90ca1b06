mod config;

use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use oner::attention::{self, LogitMode, VerifyDims};
use oner::encoder::ModalitySample;
use oner::eval::{self, Direction, TokenFeatures};
use oner::objectives::Ablation;
use oner::synth::{self, Label, SceneRecord, SynthConfig};
use oner::train::{self, Checkpoint};
use serde_json::{json, Map, Value};

use config::{ConfigError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "oner", version, about = "Single-tower vision-language contrastive laboratory")]
struct Cli {
    /// JSON config file; command-line flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired-scene dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Grid side length (patches per row).
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        max_objects: Option<usize>,
        /// Standard deviation of the per-cell noise.
        #[arg(long)]
        noise: Option<f64>,
        /// Probability of one extra object visible in only one view.
        #[arg(long)]
        decoy: Option<f64>,
    },
    /// Train an encoder and write checkpoints, metrics and a run manifest.
    Train {
        /// itc, itc_xmc, itc_xmc_cic or itc_cmc
        #[arg(long)]
        ablation: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        max_scenes: Option<usize>,
    },
    /// Evaluate a checkpoint; prints a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated: retrieval, gap, localization, bootstrap, decomposition, equivalence
        #[arg(long, value_delimiter = ',')]
        suite: Option<Vec<String>>,
        /// Held-out dataset file (otherwise generated from the config).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Metrics log for the equivalence suite (default: the run's metrics.jsonl).
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the concatenated-attention decomposition on random instances;
    /// writes per-trial CSV to stdout.
    VerifyDecomposition {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run in 64-bit floats (default 32-bit).
        #[arg(long)]
        f64: bool,
        /// Zero queries so every attention logit is equal.
        #[arg(long)]
        uniform: bool,
    },
    /// Write patch-prompt similarity maps of one scene as PGM images.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        scene: u64,
        #[arg(long)]
        out_dir: PathBuf,
        /// Compare projected tokens instead of hidden states.
        #[arg(long)]
        projected: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for I/O-class failures, 1 for everything the caller got wrong.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<ConfigError>() {
            return 1;
        }
        if let Some(err) = cause.downcast_ref::<oner::Error>() {
            return if err.is_io() { 2 } else { 1 };
        }
        if cause.is::<io::Error>() {
            return 2;
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenData { out, count, seed, grid, max_objects, noise, decoy } => {
            let count = count.unwrap_or(cfg.gen.count);
            let seed = seed.unwrap_or(cfg.gen.seed);
            let d = &mut cfg.data;
            set(&mut d.grid_size, grid);
            set(&mut d.max_objects, max_objects);
            set(&mut d.noise, noise);
            set(&mut d.decoy, decoy);
            synth::write_dataset(&out, count, seed, d)?;
            log::info!("wrote {count} scenes to {}", out.display());
        }
        Command::Train { ablation, data, out, epochs, seed, lr, batch_size, max_scenes } => {
            let t = &mut cfg.train;
            if let Some(a) = ablation {
                t.objective.ablation = Ablation::parse(&a)?;
            }
            set(&mut t.train_data, data);
            set(&mut t.out_dir, out);
            set(&mut t.epochs, epochs);
            set(&mut t.seed, seed);
            set(&mut t.lr, lr);
            set(&mut t.batch_size, batch_size);
            if max_scenes.is_some() {
                t.max_scenes = max_scenes;
            }
            let manifest = train::train(t)?;
            println!("{}", t.out_dir.join("manifest.json").display());
            if let Some(last) = manifest.epochs.last() {
                log::info!("final epoch loss {:.4}, tau {:.4}", last.total, last.tau);
            }
        }
        Command::Eval { checkpoint, suite, data, metrics, scenes, out } => {
            let e = &mut cfg.eval;
            set(&mut e.suites, suite);
            if data.is_some() {
                e.data = data;
            }
            set(&mut e.scenes, scenes);
            let report = evaluate(&cfg, &checkpoint, metrics.as_deref())?;
            let text = serde_json::to_string_pretty(&report)?;
            match out {
                Some(path) => std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?,
                None => println!("{text}"),
            }
        }
        Command::VerifyDecomposition { trials, seed, f64, uniform } => {
            let mode = if uniform { LogitMode::Uniform } else { LogitMode::Random };
            let dims = VerifyDims::default();
            let report = if f64 {
                attention::verify_decomposition::<f64>(trials, &dims, seed, mode)?
            } else {
                attention::verify_decomposition::<f32>(trials, &dims, seed, mode)?
            };
            let mut stdout = io::stdout().lock();
            report.write_csv(&mut stdout)?;
            stdout.flush()?;
            log::info!(
                "{} trials ({}): max residual {:.3e}, max |sum(beta) - 1| {:.3e}",
                report.rows.len(),
                report.precision,
                report.max_residual(),
                report.max_beta_sum_error()
            );
        }
        Command::Viz { checkpoint, data, scene, out_dir, projected } => {
            if data.is_some() {
                cfg.eval.data = data;
            }
            let features = if projected { TokenFeatures::Projected } else { cfg.eval.token_features };
            let ck = Checkpoint::load(&checkpoint)?;
            let (data_cfg, records) = eval_records(&cfg, scene + 1)?;
            check_compatible(&ck, &data_cfg)?;
            let rec = records.get(scene as usize).with_context(|| format!("scene {scene} not in the dataset"))?;
            std::fs::create_dir_all(&out_dir)?;
            let g = data_cfg.grid_size;
            let mut labels: Vec<Label> = rec.scene.objects.iter().filter(|o| o.in_image()).map(|o| o.label()).collect();
            labels.sort();
            labels.dedup();
            for label in labels {
                let stem = format!("scene{scene}_c{}_s{}", label.color_id, label.shape_id);
                let map = eval::similarity_map(&ck.online, rec, &data_cfg, label, cfg.eval.template, features)?;
                let mask: Vec<f32> = rec.label_mask(label).iter().map(|&m| f32::from(u8::from(m))).collect();
                let (map_path, mask_path) = (out_dir.join(format!("{stem}.pgm")), out_dir.join(format!("{stem}_mask.pgm")));
                eval::write_pgm(&map_path, &map, g)?;
                eval::write_pgm(&mask_path, &mask, g)?;
                println!("{}", map_path.display());
                println!("{}", mask_path.display());
            }
        }
    }
    Ok(())
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Held-out scenes from the configured file, or generated on the fly.
fn eval_records(cfg: &RunConfig, count: u64) -> Result<(SynthConfig, Vec<SceneRecord>)> {
    match &cfg.eval.data {
        Some(path) => {
            let ds = synth::read_dataset(path).with_context(|| format!("reading {}", path.display()))?;
            Ok((ds.header.config, ds.records))
        }
        None => Ok((cfg.data.clone(), synth::generate_records(&cfg.data, cfg.eval.seed, 0..count)?)),
    }
}

fn check_compatible(ck: &Checkpoint, data: &SynthConfig) -> Result<()> {
    let enc = &ck.online.config;
    if enc.grid_size != data.grid_size || enc.patch_dim != data.patch_dim || enc.vocab_size != data.vocab().size() {
        bail!(oner::Error::Contract(format!(
            "checkpoint expects a {0}x{0} grid of {1}-dim patches and {2} symbols; the evaluation data differ",
            enc.grid_size, enc.patch_dim, enc.vocab_size
        )));
    }
    Ok(())
}

fn evaluate(cfg: &RunConfig, checkpoint: &Path, metrics: Option<&Path>) -> Result<Value> {
    const SUITES: [&str; 6] = ["retrieval", "gap", "localization", "bootstrap", "decomposition", "equivalence"];
    let e = &cfg.eval;
    if let Some(bad) = e.suites.iter().find(|s| !SUITES.contains(&s.as_str())) {
        bail!(oner::Error::Input(format!("unknown suite {bad:?}; expected one of {}", SUITES.join(", "))));
    }
    let wants = |s: &str| e.suites.iter().any(|x| x == s);
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let w = &ck.online;
    let mut report = Map::new();
    report.insert("checkpoint".into(), json!(checkpoint));
    report.insert("step".into(), json!(ck.step));
    report.insert("tau".into(), json!(ck.tau));

    let needs_data = ["retrieval", "gap", "localization", "bootstrap", "decomposition"].iter().any(|s| wants(s));
    if needs_data {
        let (data_cfg, mut records) = eval_records(cfg, e.scenes as u64)?;
        check_compatible(&ck, &data_cfg)?;
        records.truncate(e.scenes);
        if records.len() < 2 {
            bail!(oner::Error::Input("evaluation needs at least 2 scenes".into()));
        }
        report.insert("scenes".into(), json!(records.len()));
        if wants("retrieval") || wants("gap") {
            let images: Vec<ModalitySample> = records.iter().map(SceneRecord::image_sample).collect::<oner::Result<_>>()?;
            let texts: Vec<ModalitySample> = records.iter().map(SceneRecord::text_sample).collect();
            let fi = eval::projected(w, &images.iter().collect::<Vec<_>>())?;
            let ft = eval::projected(w, &texts.iter().collect::<Vec<_>>())?;
            if wants("retrieval") {
                let t2i = eval::retrieval_recall(&ft, &fi, &e.recall_ks, Direction::TextToImage)?;
                let i2t = eval::retrieval_recall(&fi, &ft, &e.recall_ks, Direction::ImageToText)?;
                report.insert("retrieval".into(), json!({ "text_to_image": t2i, "image_to_text": i2t, "chance_r1": 1.0 / records.len() as f64 }));
            }
            if wants("gap") {
                report.insert("gap".into(), serde_json::to_value(eval::modality_gap(&fi, &ft)?)?);
            }
        }
        if wants("localization") {
            let n = e.localization_scenes.min(records.len());
            let loc = eval::localization_score(w, &records[..n], &data_cfg, e.template, e.token_features)?;
            report.insert(
                "localization".into(),
                json!({ "scenes": n, "prompts": loc.scenes.len(), "mean_auc": loc.mean_auc, "mean_margin": loc.mean_margin, "mean_iou": loc.mean_iou, "skipped": loc.skipped }),
            );
        }
        if wants("bootstrap") {
            let b = eval::bootstrap_classification(w, &records, &data_cfg, e.top_k, e.template)?;
            report.insert("bootstrap".into(), serde_json::to_value(b)?);
        }
        if wants("decomposition") {
            let d = eval::empirical_decomposition(w, &records)?;
            report.insert("decomposition".into(), serde_json::to_value(d)?);
        }
    }
    if wants("equivalence") {
        let path = match metrics {
            Some(p) => p.to_path_buf(),
            None => checkpoint.join("../../metrics.jsonl"),
        };
        let log = train::read_metrics(&path).with_context(|| format!("reading metrics {}", path.display()))?;
        let eq = eval::equivalence_series(&log)?;
        report.insert("equivalence".into(), json!({ "steps": eq.series.len(), "gap": eq.gap, "cmc": eq.cmc }));
    }
    Ok(Value::Object(report))
}
