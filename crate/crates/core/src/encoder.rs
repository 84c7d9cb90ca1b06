//! Single-tower transformer encoder.
//!
//! Images (patch grids) and texts (symbol sequences) are embedded by their own
//! input embedders and then processed by one shared stack of pre-norm
//! attention/MLP blocks. A single class token is prepended to every sequence
//! and no modality indicator tokens exist. A mixture sample is the image
//! tokens followed by the text tokens, each carrying its own positional code.
//!
//! `F(X|Y)` evaluation: the context stream Y runs with plain self-attention;
//! at every depth the X stream's queries attend to Y's keys/values computed
//! from Y's hidden state entering that depth. With Y = X this is exactly
//! self-attention.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel;
use crate::params::ParamSet;
use crate::tape::{Segment, Tape, Var};
use crate::tensor::Tensor;

const LN_EPS: f32 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over every token except the class token.
    Mean,
    /// Final hidden state of the class token.
    Cls,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossContext {
    /// X queries attend to Y's keys/values at every depth.
    EveryLayer,
    /// Self-attention everywhere except the last block.
    FinalLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    pub patch_dim: usize,
    pub max_text_len: usize,
    pub grid_size: usize,
    /// Longest sequence (class token included) the encoder accepts.
    pub max_seq_len: usize,
    pub pooling: Pooling,
    pub cross_context: CrossContext,
    /// Residual connections around attention and MLP.
    pub residual: bool,
    pub mlp: bool,
    pub layer_norm: bool,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub pred_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            width: 128,
            heads: 4,
            mlp_ratio: 4,
            vocab_size: 64,
            patch_dim: 16,
            max_text_len: 24,
            grid_size: 6,
            max_seq_len: 61,
            pooling: Pooling::Mean,
            cross_context: CrossContext::EveryLayer,
            residual: true,
            mlp: true,
            layer_norm: true,
            proj_hidden: 256,
            proj_dim: 128,
            pred_hidden: 256,
        }
    }
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Contract(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        if !self.width.is_multiple_of(4) {
            return Err(Error::Contract("width must be a multiple of 4 for 2D positional codes".into()));
        }
        if self.grid_size * self.grid_size + 1 > self.max_seq_len {
            return Err(Error::Contract(format!("{}x{} grid plus class token exceeds max_seq_len {}", self.grid_size, self.grid_size, self.max_seq_len)));
        }
        if self.vocab_size == 0 || self.patch_dim == 0 || self.proj_dim == 0 {
            return Err(Error::Contract("empty vocabulary, patch or projection width".into()));
        }
        Ok(())
    }
}

/// `[sin(p·ω_0..), cos(p·ω_0..)]` with `ω_i = 10000^(-i/(dim/2))`.
pub fn sincos_1d(dim: usize, pos: f64) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let omega = 1.0 / 10000f64.powf(i as f64 / half as f64);
        out[i] = (pos * omega).sin() as f32;
        out[half + i] = (pos * omega).cos() as f32;
    }
    out
}

/// Row code in the first half of the features, column code in the second.
pub fn sincos_2d(dim: usize, row: usize, col: usize) -> Vec<f32> {
    let mut out = sincos_1d(dim / 2, row as f64);
    out.extend(sincos_1d(dim / 2, col as f64));
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
    Mixture,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTokens {
    /// `[n × patch_dim]`
    pub patches: Tensor,
    pub positions: Vec<(usize, usize)>,
    /// Positions replaced by the learned mask embedding.
    pub masked: Vec<bool>,
}

impl ImageTokens {
    /// Row-major grid of `g×g` patches.
    pub fn grid(patches: Tensor, grid_size: usize) -> Result<Self> {
        let n = patches.rows();
        if n != grid_size * grid_size {
            return Err(Error::Input(format!("{n} patches for a {grid_size}x{grid_size} grid")));
        }
        Ok(Self { patches, positions: (0..n).map(|i| (i / grid_size, i % grid_size)).collect(), masked: vec![false; n] })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextTokens {
    pub symbols: Vec<u32>,
    pub positions: Vec<usize>,
}

impl TextTokens {
    pub fn new(symbols: Vec<u32>) -> Self {
        let positions = (0..symbols.len()).collect();
        Self { symbols, positions }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

/// A token sequence tagged with the modality it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySample {
    pub modality: Modality,
    pub image: Option<ImageTokens>,
    pub text: Option<TextTokens>,
    pub scene_id: u64,
}

impl ModalitySample {
    pub fn image(scene_id: u64, image: ImageTokens) -> Self {
        Self { modality: Modality::Image, image: Some(image), text: None, scene_id }
    }

    pub fn text(scene_id: u64, text: TextTokens) -> Self {
        Self { modality: Modality::Text, image: None, text: Some(text), scene_id }
    }

    pub fn mixture(scene_id: u64, image: ImageTokens, text: TextTokens) -> Self {
        Self { modality: Modality::Mixture, image: Some(image), text: Some(text), scene_id }
    }

    pub fn image_len(&self) -> usize {
        self.image.as_ref().map_or(0, ImageTokens::len)
    }

    pub fn text_len(&self) -> usize {
        self.text.as_ref().map_or(0, TextTokens::len)
    }

    /// Sequence length including the class token.
    pub fn seq_len(&self) -> usize {
        1 + self.image_len() + self.text_len()
    }

    fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        let consistent = match self.modality {
            Modality::Image => self.image.is_some() && self.text.is_none(),
            Modality::Text => self.text.is_some() && self.image.is_none(),
            Modality::Mixture => self.image.is_some() && self.text.is_some(),
        };
        if !consistent {
            return Err(Error::Input(format!("{:?} sample with mismatched parts", self.modality)));
        }
        if let Some(img) = &self.image {
            if img.patches.cols() != cfg.patch_dim || img.patches.rows() != img.len() || img.masked.len() != img.len() {
                return Err(Error::Input("patch tensor does not match positions/patch_dim".into()));
            }
        }
        if let Some(t) = &self.text {
            if t.positions.len() != t.symbols.len() {
                return Err(Error::Input("text positions/symbols length mismatch".into()));
            }
            if let Some(&bad) = t.symbols.iter().find(|&&s| s as usize >= cfg.vocab_size) {
                return Err(Error::Input(format!("symbol {bad} outside vocabulary of {}", cfg.vocab_size)));
            }
        }
        if self.seq_len() > cfg.max_seq_len {
            return Err(Error::Input(format!("sequence of {} exceeds {}", self.seq_len(), cfg.max_seq_len)));
        }
        Ok(())
    }
}

/// Which stream supplies queries or context in a pooled feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StreamKind {
    I,
    T,
    IT,
}

impl From<Modality> for StreamKind {
    fn from(m: Modality) -> Self {
        match m {
            Modality::Image => StreamKind::I,
            Modality::Text => StreamKind::T,
            Modality::Mixture => StreamKind::IT,
        }
    }
}

/// Pooled encoder output `F(query | context)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledFeature {
    pub vector: Tensor,
    pub query_stream: StreamKind,
    pub context_stream: StreamKind,
}

/// Encoder configuration plus its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

fn trunc_normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    trunc_normal_std(rng, shape, INIT_STD)
}

fn trunc_normal_std(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v as f32;
        }
    })
}

impl Weights {
    /// Truncated-normal (σ = 0.02) matrices, zero biases, unit norm gains.
    /// Input embeddings start at unit scale instead, comparable to the fixed
    /// sinusoidal codes they are added to: the class token, mask vector and
    /// text table use σ = 1 and the patch projection σ = 1/√patch_dim.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, c) = (config.width, &config);
        let mut p = ParamSet::new();
        let linear = |p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize| {
            p.insert(format!("{name}.weight"), trunc_normal(rng, &[i, o]));
            p.insert(format!("{name}.bias"), Tensor::zeros(&[o]));
        };
        p.insert("embed.cls", trunc_normal_std(&mut rng, &[1, d], 1.0));
        p.insert("embed.text.table", trunc_normal_std(&mut rng, &[c.vocab_size, d], 1.0));
        p.insert("embed.image.proj.weight", trunc_normal_std(&mut rng, &[c.patch_dim, d], 1.0 / (c.patch_dim as f64).sqrt()));
        p.insert("embed.image.proj.bias", Tensor::zeros(&[d]));
        p.insert("embed.image.mask", trunc_normal_std(&mut rng, &[1, d], 1.0));
        for l in 0..c.depth {
            let b = format!("blocks.{l}");
            if c.layer_norm {
                p.insert(format!("{b}.ln1.gamma"), Tensor::full(&[d], 1.0));
                p.insert(format!("{b}.ln1.beta"), Tensor::zeros(&[d]));
            }
            for w in ["q", "k", "v", "o"] {
                linear(&mut p, &mut rng, &format!("{b}.attn.{w}"), d, d);
            }
            if c.mlp {
                if c.layer_norm {
                    p.insert(format!("{b}.ln2.gamma"), Tensor::full(&[d], 1.0));
                    p.insert(format!("{b}.ln2.beta"), Tensor::zeros(&[d]));
                }
                linear(&mut p, &mut rng, &format!("{b}.mlp.fc1"), d, d * c.mlp_ratio);
                linear(&mut p, &mut rng, &format!("{b}.mlp.fc2"), d * c.mlp_ratio, d);
            }
        }
        if c.layer_norm {
            p.insert("final_ln.gamma", Tensor::full(&[d], 1.0));
            p.insert("final_ln.beta", Tensor::zeros(&[d]));
        }
        linear(&mut p, &mut rng, "projector.0", d, c.proj_hidden);
        linear(&mut p, &mut rng, "projector.1", c.proj_hidden, c.proj_hidden);
        linear(&mut p, &mut rng, "projector.2", c.proj_hidden, c.proj_dim);
        linear(&mut p, &mut rng, "predictor.0", c.proj_dim, c.pred_hidden);
        linear(&mut p, &mut rng, "predictor.1", c.pred_hidden, c.proj_dim);
        linear(&mut p, &mut rng, "head.mlm", d, c.vocab_size);
        linear(&mut p, &mut rng, "head.mim", d, c.patch_dim);
        Ok(Self { config, params: p })
    }

    /// Registers every parameter on `tape`, as trainable leaves or constants.
    pub fn bind<'w>(&'w self, tape: &mut Tape, trainable: bool) -> Bound<'w> {
        let vars = self.params.tensors().iter().map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) }).collect();
        Bound { weights: self, vars }
    }
}

impl Weights {
    /// Binds externally registered variables, one per parameter in order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Bound<'_>> {
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!("{} variables for {} parameters", vars.len(), self.params.len())));
        }
        Ok(Bound { weights: self, vars })
    }
}

/// Parameter groups that are specific to one input modality.
pub fn is_modality_specific(name: &str) -> bool {
    name.starts_with("embed.image.") || name.starts_with("embed.text.")
}

/// Row layout of one sample inside a batched stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRows {
    /// All rows of the sample, class token first.
    pub all: Range<usize>,
    pub image: Range<usize>,
    pub text: Range<usize>,
}

impl SampleRows {
    /// Rows that are pooled (everything except the class token).
    pub fn content(&self) -> Range<usize> {
        self.all.start + 1..self.all.end
    }
}

/// A batch of embedded sequences stacked along rows.
#[derive(Clone, Debug)]
pub struct Embedded {
    pub hidden: Var,
    pub rows: Vec<SampleRows>,
}

/// Output of running the block stack over an embedded batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Final hidden states (after the final norm when enabled).
    pub hidden: Var,
    pub rows: Vec<SampleRows>,
    /// Keys and values computed from this stream at every depth; empty for
    /// streams evaluated under a foreign context.
    pub layer_kv: Vec<(Var, Var)>,
}

/// Parameters registered on a tape.
pub struct Bound<'w> {
    weights: &'w Weights,
    vars: Vec<Var>,
}

impl<'w> Bound<'w> {
    pub fn config(&self) -> &EncoderConfig {
        &self.weights.config
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.weights.params.position(name).map(|i| self.vars[i]).ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    fn linear(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let y = tape.matmul(x, self.var(&format!("{name}.weight"))?)?;
        tape.add_row(y, self.var(&format!("{name}.bias"))?)
    }

    fn norm(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        if !self.config().layer_norm {
            return Ok(x);
        }
        let g = self.var(&format!("{name}.gamma"))?;
        let b = self.var(&format!("{name}.beta"))?;
        tape.layer_norm(x, g, b, LN_EPS)
    }

    /// Embeds a batch: per-modality input embedding, positional codes, one
    /// class token per sequence.
    pub fn embed(&self, tape: &mut Tape, samples: &[&ModalitySample]) -> Result<Embedded> {
        let cfg = self.config();
        let d = cfg.width;
        let mut patch_rows = Vec::new();
        for s in samples {
            s.validate(cfg)?;
            if let Some(img) = &s.image {
                patch_rows.extend_from_slice(img.patches.data());
            }
        }
        let n_patches = patch_rows.len() / cfg.patch_dim;
        let cls = self.var("embed.cls")?;
        let mask = self.var("embed.image.mask")?;
        let table = self.var("embed.text.table")?;
        // sources: 0 = class token, 1 = text table, 2 = image mask, 3 = projected patches
        let mut srcs = vec![cls, table, mask];
        if n_patches > 0 {
            let pc = tape.constant(Tensor::new(vec![n_patches, cfg.patch_dim], patch_rows)?);
            srcs.push(self.linear(tape, pc, "embed.image.proj")?);
        }
        let total: usize = samples.iter().map(|s| s.seq_len()).sum();
        let mut index = Vec::with_capacity(total);
        let mut pos = Vec::with_capacity(total * d);
        let mut rows = Vec::with_capacity(samples.len());
        let mut patch_cursor = 0;
        for s in samples {
            let start = index.len();
            index.push((0, 0));
            pos.extend(std::iter::repeat_n(0.0, d));
            let img_start = index.len();
            if let Some(img) = &s.image {
                for (i, &(r, c)) in img.positions.iter().enumerate() {
                    index.push(if img.masked[i] { (2, 0) } else { (3, patch_cursor + i) });
                    pos.extend(sincos_2d(d, r, c));
                }
                patch_cursor += img.len();
            }
            let txt_start = index.len();
            if let Some(t) = &s.text {
                for (&sym, &p) in t.symbols.iter().zip(&t.positions) {
                    index.push((1, sym as usize));
                    pos.extend(sincos_1d(d, p as f64));
                }
            }
            let end = index.len();
            rows.push(SampleRows { all: start..end, image: img_start..txt_start, text: txt_start..end });
        }
        let tokens = tape.gather(&srcs, index)?;
        let pos = tape.constant(Tensor::new(vec![total, d], pos)?);
        let hidden = tape.add(tokens, pos)?;
        Ok(Embedded { hidden, rows })
    }

    /// Runs the block stack. With `context`, sample `i` of `x` attends to
    /// sample `i` of the context stream.
    pub fn run(&self, tape: &mut Tape, x: &Embedded, context: Option<&Encoded>) -> Result<Encoded> {
        let cfg = self.config();
        if let Some(ctx) = context {
            if ctx.rows.len() != x.rows.len() || ctx.layer_kv.len() != cfg.depth {
                return Err(Error::Contract("context stream does not pair with query stream".into()));
            }
        }
        let mut h = x.hidden;
        let mut layer_kv = Vec::new();
        for l in 0..cfg.depth {
            let b = format!("blocks.{l}");
            let a = self.norm(tape, h, &format!("{b}.ln1"))?;
            let q = self.linear(tape, a, &format!("{b}.attn.q"))?;
            let use_ctx = match (context, cfg.cross_context) {
                (Some(_), CrossContext::EveryLayer) => true,
                (Some(_), CrossContext::FinalLayer) => l + 1 == cfg.depth,
                (None, _) => false,
            };
            let (k, v, segments) = if use_ctx {
                let ctx = context.expect("checked above");
                let (k, v) = ctx.layer_kv[l];
                let segs = x.rows.iter().zip(&ctx.rows).map(|(xr, cr)| Segment { queries: xr.all.clone(), keys: cr.all.clone() }).collect();
                (k, v, segs)
            } else {
                let k = self.linear(tape, a, &format!("{b}.attn.k"))?;
                let v = self.linear(tape, a, &format!("{b}.attn.v"))?;
                if context.is_none() {
                    layer_kv.push((k, v));
                }
                let segs = x.rows.iter().map(|r| Segment { queries: r.all.clone(), keys: r.all.clone() }).collect();
                (k, v, segs)
            };
            let att = tape.attention(q, k, v, cfg.heads, segments)?;
            let o = self.linear(tape, att, &format!("{b}.attn.o"))?;
            h = if cfg.residual { tape.add(h, o)? } else { o };
            if cfg.mlp {
                let m = self.norm(tape, h, &format!("{b}.ln2"))?;
                let m = self.linear(tape, m, &format!("{b}.mlp.fc1"))?;
                let m = tape.gelu(m)?;
                let m = self.linear(tape, m, &format!("{b}.mlp.fc2"))?;
                h = if cfg.residual { tape.add(h, m)? } else { m };
            }
        }
        let hidden = self.norm(tape, h, "final_ln")?;
        Ok(Encoded { hidden, rows: x.rows.clone(), layer_kv })
    }

    /// One pooled row per sample.
    pub fn pool(&self, tape: &mut Tape, enc: &Encoded) -> Result<Var> {
        let segs = enc
            .rows
            .iter()
            .map(|r| match self.config().pooling {
                Pooling::Cls => r.all.start..r.all.start + 1,
                Pooling::Mean if r.content().is_empty() => r.all.start..r.all.start + 1,
                Pooling::Mean => r.content(),
            })
            .collect();
        tape.segment_mean(enc.hidden, segs)
    }

    /// Three linear layers with GELU between, L2-normalised output.
    pub fn project(&self, tape: &mut Tape, pooled: Var) -> Result<Var> {
        let h = self.linear(tape, pooled, "projector.0")?;
        let h = tape.gelu(h)?;
        let h = self.linear(tape, h, "projector.1")?;
        let h = tape.gelu(h)?;
        let h = self.linear(tape, h, "projector.2")?;
        tape.l2_normalize(h)
    }

    /// Two linear layers, L2-normalised output.
    pub fn predict(&self, tape: &mut Tape, projected: Var) -> Result<Var> {
        let h = self.linear(tape, projected, "predictor.0")?;
        let h = self.linear(tape, h, "predictor.1")?;
        tape.l2_normalize(h)
    }

    pub fn mlm_logits(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        self.linear(tape, hidden, "head.mlm")
    }

    pub fn mim_reconstruction(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        self.linear(tape, hidden, "head.mim")
    }

    /// Embeds and encodes `queries`, optionally under `contexts`.
    pub fn encode_stream(&self, tape: &mut Tape, queries: &[&ModalitySample], contexts: Option<&[&ModalitySample]>) -> Result<Encoded> {
        let x = self.embed(tape, queries)?;
        match contexts {
            None => self.run(tape, &x, None),
            Some(ctx) => {
                let y = self.embed(tape, ctx)?;
                let y = self.run(tape, &y, None)?;
                self.run(tape, &x, Some(&y))
            }
        }
    }
}

const EVAL_CHUNK: usize = 128;

/// Pooled features `[N × width]` for a batch, evaluated without gradients.
pub fn encode_batch(weights: &Weights, queries: &[&ModalitySample], contexts: Option<&[&ModalitySample]>) -> Result<Tensor> {
    if let Some(c) = contexts {
        if c.len() != queries.len() {
            return Err(Error::Contract("query/context batch sizes differ".into()));
        }
    }
    let chunks: Vec<&[&ModalitySample]> = queries.chunks(EVAL_CHUNK).collect();
    let parts = parallel::map_indexed(chunks.len(), |i| {
        let chunk = chunks[i];
        let mut tape = Tape::new();
        let bound = weights.bind(&mut tape, false);
        let ctx = contexts.map(|c| &c[i * EVAL_CHUNK..i * EVAL_CHUNK + chunk.len()]);
        let enc = bound.encode_stream(&mut tape, chunk, ctx)?;
        let pooled = bound.pool(&mut tape, &enc)?;
        Ok(tape.value(pooled).clone())
    })?;
    if parts.is_empty() {
        return Ok(Tensor::zeros(&[0, weights.config.width]));
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::vstack(&refs)
}

/// Projected (unit-norm) features for a batch.
pub fn project_batch(weights: &Weights, pooled: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = weights.bind(&mut tape, false);
    let x = tape.constant(pooled.clone());
    let z = bound.project(&mut tape, x)?;
    Ok(tape.value(z).clone())
}

/// Predictor applied to projected features.
pub fn predict_batch(weights: &Weights, projected: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = weights.bind(&mut tape, false);
    let x = tape.constant(projected.clone());
    let z = bound.predict(&mut tape, x)?;
    Ok(tape.value(z).clone())
}

/// `F(query | context)`; `context = None` means self-context.
pub fn encode(weights: &Weights, query: &ModalitySample, context: Option<&ModalitySample>) -> Result<PooledFeature> {
    let ctx: Option<[&ModalitySample; 1]> = context.map(|c| [c]);
    let pooled = encode_batch(weights, &[query], ctx.as_ref().map(|c| &c[..]))?;
    Ok(PooledFeature {
        vector: pooled.reshape(&[weights.config.width])?,
        query_stream: query.modality.into(),
        context_stream: context.map_or(query.modality, |c| c.modality).into(),
    })
}

/// Final hidden states `[seq_len × width]`, class token first.
pub fn encode_tokens(weights: &Weights, sample: &ModalitySample) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = weights.bind(&mut tape, false);
    let enc = bound.encode_stream(&mut tape, &[sample], None)?;
    Ok(tape.value(enc.hidden).clone())
}

/// Final hidden states of several samples, one tensor per sample.
pub fn encode_tokens_batch(weights: &Weights, samples: &[&ModalitySample]) -> Result<Vec<Tensor>> {
    let chunks: Vec<&[&ModalitySample]> = samples.chunks(EVAL_CHUNK).collect();
    let parts = parallel::map_indexed(chunks.len(), |i| {
        let mut tape = Tape::new();
        let bound = weights.bind(&mut tape, false);
        let enc = bound.encode_stream(&mut tape, chunks[i], None)?;
        let h = tape.value(enc.hidden);
        enc.rows.iter().map(|r| h.select_rows(&r.all.clone().collect::<Vec<_>>())).collect::<Result<Vec<_>>>()
    })?;
    Ok(parts.into_iter().flatten().collect())
}

/// Embedded input sequence `[seq_len × width]` (no blocks applied).
pub fn embed(weights: &Weights, sample: &ModalitySample) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = weights.bind(&mut tape, false);
    let e = bound.embed(&mut tape, &[sample])?;
    Ok(tape.value(e.hidden).clone())
}
