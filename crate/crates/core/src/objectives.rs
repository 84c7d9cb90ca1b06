//! Contrastive loss family, masked modeling and the momentum-teacher update.
//!
//! Online features are `predict(project(pooled))`; momentum features are
//! `project(pooled)` from the EMA copy, evaluated on clean inputs and entered
//! into the tape as constants so no gradient reaches them.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Bound, Encoded, ImageTokens, ModalitySample, TextTokens, Weights};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::synth::{MASK, PAD};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Contrastive feature streams, written `query|context`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StreamKey {
    /// `I|I`
    Image,
    /// `T|T`
    Text,
    /// `I|T`
    ImageGivenText,
    /// `T|I`
    TextGivenImage,
    /// `IT|IT`
    Mixture,
    /// Average of the pooled `I|I` and `T|T` states, projected.
    SelfMix,
    /// Average of the pooled `I|T` and `T|I` states, projected.
    CrossMix,
}

impl StreamKey {
    pub const ALL: [StreamKey; 7] =
        [StreamKey::Image, StreamKey::Text, StreamKey::ImageGivenText, StreamKey::TextGivenImage, StreamKey::Mixture, StreamKey::SelfMix, StreamKey::CrossMix];

    /// The two encoded streams averaged by a mix key.
    pub fn parts(self) -> Option<(StreamKey, StreamKey)> {
        match self {
            StreamKey::SelfMix => Some((StreamKey::Image, StreamKey::Text)),
            StreamKey::CrossMix => Some((StreamKey::ImageGivenText, StreamKey::TextGivenImage)),
            _ => None,
        }
    }

    fn mix_of(a: StreamKey, b: StreamKey) -> Option<StreamKey> {
        [StreamKey::SelfMix, StreamKey::CrossMix].into_iter().find(|k| k.parts() == Some((a, b)))
    }
}

impl fmt::Display for StreamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StreamKey::Image => "I|I",
            StreamKey::Text => "T|T",
            StreamKey::ImageGivenText => "I|T",
            StreamKey::TextGivenImage => "T|I",
            StreamKey::Mixture => "IT|IT",
            StreamKey::SelfMix => "(I|I+T|T)/2",
            StreamKey::CrossMix => "(I|T+T|I)/2",
        })
    }
}

/// Objective sets compared in the ablation table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Itc,
    ItcXmc,
    ItcXmcCic,
    #[default]
    ItcCmc,
}

impl Ablation {
    pub fn xmc(self) -> bool {
        matches!(self, Ablation::ItcXmc | Ablation::ItcXmcCic)
    }

    pub fn cic(self) -> bool {
        self == Ablation::ItcXmcCic
    }

    pub fn cmc(self) -> bool {
        self == Ablation::ItcCmc
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.replace(['+', '-'], "_").to_lowercase()))
            .map_err(|_| Error::Input(format!("unknown ablation {s:?} (itc, itc_xmc, itc_xmc_cic, itc_cmc)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub itc: f32,
    pub xmc: f32,
    pub cic: f32,
    pub cmc: f32,
    pub mlm: f32,
    pub mim: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { itc: 1.0, xmc: 1.0, cic: 1.0, cmc: 1.0, mlm: 1.0, mim: 1.0 }
    }
}

/// Where two streams are averaged for the mixup terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixLevel {
    /// Average pooled encoder states, then project (and predict).
    #[default]
    Hidden,
    /// Average unit-norm output features and re-normalise.
    Projected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub ablation: Ablation,
    pub mix_level: MixLevel,
    pub mlm: bool,
    pub mim: bool,
    pub mlm_ratio: f64,
    pub mim_ratio_start: f64,
    pub mim_ratio_end: f64,
    pub weights: LossWeights,
    /// Compute the XMC/CIC/CMC equivalence diagnostic every this many steps
    /// (0 disables it).
    pub diag_every: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            ablation: Ablation::ItcCmc,
            mix_level: MixLevel::Hidden,
            mlm: true,
            mim: true,
            mlm_ratio: 0.15,
            mim_ratio_start: 0.1,
            mim_ratio_end: 0.5,
            weights: LossWeights::default(),
            diag_every: 1,
        }
    }
}

impl ObjectiveConfig {
    /// MIM ratio rises linearly from start (first step) to end (last step).
    pub fn mim_ratio(&self, step: usize, total_steps: usize) -> f64 {
        let progress = if total_steps <= 1 { 1.0 } else { (step as f64 / (total_steps - 1) as f64).min(1.0) };
        self.mim_ratio_start + (self.mim_ratio_end - self.mim_ratio_start) * progress
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |r: f64| (0.0..=1.0).contains(&r);
        if !ok(self.mlm_ratio) || !ok(self.mim_ratio_start) || !ok(self.mim_ratio_end) {
            return Err(Error::Contract("masking ratios must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn streams(&self, diagnostics: bool) -> Vec<StreamKey> {
        let a = self.ablation;
        let mut keys = vec![StreamKey::Image, StreamKey::Text];
        if a.cic() || diagnostics {
            keys.extend([StreamKey::ImageGivenText, StreamKey::TextGivenImage]);
        }
        if a.cmc() || diagnostics {
            keys.push(StreamKey::Mixture);
        }
        if self.mix_level == MixLevel::Hidden {
            if a.xmc() || a.cic() || a.cmc() || diagnostics {
                keys.push(StreamKey::SelfMix);
            }
            if a.cic() || diagnostics {
                keys.push(StreamKey::CrossMix);
            }
        }
        keys
    }

    fn masked_modeling(&self) -> bool {
        self.mlm || self.mim
    }
}

fn require_stopped(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if tape.requires_grad(v) {
        return Err(Error::Contract(format!("{what} must be gradient-stopped")));
    }
    Ok(())
}

/// Mean over rows of `-log softmax(left·rightᵀ/τ)[i, i]`.
pub fn info_nce(tape: &mut Tape, left: Var, right: Var, tau: Var) -> Result<Var> {
    require_stopped(tape, right, "InfoNCE key side")?;
    let n = tape.value(left).rows();
    if n < 2 {
        return Err(Error::Contract(format!("InfoNCE needs at least 2 pairs, got {n}")));
    }
    if tape.value(right).shape() != tape.value(left).shape() {
        return Err(Error::Dimension("InfoNCE sides differ in shape".into()));
    }
    let logits = tape.matmul_nt(left, right)?;
    let logits = tape.div_scalar(logits, tau)?;
    tape.cross_entropy(logits, (0..n).collect())
}

/// Symmetric contrastive loss between two views, each direction querying
/// with the online features of one view against the momentum features of
/// the other.
pub fn ctr(tape: &mut Tape, online_a: Var, momentum_b: Var, online_b: Var, momentum_a: Var, tau: Var) -> Result<Var> {
    let ab = info_nce(tape, online_a, momentum_b, tau)?;
    let ba = info_nce(tape, online_b, momentum_a, tau)?;
    let s = tape.add(ab, ba)?;
    tape.scale(s, 0.5)
}

/// Average of two unit-norm feature batches, re-normalised.
pub fn mix(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let s = tape.add(a, b)?;
    let s = tape.scale(s, 0.5)?;
    tape.l2_normalize(s)
}

/// Online and momentum features per stream, all `[N × proj_dim]`.
#[derive(Clone, Debug, Default)]
pub struct ContrastiveBatch {
    pub online: HashMap<StreamKey, Var>,
    pub momentum: HashMap<StreamKey, Var>,
    pub tau: Option<Var>,
}

impl ContrastiveBatch {
    fn get(&self, key: StreamKey) -> Result<(Var, Var)> {
        let on = self.online.get(&key).ok_or_else(|| Error::Contract(format!("missing online stream {key}")))?;
        let mo = self.momentum.get(&key).ok_or_else(|| Error::Contract(format!("missing momentum stream {key}")))?;
        Ok((*on, *mo))
    }

    fn tau(&self) -> Result<Var> {
        self.tau.ok_or_else(|| Error::Contract("contrastive batch without temperature".into()))
    }

    fn mixed(&self, tape: &mut Tape, a: StreamKey, b: StreamKey) -> Result<(Var, Var)> {
        if let Some(k) = StreamKey::mix_of(a, b).filter(|k| self.online.contains_key(k)) {
            return self.get(k);
        }
        let (oa, ma) = self.get(a)?;
        let (ob, mb) = self.get(b)?;
        Ok((mix(tape, oa, ob)?, mix(tape, ma, mb)?))
    }
}

pub fn itc_loss(tape: &mut Tape, b: &ContrastiveBatch) -> Result<Var> {
    let (oi, mi) = b.get(StreamKey::Image)?;
    let (ot, mt) = b.get(StreamKey::Text)?;
    ctr(tape, oi, mt, ot, mi, b.tau()?)
}

pub fn xmc_loss(tape: &mut Tape, b: &ContrastiveBatch) -> Result<Var> {
    let (o, m) = b.mixed(tape, StreamKey::Image, StreamKey::Text)?;
    ctr(tape, o, m, o, m, b.tau()?)
}

pub fn cic_loss(tape: &mut Tape, b: &ContrastiveBatch) -> Result<Var> {
    let (oc, mc) = b.mixed(tape, StreamKey::ImageGivenText, StreamKey::TextGivenImage)?;
    let (os, ms) = b.mixed(tape, StreamKey::Image, StreamKey::Text)?;
    ctr(tape, oc, ms, os, mc, b.tau()?)
}

pub fn cmc_loss(tape: &mut Tape, b: &ContrastiveBatch) -> Result<Var> {
    let (oj, mj) = b.get(StreamKey::Mixture)?;
    let (os, ms) = b.mixed(tape, StreamKey::Image, StreamKey::Text)?;
    ctr(tape, oj, ms, os, mj, b.tau()?)
}

/// Replaces each non-padding symbol by `MASK` with probability `ratio`.
/// Returns the masked sequence and the masked positions.
pub fn mask_text(symbols: &[u32], ratio: f64, rng: &mut ChaCha8Rng) -> (Vec<u32>, Vec<usize>) {
    let mut out = symbols.to_vec();
    let mut positions = Vec::new();
    for (i, s) in out.iter_mut().enumerate() {
        if *s != PAD && ratio > 0.0 && rng.gen_bool(ratio) {
            *s = MASK;
            positions.push(i);
        }
    }
    (out, positions)
}

/// Bernoulli patch mask.
pub fn mask_image(n: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    (0..n).map(|_| ratio > 0.0 && rng.gen_bool(ratio)).collect()
}

/// Per-patch standardisation used as the reconstruction target.
pub fn standardize_patch(p: &[f32]) -> Vec<f32> {
    let n = p.len().max(1) as f32;
    let mean = p.iter().sum::<f32>() / n;
    let var = p.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / n;
    let inv = 1.0 / (var + 1e-6).sqrt();
    p.iter().map(|v| (v - mean) * inv).collect()
}

/// One aligned image-text pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub scene_id: u64,
    pub image: ImageTokens,
    pub text: TextTokens,
}

/// Clean and masked inputs for one optimisation step.
#[derive(Clone, Debug)]
pub struct StepInputs {
    pub clean_images: Vec<ModalitySample>,
    pub clean_texts: Vec<ModalitySample>,
    pub clean_mixtures: Vec<ModalitySample>,
    pub masked_images: Vec<ModalitySample>,
    pub masked_texts: Vec<ModalitySample>,
    pub masked_mixtures: Vec<ModalitySample>,
    /// Masked text positions and original symbols, per sample.
    pub text_targets: Vec<Vec<(usize, u32)>>,
    /// Masked patch positions and standardised targets, per sample.
    pub patch_targets: Vec<Vec<(usize, Vec<f32>)>>,
    pub mim_ratio: f64,
}

impl StepInputs {
    pub fn len(&self) -> usize {
        self.clean_images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean_images.is_empty()
    }

    /// True when no clean (momentum-side) input carries a mask.
    pub fn clean_inputs_unmasked(&self) -> bool {
        let all = self.clean_images.iter().chain(&self.clean_texts).chain(&self.clean_mixtures);
        all.into_iter().all(|s| s.text.as_ref().is_none_or(|t| !t.symbols.contains(&MASK)) && s.image.as_ref().is_none_or(|i| i.masked.iter().all(|&m| !m)))
    }
}

/// Builds clean and masked streams. Masking draws from a generator keyed by
/// `(seed, step)`.
pub fn prepare_step(pairs: &[Pair], cfg: &ObjectiveConfig, seed: u64, step: usize, total_steps: usize) -> StepInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_736b);
    rng.set_stream(step as u64);
    let mim_ratio = cfg.mim_ratio(step, total_steps);
    let mlm_ratio = if cfg.mlm { cfg.mlm_ratio } else { 0.0 };
    let patch_ratio = if cfg.mim { mim_ratio } else { 0.0 };
    let mut s = StepInputs {
        clean_images: Vec::new(),
        clean_texts: Vec::new(),
        clean_mixtures: Vec::new(),
        masked_images: Vec::new(),
        masked_texts: Vec::new(),
        masked_mixtures: Vec::new(),
        text_targets: Vec::new(),
        patch_targets: Vec::new(),
        mim_ratio,
    };
    for p in pairs {
        let id = p.scene_id;
        s.clean_images.push(ModalitySample::image(id, p.image.clone()));
        s.clean_texts.push(ModalitySample::text(id, p.text.clone()));
        s.clean_mixtures.push(ModalitySample::mixture(id, p.image.clone(), p.text.clone()));

        let (symbols, tpos) = mask_text(&p.text.symbols, mlm_ratio, &mut rng);
        let text = TextTokens { symbols, positions: p.text.positions.clone() };
        let mut image = p.image.clone();
        image.masked = mask_image(image.len(), patch_ratio, &mut rng);
        s.text_targets.push(tpos.iter().map(|&i| (i, p.text.symbols[i])).collect());
        s.patch_targets.push(image.masked.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| (i, standardize_patch(image.patches.row(i)))).collect());
        s.masked_images.push(ModalitySample::image(id, image.clone()));
        s.masked_texts.push(ModalitySample::text(id, text.clone()));
        s.masked_mixtures.push(ModalitySample::mixture(id, image, text));
    }
    s
}

fn refs(v: &[ModalitySample]) -> Vec<&ModalitySample> {
    v.iter().collect()
}

/// Encoded streams for either branch.
struct Streams {
    encoded: HashMap<StreamKey, Encoded>,
}

fn encode_streams(
    tape: &mut Tape,
    bound: &Bound<'_>,
    images: &[ModalitySample],
    texts: &[ModalitySample],
    mixtures: &[ModalitySample],
    keys: &[StreamKey],
    with_mixture: bool,
) -> Result<Streams> {
    let ei = bound.embed(tape, &refs(images))?;
    let et = bound.embed(tape, &refs(texts))?;
    let ii = bound.run(tape, &ei, None)?;
    let tt = bound.run(tape, &et, None)?;
    let mut encoded = HashMap::new();
    if keys.contains(&StreamKey::ImageGivenText) {
        encoded.insert(StreamKey::ImageGivenText, bound.run(tape, &ei, Some(&tt))?);
    }
    if keys.contains(&StreamKey::TextGivenImage) {
        encoded.insert(StreamKey::TextGivenImage, bound.run(tape, &et, Some(&ii))?);
    }
    if keys.contains(&StreamKey::Mixture) || with_mixture {
        let em = bound.embed(tape, &refs(mixtures))?;
        encoded.insert(StreamKey::Mixture, bound.run(tape, &em, None)?);
    }
    encoded.insert(StreamKey::Image, ii);
    encoded.insert(StreamKey::Text, tt);
    Ok(Streams { encoded })
}

/// Momentum-branch projected features on clean inputs, as plain tensors.
pub fn momentum_features(momentum: &Weights, inputs: &StepInputs, keys: &[StreamKey]) -> Result<HashMap<StreamKey, Tensor>> {
    if !inputs.clean_inputs_unmasked() {
        return Err(Error::Contract("momentum branch received masked inputs".into()));
    }
    let mut tape = Tape::new();
    let bound = momentum.bind(&mut tape, false);
    let s = encode_streams(&mut tape, &bound, &inputs.clean_images, &inputs.clean_texts, &inputs.clean_mixtures, keys, false)?;
    let pooled = pooled_features(&mut tape, &bound, &s, keys)?;
    let mut out = HashMap::new();
    for &k in keys {
        let z = bound.project(&mut tape, pooled[&k])?;
        out.insert(k, tape.value(z).clone());
    }
    Ok(out)
}

/// Pooled state per key; mix keys average their two parts.
fn pooled_features(tape: &mut Tape, bound: &Bound<'_>, s: &Streams, keys: &[StreamKey]) -> Result<HashMap<StreamKey, Var>> {
    let mut pooled = HashMap::new();
    for (&k, enc) in &s.encoded {
        pooled.insert(k, bound.pool(tape, enc)?);
    }
    for &k in keys {
        if let Some((a, b)) = k.parts() {
            let missing = || Error::Contract(format!("mix {k} needs encoded streams {a} and {b}"));
            let (pa, pb) = (*pooled.get(&a).ok_or_else(missing)?, *pooled.get(&b).ok_or_else(missing)?);
            let sum = tape.add(pa, pb)?;
            pooled.insert(k, tape.scale(sum, 0.5)?);
        }
    }
    Ok(pooled)
}

/// Scalar loss values of one step. Inactive terms are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub itc: f32,
    pub xmc: Option<f32>,
    pub cic: Option<f32>,
    pub cmc: Option<f32>,
    pub mlm: Option<f32>,
    pub mim: Option<f32>,
    /// `|½(xmc + cic) − cmc|` when all three were evaluated.
    pub cmc_equiv_gap: Option<f32>,
    /// XMC, CIC, CMC evaluated for the diagnostic even when inactive.
    pub diag_xmc: Option<f32>,
    pub diag_cic: Option<f32>,
    pub diag_cmc: Option<f32>,
    pub total: f32,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [Some(self.itc), self.xmc, self.cic, self.cmc, self.mlm, self.mim, Some(self.total)].iter().flatten().all(|v| v.is_finite())
    }
}

/// Loss graph of one step.
pub struct StepGraph {
    pub loss: Var,
    pub bundle: LossBundle,
}

fn masked_modeling_losses(tape: &mut Tape, bound: &Bound<'_>, s: &Streams, inputs: &StepInputs, cfg: &ObjectiveConfig) -> Result<(Option<Var>, Option<Var>)> {
    let mut text_streams = vec![&s.encoded[&StreamKey::Text]];
    let mut image_streams = vec![&s.encoded[&StreamKey::Image]];
    if let Some(m) = s.encoded.get(&StreamKey::Mixture) {
        text_streams.push(m);
        image_streams.push(m);
    }
    let mlm = if cfg.mlm {
        let targets: Vec<usize> = text_streams.iter().flat_map(|_| inputs.text_targets.iter().flatten().map(|&(_, sym)| sym as usize)).collect();
        Some(if targets.is_empty() {
            log::warn!("no maskable text tokens in batch; masked language loss is 0");
            tape.constant(Tensor::scalar(0.0))
        } else {
            let parts: Vec<Var> = text_streams.iter().map(|e| e.hidden).collect();
            let picked = gather_from(tape, &parts, &text_streams, &inputs.text_targets, |r| r.text.start)?;
            let logits = bound.mlm_logits(tape, picked)?;
            tape.cross_entropy(logits, targets)?
        })
    } else {
        None
    };
    let mim = if cfg.mim {
        let mut target = Vec::new();
        for _ in &image_streams {
            for t in &inputs.patch_targets {
                for (_, v) in t {
                    target.extend_from_slice(v);
                }
            }
        }
        Some(if target.is_empty() {
            log::warn!("no masked patches in batch; masked image loss is 0");
            tape.constant(Tensor::scalar(0.0))
        } else {
            let parts: Vec<Var> = image_streams.iter().map(|e| e.hidden).collect();
            let positions: Vec<Vec<(usize, u32)>> = inputs.patch_targets.iter().map(|t| t.iter().map(|(i, _)| (*i, 0)).collect()).collect();
            let picked = gather_from(tape, &parts, &image_streams, &positions, |r| r.image.start)?;
            let recon = bound.mim_reconstruction(tape, picked)?;
            let pd = bound.config().patch_dim;
            let n = target.len() / pd;
            tape.mse(recon, Tensor::new(vec![n, pd], target)?)?
        })
    } else {
        None
    };
    Ok((mlm, mim))
}

fn gather_from(
    tape: &mut Tape,
    hidden: &[Var],
    streams: &[&Encoded],
    positions: &[Vec<(usize, u32)>],
    base: impl Fn(&crate::encoder::SampleRows) -> usize,
) -> Result<Var> {
    let mut index = Vec::new();
    for (si, enc) in streams.iter().enumerate() {
        for (r, t) in enc.rows.iter().zip(positions) {
            for &(pos, _) in t {
                index.push((si, base(r) + pos));
            }
        }
    }
    tape.gather(hidden, index)
}

/// Builds the full loss graph for one step: contrastive terms per ablation
/// plus masked modeling, all on a single online forward pass.
pub fn total_loss(
    tape: &mut Tape,
    online: &Bound<'_>,
    momentum: &HashMap<StreamKey, Tensor>,
    inputs: &StepInputs,
    tau: Var,
    cfg: &ObjectiveConfig,
    diagnostics: bool,
) -> Result<StepGraph> {
    if inputs.len() < 2 {
        return Err(Error::Contract("a step needs at least 2 pairs for negatives".into()));
    }
    let keys = cfg.streams(diagnostics);
    let s = encode_streams(tape, online, &inputs.masked_images, &inputs.masked_texts, &inputs.masked_mixtures, &keys, cfg.masked_modeling())?;
    let mut batch = ContrastiveBatch { tau: Some(tau), ..Default::default() };
    let pooled = pooled_features(tape, online, &s, &keys)?;
    for &k in &keys {
        let z = online.project(tape, pooled[&k])?;
        let q = online.predict(tape, z)?;
        batch.online.insert(k, q);
        let m = momentum.get(&k).ok_or_else(|| Error::Contract(format!("missing momentum stream {k}")))?;
        batch.momentum.insert(k, tape.constant(m.clone()));
    }

    let w = &cfg.weights;
    let a = cfg.ablation;
    let mut bundle = LossBundle::default();
    let itc = itc_loss(tape, &batch)?;
    bundle.itc = tape.value(itc).item()?;
    let mut total = tape.scale(itc, w.itc)?;
    let mut add = |tape: &mut Tape, v: Var, weight: f32| -> Result<f32> {
        let s = tape.scale(v, weight)?;
        total = tape.add(total, s)?;
        tape.value(v).item()
    };
    let xmc = if a.xmc() || diagnostics { Some(xmc_loss(tape, &batch)?) } else { None };
    let cic = if a.cic() || diagnostics { Some(cic_loss(tape, &batch)?) } else { None };
    let cmc = if a.cmc() || diagnostics { Some(cmc_loss(tape, &batch)?) } else { None };
    if let (true, Some(v)) = (a.xmc(), xmc) {
        bundle.xmc = Some(add(tape, v, w.xmc)?);
    }
    if let (true, Some(v)) = (a.cic(), cic) {
        bundle.cic = Some(add(tape, v, w.cic)?);
    }
    if let (true, Some(v)) = (a.cmc(), cmc) {
        bundle.cmc = Some(add(tape, v, w.cmc)?);
    }
    let (mlm, mim) = masked_modeling_losses(tape, online, &s, inputs, cfg)?;
    if let Some(v) = mlm {
        bundle.mlm = Some(add(tape, v, w.mlm)?);
    }
    if let Some(v) = mim {
        bundle.mim = Some(add(tape, v, w.mim)?);
    }
    if diagnostics {
        let val = |v: Option<Var>| v.map(|v| tape.value(v).item()).transpose();
        let (x, c, m) = (val(xmc)?, val(cic)?, val(cmc)?);
        bundle.diag_xmc = x;
        bundle.diag_cic = c;
        bundle.diag_cmc = m;
        if let (Some(x), Some(c), Some(m)) = (x, c, m) {
            bundle.cmc_equiv_gap = Some((0.5 * (x + c) - m).abs());
        }
    }
    bundle.total = tape.value(total).item()?;
    Ok(StepGraph { loss: total, bundle })
}

/// Streams the momentum branch must encode for a step.
pub fn momentum_streams(cfg: &ObjectiveConfig, diagnostics: bool) -> Vec<StreamKey> {
    cfg.streams(diagnostics)
}

/// `p_m ← m·p_m + (1 − m)·p_o` for every parameter.
pub fn ema_update(online: &ParamSet, momentum: &mut ParamSet, m: f32) -> Result<()> {
    if !online.same_inventory(momentum) {
        return Err(Error::Contract("online and momentum parameter inventories differ".into()));
    }
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Contract(format!("momentum coefficient {m} outside [0, 1]")));
    }
    // interpolate from the nearer end so rounding scales with the remaining gap
    let w = 1.0 - m;
    for (pm, po) in momentum.tensors_mut().iter_mut().zip(online.tensors()) {
        for (a, &b) in pm.data_mut().iter_mut().zip(po.data()) {
            *a = if w < 0.5 { *a + w * (b - *a) } else { b - (b - *a) * m };
        }
    }
    Ok(())
}

/// One line of the per-step metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub itc: f32,
    pub xmc: Option<f32>,
    pub cic: Option<f32>,
    pub cmc: Option<f32>,
    pub mlm: Option<f32>,
    pub mim: Option<f32>,
    pub cmc_equiv_gap: Option<f32>,
    pub diag_xmc: Option<f32>,
    pub diag_cic: Option<f32>,
    pub diag_cmc: Option<f32>,
    pub total: f32,
    pub tau: f32,
    pub lr: f64,
    pub mim_ratio: f64,
}

impl MetricsRecord {
    pub fn new(step: usize, b: &LossBundle, tau: f32, lr: f64, mim_ratio: f64) -> Self {
        Self {
            step,
            itc: b.itc,
            xmc: b.xmc,
            cic: b.cic,
            cmc: b.cmc,
            mlm: b.mlm,
            mim: b.mim,
            cmc_equiv_gap: b.cmc_equiv_gap,
            diag_xmc: b.diag_xmc,
            diag_cic: b.diag_cic,
            diag_cmc: b.diag_cmc,
            total: b.total,
            tau,
            lr,
            mim_ratio,
        }
    }
}
