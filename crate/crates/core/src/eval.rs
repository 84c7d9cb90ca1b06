//! Retrieval, modality gap, localization, bootstrapped re-ranking and the
//! equivalence-gap series.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{self, ModalitySample, TextTokens, Weights};
use crate::error::{Error, Result};
use crate::objectives::MetricsRecord;
use crate::synth::{label_prompt, Label, PromptTemplate, SceneRecord, SynthConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    TextToImage,
    ImageToText,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub n: usize,
    /// `(k, recall@k)` pairs.
    pub recall: Vec<(usize, f64)>,
}

impl RetrievalReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }
}

/// Queries are the rows of `queries`; row `i` of `gallery` is the positive.
/// The rank of the positive counts strictly better gallery items plus equal
/// ones at a lower index.
pub fn retrieval_recall(queries: &Tensor, gallery: &Tensor, ks: &[usize], direction: Direction) -> Result<RetrievalReport> {
    let n = queries.rows();
    if n == 0 || gallery.rows() != n || gallery.cols() != queries.cols() {
        return Err(Error::Contract(format!("retrieval needs matching non-empty sets, got {n} and {}", gallery.rows())));
    }
    let sims = queries.matmul_nt(gallery)?;
    let ranks: Vec<usize> = (0..n)
        .map(|i| {
            let row = sims.row(i);
            let s = row[i];
            row.iter().enumerate().filter(|&(j, &v)| v > s || (v == s && j < i)).count()
        })
        .collect();
    let recall = ks.iter().map(|&k| (k, ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64)).collect();
    Ok(RetrievalReport { direction, n, recall })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub centroid_distance: f64,
    pub pair_alignment: f64,
    /// Held-out accuracy of a nearest-centroid modality classifier.
    pub modality_separability: f64,
}

fn centroid(t: &Tensor, rows: impl Iterator<Item = usize>) -> Vec<f64> {
    let mut c = vec![0.0; t.cols()];
    let mut n = 0.0;
    for r in rows {
        for (a, &b) in c.iter_mut().zip(t.row(r)) {
            *a += b as f64;
        }
        n += 1.0;
    }
    c.iter_mut().for_each(|v| *v /= n);
    c
}

fn dist2(a: &[f32], c: &[f64]) -> f64 {
    a.iter().zip(c).map(|(&x, y)| (x as f64 - y).powi(2)).sum()
}

/// Gap statistics on row-normalised image and text features. Separability
/// uses two folds (even/odd rows): centroids from one fold classify the
/// other; equidistant points score one half.
pub fn modality_gap(image: &Tensor, text: &Tensor) -> Result<GapReport> {
    let n = image.rows();
    if n < 2 || text.rows() != n || text.cols() != image.cols() {
        return Err(Error::Contract("modality gap needs at least 2 paired rows per modality".into()));
    }
    let (img, txt) = (image.l2_normalize_rows(), text.l2_normalize_rows());
    let ci = centroid(&img, 0..n);
    let ct = centroid(&txt, 0..n);
    let centroid_distance = ci.iter().zip(&ct).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let pair_alignment = (0..n).map(|i| img.row(i).iter().zip(txt.row(i)).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>()).sum::<f64>() / n as f64;
    let mut correct = 0.0;
    let mut total = 0.0;
    for fold in 0..2 {
        let train = |t: &Tensor| centroid(t, (0..n).filter(move |i| i % 2 != fold));
        let (fi, ft) = (train(&img), train(&txt));
        for i in (0..n).filter(|i| i % 2 == fold) {
            for (t, is_img) in [(&img, true), (&txt, false)] {
                let (di, dt) = (dist2(t.row(i), &fi), dist2(t.row(i), &ft));
                correct += match di.partial_cmp(&dt) {
                    Some(std::cmp::Ordering::Less) => f64::from(u8::from(is_img)),
                    Some(std::cmp::Ordering::Greater) => f64::from(u8::from(!is_img)),
                    _ => 0.5,
                };
                total += 1.0;
            }
        }
    }
    Ok(GapReport { centroid_distance, pair_alignment, modality_separability: correct / total })
}

/// Area under the ROC curve (Mann-Whitney, ties count one half). `None` when
/// one class is empty.
pub fn auc(scores: &[f32], positive: &[bool]) -> Option<f64> {
    let pos: Vec<f32> = scores.iter().zip(positive).filter(|(_, &p)| p).map(|(&s, _)| s).collect();
    let neg: Vec<f32> = scores.iter().zip(positive).filter(|(_, &p)| !p).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &q in &neg {
            wins += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneLocalization {
    pub scene: u64,
    pub label: Label,
    pub auc: f64,
    /// Mean object similarity minus mean background similarity.
    pub margin: f64,
    /// IoU of the top-k cells (k = true object cells) with the mask.
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub scenes: Vec<SceneLocalization>,
    pub mean_auc: f64,
    pub mean_margin: f64,
    pub mean_iou: f64,
    /// Prompts whose mask covered all or none of the grid.
    pub skipped: usize,
}

fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f32>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f32>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Which per-token vectors localization compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenFeatures {
    /// Final encoder hidden states.
    #[default]
    Hidden,
    /// Hidden states passed through the projector token by token; the
    /// prompt vector is the projected pooled prompt.
    Projected,
}

fn patch_vectors(weights: &Weights, h: &Tensor, features: TokenFeatures) -> Result<Tensor> {
    let patches = h.select_rows(&(1..h.rows()).collect::<Vec<_>>())?;
    match features {
        TokenFeatures::Hidden => Ok(patches),
        TokenFeatures::Projected => encoder::project_batch(weights, &patches),
    }
}

fn prompt_vector(weights: &Weights, h: &Tensor, features: TokenFeatures) -> Result<Vec<f32>> {
    let pooled = content_mean(h);
    match features {
        TokenFeatures::Hidden => Ok(pooled),
        TokenFeatures::Projected => {
            let t = Tensor::new(vec![1, pooled.len()], pooled)?;
            Ok(encoder::project_batch(weights, &t)?.into_data())
        }
    }
}

/// Mean of the non-class rows of a hidden-state sequence.
fn content_mean(h: &Tensor) -> Vec<f32> {
    let rows: Vec<usize> = if h.rows() > 1 { (1..h.rows()).collect() } else { vec![0] };
    h.select_rows(&rows).map(|t| t.mean_rows().into_data()).unwrap_or_default()
}

/// Patch-to-prompt cosine similarities for each image-visible label of each
/// scene, scored against that label's cells.
pub fn localization_score(
    weights: &Weights,
    records: &[SceneRecord],
    data: &SynthConfig,
    template: PromptTemplate,
    features: TokenFeatures,
) -> Result<LocalizationReport> {
    let labels = Label::all(data);
    let prompts: Vec<ModalitySample> = labels.iter().map(|&l| ModalitySample::text(0, TextTokens::new(label_prompt(data, l, template)))).collect();
    let prompt_refs: Vec<&ModalitySample> = prompts.iter().collect();
    let prompt_vecs: Vec<Vec<f32>> =
        encoder::encode_tokens_batch(weights, &prompt_refs)?.iter().map(|h| prompt_vector(weights, h, features)).collect::<Result<_>>()?;
    let images: Vec<ModalitySample> = records.iter().map(SceneRecord::image_sample).collect::<Result<_>>()?;
    let image_refs: Vec<&ModalitySample> = images.iter().collect();
    let hidden = encoder::encode_tokens_batch(weights, &image_refs)?;
    let mut scenes = Vec::new();
    let mut skipped = 0;
    for (rec, h) in records.iter().zip(&hidden) {
        let patches = patch_vectors(weights, h, features)?;
        let mut seen = Vec::new();
        for obj in rec.scene.objects.iter().filter(|o| o.visibility != crate::synth::Visibility::TextOnly) {
            let label = obj.label();
            if seen.contains(&label) {
                continue;
            }
            seen.push(label);
            let mask = rec.label_mask(label);
            let prompt = &prompt_vecs[label.index(data)];
            let sims: Vec<f32> = (0..mask.len()).map(|i| cosine(patches.row(i), prompt)).collect();
            let Some(a) = auc(&sims, &mask) else {
                skipped += 1;
                continue;
            };
            let mean_of = |want: bool| {
                let v: Vec<f64> = sims.iter().zip(&mask).filter(|(_, &m)| m == want).map(|(&s, _)| s as f64).collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            let k = mask.iter().filter(|&&m| m).count();
            let mut order: Vec<usize> = (0..sims.len()).collect();
            order.sort_by(|&i, &j| sims[j].total_cmp(&sims[i]).then(i.cmp(&j)));
            let hits = order[..k].iter().filter(|&&i| mask[i]).count();
            scenes.push(SceneLocalization {
                scene: rec.index,
                label,
                auc: a,
                margin: mean_of(true) - mean_of(false),
                iou: hits as f64 / (2 * k - hits) as f64,
            });
        }
    }
    let mean = |f: fn(&SceneLocalization) -> f64| {
        if scenes.is_empty() {
            f64::NAN
        } else {
            scenes.iter().map(f).sum::<f64>() / scenes.len() as f64
        }
    };
    Ok(LocalizationReport { mean_auc: mean(|s| s.auc), mean_margin: mean(|s| s.margin), mean_iou: mean(|s| s.iou), scenes, skipped })
}

/// Writes similarities on a `g×g` grid as an 8-bit binary PGM, min-max scaled.
pub fn write_pgm(path: &Path, values: &[f32], grid: usize) -> Result<()> {
    if values.len() != grid * grid {
        return Err(Error::Input(format!("{} values for a {grid}x{grid} map", values.len())));
    }
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{grid} {grid}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|&v| ((v - lo) / span * 255.0).round() as u8));
    fs::write(path, bytes)?;
    Ok(())
}

/// Patch-prompt similarity map of one scene and label.
pub fn similarity_map(
    weights: &Weights,
    record: &SceneRecord,
    data: &SynthConfig,
    label: Label,
    template: PromptTemplate,
    features: TokenFeatures,
) -> Result<Vec<f32>> {
    let prompt = ModalitySample::text(0, TextTokens::new(label_prompt(data, label, template)));
    let p = prompt_vector(weights, &encoder::encode_tokens(weights, &prompt)?, features)?;
    let patches = patch_vectors(weights, &encoder::encode_tokens(weights, &record.image_sample()?)?, features)?;
    Ok((0..patches.rows()).map(|i| cosine(patches.row(i), &p)).collect())
}

/// Re-orders the first `top_k` stage-1 candidates by their stage-2 score
/// (stable, so equal scores keep stage-1 order); the rest keep stage-1 order.
pub fn rerank_order(stage1: &[f32], top_k: usize, mut stage2: impl FnMut(&[usize]) -> Result<Vec<f32>>) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..stage1.len()).collect();
    order.sort_by(|&i, &j| stage1[j].total_cmp(&stage1[i]));
    let k = if top_k > stage1.len() {
        log::warn!("top_k {top_k} exceeds {} candidates; clamped", stage1.len());
        stage1.len()
    } else {
        top_k
    };
    if k <= 1 {
        return Ok(order);
    }
    let scores = stage2(&order[..k])?;
    if scores.len() != k {
        return Err(Error::Contract("stage-2 scorer returned the wrong number of scores".into()));
    }
    let mut head: Vec<(usize, f32)> = order[..k].iter().copied().zip(scores).collect();
    head.sort_by(|a, b| b.1.total_cmp(&a.1));
    for (slot, (c, _)) in order.iter_mut().zip(head) {
        *slot = c;
    }
    Ok(order)
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Stage 1 ranks candidate texts by `proj(F(I))·proj(F(T_c))`; stage 2 scores
/// each top-k candidate by `proj(F(cat(I, T_c)))·proj(F(T_c))`.
pub fn bootstrap_rerank(weights: &Weights, image: &ModalitySample, candidates: &[Vec<u32>], top_k: usize) -> Result<Vec<usize>> {
    let texts: Vec<ModalitySample> = candidates.iter().map(|c| ModalitySample::text(0, TextTokens::new(c.clone()))).collect();
    let text_feats = projected(weights, &texts.iter().collect::<Vec<_>>())?;
    let img_feat = projected(weights, &[image])?;
    rerank_with_features(weights, image, candidates, &text_feats, img_feat.row(0), top_k)
}

fn rerank_with_features(
    weights: &Weights,
    image: &ModalitySample,
    candidates: &[Vec<u32>],
    text_feats: &Tensor,
    img_feat: &[f32],
    top_k: usize,
) -> Result<Vec<usize>> {
    let stage1: Vec<f32> = (0..candidates.len()).map(|c| dot(img_feat, text_feats.row(c))).collect();
    let img = image.image.clone().ok_or_else(|| Error::Input("re-ranking needs an image sample".into()))?;
    rerank_order(&stage1, top_k, |top| {
        let mixes: Vec<ModalitySample> =
            top.iter().map(|&c| ModalitySample::mixture(image.scene_id, img.clone(), TextTokens::new(candidates[c].clone()))).collect();
        let f = projected(weights, &mixes.iter().collect::<Vec<_>>())?;
        Ok(top.iter().enumerate().map(|(r, &c)| dot(f.row(r), text_feats.row(c))).collect())
    })
}

/// Projected (unit-norm) online features of a set of samples.
pub fn projected(weights: &Weights, samples: &[&ModalitySample]) -> Result<Tensor> {
    let pooled = encoder::encode_batch(weights, samples, None)?;
    encoder::project_batch(weights, &pooled)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub scenes: usize,
    pub top_k: usize,
    pub stage1_accuracy: f64,
    pub reranked_accuracy: f64,
    pub delta: f64,
}

/// Shape-color classification on scenes with one image-visible object.
pub fn bootstrap_classification(
    weights: &Weights,
    records: &[SceneRecord],
    data: &SynthConfig,
    top_k: usize,
    template: PromptTemplate,
) -> Result<BootstrapReport> {
    let labels = Label::all(data);
    let candidates: Vec<Vec<u32>> = labels.iter().map(|&l| label_prompt(data, l, template)).collect();
    let texts: Vec<ModalitySample> = candidates.iter().map(|c| ModalitySample::text(0, TextTokens::new(c.clone()))).collect();
    let text_feats = projected(weights, &texts.iter().collect::<Vec<_>>())?;
    let chosen: Vec<(&SceneRecord, usize)> = records
        .iter()
        .filter_map(|r| {
            let vis: Vec<_> = r.scene.objects.iter().filter(|o| o.visibility != crate::synth::Visibility::TextOnly).collect();
            (vis.len() == 1).then(|| (r, vis[0].label().index(data)))
        })
        .collect();
    if chosen.is_empty() {
        return Err(Error::Input("no single-object scenes to classify".into()));
    }
    let images: Vec<ModalitySample> = chosen.iter().map(|(r, _)| r.image_sample()).collect::<Result<_>>()?;
    let img_feats = projected(weights, &images.iter().collect::<Vec<_>>())?;
    let (mut s1, mut s2) = (0usize, 0usize);
    for (i, (img, (_, truth))) in images.iter().zip(&chosen).enumerate() {
        let stage1: Vec<f32> = (0..labels.len()).map(|c| dot(img_feats.row(i), text_feats.row(c))).collect();
        let first = (0..labels.len()).fold(0, |best, c| if stage1[c] > stage1[best] { c } else { best });
        s1 += usize::from(first == *truth);
        let order = rerank_with_features(weights, img, &candidates, &text_feats, img_feats.row(i), top_k)?;
        s2 += usize::from(order[0] == *truth);
    }
    let n = chosen.len() as f64;
    let (a1, a2) = (s1 as f64 / n, s2 as f64 / n);
    Ok(BootstrapReport { scenes: chosen.len(), top_k: top_k.min(labels.len()), stage1_accuracy: a1, reranked_accuracy: a2, delta: a2 - a1 })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

/// Linear-interpolation quantile (type 7) of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Quantiles {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self { min: v[0], q25: quantile(&v, 0.25), median: quantile(&v, 0.5), q75: quantile(&v, 0.75), max: v[v.len() - 1] })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    /// `(step, |½(xmc + cic) − cmc|)`
    pub series: Vec<(usize, f64)>,
    pub gap: Option<Quantiles>,
    pub cmc: Option<Quantiles>,
}

/// Recomputes the gap from the logged XMC, CIC and CMC diagnostics.
pub fn equivalence_series(log: &[MetricsRecord]) -> Result<EquivalenceReport> {
    if log.is_empty() {
        return Ok(EquivalenceReport::default());
    }
    let mut series = Vec::new();
    let mut cmc = Vec::new();
    for r in log {
        match (r.diag_xmc, r.diag_cic, r.diag_cmc) {
            (Some(x), Some(c), Some(m)) => {
                series.push((r.step, (0.5 * (x as f64 + c as f64) - m as f64).abs()));
                cmc.push(m as f64);
            }
            (None, None, None) => {}
            _ => return Err(Error::Contract(format!("step {}: incomplete diagnostic fields", r.step))),
        }
    }
    if series.is_empty() {
        return Err(Error::Contract("metrics log carries no XMC/CIC/CMC diagnostics".into()));
    }
    let gaps: Vec<f64> = series.iter().map(|s| s.1).collect();
    Ok(EquivalenceReport { gap: Quantiles::of(&gaps), cmc: Quantiles::of(&cmc), series })
}

/// Four-term decomposition fitted to a trained encoder.
///
/// The bare-layer identity does not hold through layer norms, MLPs and
/// several blocks, so here the same-stream weights are fitted per scene by
/// bounded least squares and the leftover is reported.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalDecomposition {
    pub scenes: usize,
    /// `‖F(IT|IT) − Σ β_k F_k‖ / ‖F(IT|IT)‖` over scenes.
    pub relative_residual: Quantiles,
    /// Mean of `(β_II, β_IT, β_TT, β_TI)`.
    pub mean_betas: [f64; 4],
    /// Residual when both streams attend uniformly (λ = own share of keys).
    pub uniform_residual: Quantiles,
}

/// Compares the mixture feature with the four context-conditioned features.
pub fn empirical_decomposition(weights: &Weights, records: &[SceneRecord]) -> Result<EmpiricalDecomposition> {
    if records.is_empty() {
        return Err(Error::Input("empirical decomposition needs at least one scene".into()));
    }
    let images: Vec<ModalitySample> = records.iter().map(|r| r.image_sample()).collect::<Result<_>>()?;
    let texts: Vec<ModalitySample> = records.iter().map(|r| r.text_sample()).collect();
    let mixes: Vec<ModalitySample> = records.iter().map(|r| r.mixture_sample()).collect::<Result<_>>()?;
    let (img, txt, mix): (Vec<_>, Vec<_>, Vec<_>) = (images.iter().collect(), texts.iter().collect(), mixes.iter().collect());
    let f_ii = encoder::encode_batch(weights, &img, None)?;
    let f_it = encoder::encode_batch(weights, &img, Some(&txt))?;
    let f_tt = encoder::encode_batch(weights, &txt, None)?;
    let f_ti = encoder::encode_batch(weights, &txt, Some(&img))?;
    let f_mix = encoder::encode_batch(weights, &mix, None)?;

    let mut residuals = Vec::with_capacity(records.len());
    let mut uniform = Vec::with_capacity(records.len());
    let mut betas = [0.0f64; 4];
    for (i, m) in mixes.iter().enumerate() {
        let (lx, ly) = (m.image_len() as f64, m.text_len() as f64);
        let alpha = lx / (lx + ly);
        let row = |t: &Tensor| t.row(i).iter().map(|&v| v as f64).collect::<Vec<f64>>();
        let (ii, it, tt, ti, target) = (row(&f_ii), row(&f_it), row(&f_tt), row(&f_ti), row(&f_mix));
        // target ≈ α(λ ii + (1−λ) it) + (1−α)(μ tt + (1−μ) ti)
        let base: Vec<f64> = (0..target.len()).map(|d| target[d] - alpha * it[d] - (1.0 - alpha) * ti[d]).collect();
        let a: Vec<f64> = (0..target.len()).map(|d| alpha * (ii[d] - it[d])).collect();
        let b: Vec<f64> = (0..target.len()).map(|d| (1.0 - alpha) * (tt[d] - ti[d])).collect();
        let scale = norm2(&target).sqrt().max(f64::MIN_POSITIVE);
        let (lambda, mu, sq) = fit_mixing(&base, &a, &b);
        residuals.push(sq.sqrt() / scale);
        let (ul, um) = (alpha, 1.0 - alpha);
        uniform.push(residual_sq(&base, &a, &b, ul, um).sqrt() / scale);
        let beta = [alpha * lambda, alpha * (1.0 - lambda), (1.0 - alpha) * mu, (1.0 - alpha) * (1.0 - mu)];
        for (acc, v) in betas.iter_mut().zip(beta) {
            *acc += v;
        }
    }
    let n = records.len() as f64;
    Ok(EmpiricalDecomposition {
        scenes: records.len(),
        relative_residual: Quantiles::of(&residuals).expect("non-empty"),
        mean_betas: betas.map(|b| b / n),
        uniform_residual: Quantiles::of(&uniform).expect("non-empty"),
    })
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn residual_sq(r: &[f64], a: &[f64], b: &[f64], x: f64, y: f64) -> f64 {
    (0..r.len()).map(|d| (r[d] - x * a[d] - y * b[d]).powi(2)).sum()
}

/// Minimises `‖r − x·a − y·b‖²` over `x, y ∈ [0, 1]`; returns `(x, y, loss)`.
fn fit_mixing(r: &[f64], a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).sum::<f64>();
    let (aa, bb, ab, ra, rb) = (dot(a, a), dot(b, b), dot(a, b), dot(r, a), dot(r, b));
    let clamp = |v: f64| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let mut candidates = Vec::with_capacity(9);
    let det = aa * bb - ab * ab;
    if det > 1e-12 * aa.max(1e-300) * bb.max(1e-300) {
        candidates.push(((ra * bb - rb * ab) / det, (rb * aa - ra * ab) / det));
    }
    // edges of the box: fix one coordinate, solve the other
    for edge in [0.0, 1.0] {
        candidates.push((clamp(if aa > 0.0 { (ra - edge * ab) / aa } else { 0.0 }), edge));
        candidates.push((edge, clamp(if bb > 0.0 { (rb - edge * ab) / bb } else { 0.0 })));
    }
    candidates
        .into_iter()
        .filter(|(x, y)| (0.0..=1.0).contains(x) && (0.0..=1.0).contains(y))
        .map(|(x, y)| (x, y, residual_sq(r, a, b, x, y)))
        .fold((0.0, 0.0, f64::INFINITY), |best, c| if c.2 < best.2 { c } else { best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let normal = rand_distr::StandardNormal;
        Tensor::from_fn(&[n, d], |_| rng.sample::<f64, _>(normal) as f32).l2_normalize_rows()
    }

    #[test]
    fn identical_orthonormal_sets_are_perfect() {
        let e = Tensor::eye(5);
        let r = retrieval_recall(&e, &e, &[1, 5], Direction::TextToImage).unwrap();
        assert_eq!(r.at(1), Some(1.0));
    }

    #[test]
    fn ties_break_toward_lower_index() {
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let r = retrieval_recall(&z, &z, &[1, 2, 3], Direction::ImageToText).unwrap();
        assert!((r.at(1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.at(2).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.at(3), Some(1.0));
    }

    #[test]
    fn random_features_give_chance_recall() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut total = 0.0;
        let trials = 200;
        for _ in 0..trials {
            let a = random_unit(100, 16, &mut rng);
            let b = random_unit(100, 16, &mut rng);
            total += retrieval_recall(&a, &b, &[5], Direction::TextToImage).unwrap().at(5).unwrap();
        }
        // standard error of the mean of 20k Bernoulli(0.05) draws ≈ 0.0015
        assert!((total / trials as f64 - 0.05).abs() < 0.006);
    }

    #[test]
    fn recall_is_monotone_and_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_unit(30, 4, &mut rng);
        let b = a.add(&random_unit(30, 4, &mut rng).scale(0.7)).unwrap().l2_normalize_rows();
        let r = retrieval_recall(&a, &b, &[1, 5, 10], Direction::TextToImage).unwrap();
        assert!(r.recall.windows(2).all(|w| w[0].1 <= w[1].1));
        // rotation by a permutation-with-sign matrix keeps inner products exact
        let rot = Tensor::from_rows(&[vec![0.0, -1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0, 0.0]]).unwrap();
        let r2 = retrieval_recall(&a.matmul(&rot).unwrap(), &b.matmul(&rot).unwrap(), &[1, 5, 10], Direction::TextToImage).unwrap();
        assert_eq!(r, r2);
        assert!(retrieval_recall(&Tensor::zeros(&[0, 4]), &Tensor::zeros(&[0, 4]), &[1], Direction::TextToImage).is_err());
    }

    #[test]
    fn identical_modalities_have_no_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_unit(40, 8, &mut rng);
        let g = modality_gap(&a, &a).unwrap();
        assert!(g.centroid_distance < 1e-9);
        assert!((g.modality_separability - 0.5).abs() < 1e-12);
        assert!((g.pair_alignment - 1.0).abs() < 1e-6);
    }

    #[test]
    fn one_hot_modalities_are_fully_separable() {
        let i = Tensor::from_fn(&[10, 2], |k| if k % 2 == 0 { 1.0 } else { 0.0 });
        let t = Tensor::from_fn(&[10, 2], |k| if k % 2 == 1 { 1.0 } else { 0.0 });
        let g = modality_gap(&i, &t).unwrap();
        assert_eq!(g.modality_separability, 1.0);
        assert_eq!(g.pair_alignment, 0.0);
        assert!((g.centroid_distance - 2f64.sqrt()).abs() < 1e-12);
        assert!(modality_gap(&i.select_rows(&[0]).unwrap(), &t.select_rows(&[0]).unwrap()).is_err());
    }

    #[test]
    fn centroid_distance_ignores_common_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (random_unit(12, 5, &mut rng), random_unit(12, 5, &mut rng));
        let perm: Vec<usize> = (0..12).rev().collect();
        let g1 = modality_gap(&a, &b).unwrap();
        let g2 = modality_gap(&a.select_rows(&perm).unwrap(), &b.select_rows(&perm).unwrap()).unwrap();
        assert!((g1.centroid_distance - g2.centroid_distance).abs() < 1e-12);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[0.9, 0.8, 0.1], &[true, true, false]), Some(1.0));
        assert_eq!(auc(&[0.1, 0.8, 0.9], &[true, true, false]), Some(0.0));
        assert_eq!(auc(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(auc(&[0.5, 0.7], &[true, true]), None);
        let s = [0.3f32, -1.0, 2.0, 0.1, 0.0];
        let m = [true, false, true, false, true];
        let cubed: Vec<f32> = s.iter().map(|v| v.powi(3) + 1.0).collect();
        assert_eq!(auc(&s, &m), auc(&cubed, &m));
    }

    #[test]
    fn random_scores_average_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut total = 0.0;
        for _ in 0..500 {
            let s: Vec<f32> = (0..36).map(|_| rng.gen()).collect();
            let m: Vec<bool> = (0..36).map(|i| i < 5).collect();
            total += auc(&s, &m).unwrap();
        }
        assert!((total / 500.0 - 0.5).abs() < 0.02);
    }

    #[test]
    fn rerank_contracts() {
        let single = rerank_order(&[0.3], 10, |_| unreachable!()).unwrap();
        assert_eq!(single, vec![0]);
        let s1 = [0.1, 0.9, 0.5, 0.7];
        let equal = rerank_order(&s1, 4, |top| Ok(vec![1.0; top.len()])).unwrap();
        assert_eq!(equal, vec![1, 3, 2, 0]);
        let same = rerank_order(&s1, 4, |top| Ok(top.iter().map(|&c| s1[c]).collect())).unwrap();
        assert_eq!(same, equal);
        let flipped = rerank_order(&s1, 2, |top| Ok(top.iter().map(|&c| -s1[c]).collect())).unwrap();
        assert_eq!(flipped, vec![3, 1, 2, 0]);
        let clamped = rerank_order(&s1, 99, |top| Ok(vec![0.0; top.len()])).unwrap();
        assert_eq!(clamped.len(), 4);
    }

    fn rec(step: usize, x: f32, c: f32, m: f32) -> MetricsRecord {
        MetricsRecord {
            step,
            itc: 1.0,
            xmc: None,
            cic: None,
            cmc: Some(m),
            mlm: None,
            mim: None,
            cmc_equiv_gap: Some((0.5 * (x + c) - m).abs()),
            diag_xmc: Some(x),
            diag_cic: Some(c),
            diag_cmc: Some(m),
            total: 1.0,
            tau: 0.07,
            lr: 0.0,
            mim_ratio: 0.1,
        }
    }

    #[test]
    fn equivalence_series_cases() {
        assert_eq!(equivalence_series(&[]).unwrap(), EquivalenceReport::default());
        let exact: Vec<_> = (1..=4).map(|s| rec(s, 2.0, 4.0, 3.0)).collect();
        let r = equivalence_series(&exact).unwrap();
        assert_eq!(r.gap.unwrap().max, 0.0);
        let log: Vec<_> = [0.5, 0.1, 0.9, 0.3, 0.7].iter().enumerate().map(|(i, &g)| rec(i + 1, 1.0, 1.0, 1.0 + g)).collect();
        let q = equivalence_series(&log).unwrap().gap.unwrap();
        // independent recomputation: sorted gaps 0.1 0.3 0.5 0.7 0.9
        assert!((q.median - 0.5).abs() < 1e-6 && (q.q25 - 0.3).abs() < 1e-6 && (q.q75 - 0.7).abs() < 1e-6);
        let mut broken = rec(1, 1.0, 1.0, 1.0);
        broken.diag_cic = None;
        assert!(equivalence_series(&[broken]).is_err());
    }

    #[test]
    fn pgm_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        write_pgm(&p, &[0.0, 1.0, 0.5, 0.25], 2).unwrap();
        let b = fs::read(&p).unwrap();
        assert_eq!(&b[..11], b"P5\n2 2\n255\n");
        assert_eq!(&b[11..], &[0, 255, 128, 64]);
    }

    fn scenes_and_encoder(depth: usize, layer_norm: bool) -> (Vec<SceneRecord>, Weights) {
        let data = SynthConfig { grid_size: 4, max_objects: 2, ..SynthConfig::default() };
        let records = crate::synth::generate_records(&data, 3, 0..12).unwrap();
        let mut train = crate::train::TrainConfig::default();
        train.fit_encoder_to(&data);
        let enc =
            encoder::EncoderConfig { depth, width: 16, heads: 2, mlp_ratio: 2, layer_norm, proj_hidden: 16, proj_dim: 8, pred_hidden: 8, ..train.encoder };
        (records, Weights::init(enc, 4).unwrap())
    }

    #[test]
    fn mixing_fit_recovers_known_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r: Vec<f64> = (0..10).map(|d| 0.3 * a[d] + 0.8 * b[d]).collect();
        let (x, y, loss) = fit_mixing(&r, &a, &b);
        assert!((x - 0.3).abs() < 1e-9 && (y - 0.8).abs() < 1e-9 && loss < 1e-18);
        // optimum outside the box lands on its boundary
        let r: Vec<f64> = (0..10).map(|d| 2.0 * a[d] - 0.5 * b[d]).collect();
        let (x, y, _) = fit_mixing(&r, &a, &b);
        assert!((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y));
        assert!(x == 1.0 || y == 0.0);
    }

    #[test]
    fn embedding_only_encoder_decomposes_exactly() {
        let (records, w) = scenes_and_encoder(0, false);
        let d = empirical_decomposition(&w, &records).unwrap();
        assert_eq!(d.scenes, 12);
        assert!(d.relative_residual.max < 1e-5, "{d:?}");
        assert!((d.mean_betas.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn full_encoder_residual_is_reported() {
        let (records, w) = scenes_and_encoder(2, true);
        let d = empirical_decomposition(&w, &records).unwrap();
        assert!(d.relative_residual.median.is_finite() && d.relative_residual.min >= 0.0);
        assert!(d.relative_residual.max <= d.uniform_residual.max + 1e-9 || d.relative_residual.median <= d.uniform_residual.median + 1e-9);
        assert!((d.mean_betas.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(d.mean_betas.iter().all(|b| (0.0..=1.0).contains(b)));
    }
}
