//! Attention primitives and the exact decomposition of attention over a
//! concatenated key set.
//!
//! For queries from stream X attending to keys/values `cat(X, Y)`, each output
//! row splits into a convex combination of the X-only and Y-only attention
//! outputs, weighted by `λ_X⁽ⁱ⁾`, the softmax mass that row `i` places on X's
//! keys. Average pooling over the joint sequence then expands into four pooled
//! terms `F(X|X)`, `F(X|Y)`, `F(Y|Y)`, `F(Y|X)`.
//!
//! The identity is exact only for a bare attention layer (no residual path,
//! MLP or normalisation), which is what everything in this module evaluates.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// `softmax(Q Kᵀ / √d_k) V`.
pub fn attend<T: Element>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, d_k: usize) -> Result<Tensor<T>> {
    if k.rows() != v.rows() {
        return Err(Error::Dimension(format!("{} keys but {} values", k.rows(), v.rows())));
    }
    if d_k == 0 {
        return Err(Error::Dimension("d_k must be positive".into()));
    }
    let scale = T::from_f64(1.0 / (d_k as f64).sqrt());
    q.matmul_nt(k)?.scale(scale).softmax_rows()?.matmul(v)
}

/// Inputs of one query stream X attending over its own keys and a context Y.
#[derive(Clone, Debug)]
pub struct AttentionInputs<T: Element = f32> {
    pub q_x: Tensor<T>,
    pub k_x: Tensor<T>,
    pub v_x: Tensor<T>,
    pub k_y: Tensor<T>,
    pub v_y: Tensor<T>,
    pub d_k: usize,
}

impl<T: Element> AttentionInputs<T> {
    pub fn validate(&self) -> Result<()> {
        let (lx, ly) = (self.k_x.rows(), self.k_y.rows());
        if self.d_k == 0 {
            return Err(Error::Dimension("d_k must be positive".into()));
        }
        if self.v_x.rows() != lx {
            return Err(Error::Dimension("X stream rows disagree".into()));
        }
        if self.v_y.rows() != ly {
            return Err(Error::Dimension("Y stream rows disagree".into()));
        }
        if lx == 0 || ly == 0 || self.q_x.rows() == 0 {
            return Err(Error::Contract("empty stream".into()));
        }
        let w = self.q_x.cols();
        if self.k_x.cols() != w || self.k_y.cols() != w || self.v_x.cols() != self.v_y.cols() {
            return Err(Error::Dimension("projection widths disagree".into()));
        }
        Ok(())
    }
}

/// Per-query share of softmax mass on X's own keys when attending over
/// `cat(K_X, K_Y)`. Both blocks share one max-shift per row.
pub fn lambda_weights<T: Element>(q_x: &Tensor<T>, k_x: &Tensor<T>, k_y: &Tensor<T>, d_k: usize) -> Result<Vec<T>> {
    let scale = T::from_f64(1.0 / (d_k as f64).sqrt());
    let sx = q_x.matmul_nt(k_x)?.scale(scale);
    let sy = q_x.matmul_nt(k_y)?.scale(scale);
    sx.check_finite("lambda logits")?;
    sy.check_finite("lambda logits")?;
    Ok((0..q_x.rows())
        .map(|i| {
            let (rx, ry) = (sx.row(i), sy.row(i));
            let max = rx.iter().chain(ry).fold(T::neg_infinity(), |m, &v| m.max(v));
            let mx = rx.iter().fold(T::zero(), |s, &v| s + (v - max).exp());
            let my = ry.iter().fold(T::zero(), |s, &v| s + (v - max).exp());
            mx / (mx + my)
        })
        .collect())
}

/// Row-wise `λ ⊙ a + (1 − λ) ⊙ b`.
fn blend_rows<T: Element>(lambda: &[T], a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() || a.rows() != lambda.len() {
        return Err(Error::Dimension("blend shapes".into()));
    }
    let c = a.cols();
    let mut out = a.clone();
    for (i, row) in out.data_mut().chunks_mut(c).enumerate() {
        let l = lambda[i];
        for (o, &bv) in row.iter_mut().zip(b.row(i)) {
            *o = l * *o + (T::one() - l) * bv;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct BlockDecomposition<T: Element = f32> {
    /// `f(X|X)`
    pub self_output: Tensor<T>,
    /// `f(X|Y)`
    pub cross_output: Tensor<T>,
    pub lambda: Vec<T>,
    /// `λ f(X|X) + (I − λ) f(X|Y)`
    pub reconstruction: Tensor<T>,
    /// `f(X|X,Y)`, attention over the concatenated keys.
    pub concat_output: Tensor<T>,
    pub residual: T,
}

pub fn decompose_block<T: Element>(inputs: &AttentionInputs<T>) -> Result<BlockDecomposition<T>> {
    inputs.validate()?;
    let self_output = attend(&inputs.q_x, &inputs.k_x, &inputs.v_x, inputs.d_k)?;
    let cross_output = attend(&inputs.q_x, &inputs.k_y, &inputs.v_y, inputs.d_k)?;
    let lambda = lambda_weights(&inputs.q_x, &inputs.k_x, &inputs.k_y, inputs.d_k)?;
    let reconstruction = blend_rows(&lambda, &self_output, &cross_output)?;
    let k = Tensor::vstack(&[&inputs.k_x, &inputs.k_y])?;
    let v = Tensor::vstack(&[&inputs.v_x, &inputs.v_y])?;
    let concat_output = attend(&inputs.q_x, &k, &v, inputs.d_k)?;
    let residual = concat_output.max_abs_diff(&reconstruction)?;
    Ok(BlockDecomposition { self_output, cross_output, lambda, reconstruction, concat_output, residual })
}

/// Projected queries/keys/values of two token streams for one head.
#[derive(Clone, Debug)]
pub struct StreamProjections<T: Element = f32> {
    pub q_x: Tensor<T>,
    pub k_x: Tensor<T>,
    pub v_x: Tensor<T>,
    pub q_y: Tensor<T>,
    pub k_y: Tensor<T>,
    pub v_y: Tensor<T>,
    pub d_k: usize,
}

/// Single-head projection weights `[d × d_k]`, `[d × d_k]`, `[d × d_v]`.
#[derive(Clone, Debug)]
pub struct ProjectionWeights<T: Element = f32> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
}

impl<T: Element> ProjectionWeights<T> {
    pub fn project(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<StreamProjections<T>> {
        Ok(StreamProjections {
            q_x: x.matmul(&self.wq)?,
            k_x: x.matmul(&self.wk)?,
            v_x: x.matmul(&self.wv)?,
            q_y: y.matmul(&self.wq)?,
            k_y: y.matmul(&self.wk)?,
            v_y: y.matmul(&self.wv)?,
            d_k: self.wq.cols(),
        })
    }
}

/// Everything measured about one pooled concatenated-attention evaluation.
#[derive(Clone, Debug)]
pub struct AttentionTrace<T: Element = f32> {
    pub lambda_x: Vec<T>,
    pub lambda_y: Vec<T>,
    /// `l_X / (l_X + l_Y)`
    pub alpha: T,
    /// Scalar summaries `(αλ̄_X, α(1−λ̄_X), (1−α)λ̄_Y, (1−α)(1−λ̄_Y))`.
    pub betas: [T; 4],
    /// Pooled `F(X|X)`, `F(X|Y)`, `F(Y|Y)`, `F(Y|X)`, each `[1×d_v]`.
    pub terms: [Tensor<T>; 4],
    /// Pooled `F(X,Y|X,Y)`.
    pub concat_output: Tensor<T>,
    /// Four-term expansion pooled from λ-weighted rows.
    pub expansion: Tensor<T>,
    /// Max-abs gap between `concat_output` and `expansion`.
    pub residual: T,
    /// Max-abs gap between `concat_output` and `Σ β_k · terms[k]`; measures
    /// how much the scalar-β summary loses, not an identity.
    pub scalar_residual: T,
}

impl<T: Element> AttentionTrace<T> {
    pub fn beta_sum(&self) -> T {
        self.betas.iter().fold(T::zero(), |s, &b| s + b)
    }

    pub fn beta_deviation(&self) -> T {
        let q = T::from_f64(0.25);
        self.betas.iter().fold(T::zero(), |m, &b| m.max((b - q).abs()))
    }
}

fn mean<T: Element>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |s, &x| s + x) / T::from_f64(v.len() as f64)
}

/// Decomposes mean-pooled attention over `cat(X, Y)` into its four terms.
pub fn decompose_pooled_qkv<T: Element>(p: &StreamProjections<T>) -> Result<AttentionTrace<T>> {
    let (lx, ly) = (p.q_x.rows(), p.q_y.rows());
    if lx == 0 || ly == 0 {
        return Err(Error::Contract("empty sequence in pooled decomposition".into()));
    }
    let xs =
        decompose_block(&AttentionInputs { q_x: p.q_x.clone(), k_x: p.k_x.clone(), v_x: p.v_x.clone(), k_y: p.k_y.clone(), v_y: p.v_y.clone(), d_k: p.d_k })?;
    let ys =
        decompose_block(&AttentionInputs { q_x: p.q_y.clone(), k_x: p.k_y.clone(), v_x: p.v_y.clone(), k_y: p.k_x.clone(), v_y: p.v_x.clone(), d_k: p.d_k })?;

    let q = Tensor::vstack(&[&p.q_x, &p.q_y])?;
    let k = Tensor::vstack(&[&p.k_x, &p.k_y])?;
    let v = Tensor::vstack(&[&p.v_x, &p.v_y])?;
    let concat_output = attend(&q, &k, &v, p.d_k)?.mean_rows();

    let alpha = T::from_f64(lx as f64 / (lx + ly) as f64);
    let one = T::one();
    let expansion = xs.reconstruction.mean_rows().scale(alpha).add(&ys.reconstruction.mean_rows().scale(one - alpha))?;
    let residual = concat_output.max_abs_diff(&expansion)?;

    let (lxm, lym) = (mean(&xs.lambda), mean(&ys.lambda));
    let betas = [alpha * lxm, alpha * (one - lxm), (one - alpha) * lym, (one - alpha) * (one - lym)];
    let terms = [xs.self_output.mean_rows(), xs.cross_output.mean_rows(), ys.self_output.mean_rows(), ys.cross_output.mean_rows()];
    let mut summary = Tensor::zeros(concat_output.shape());
    for (b, t) in betas.iter().zip(&terms) {
        summary = summary.add(&t.scale(*b))?;
    }
    let scalar_residual = concat_output.max_abs_diff(&summary)?;

    Ok(AttentionTrace { lambda_x: xs.lambda, lambda_y: ys.lambda, alpha, betas, terms, concat_output, expansion, residual, scalar_residual })
}

/// Projects token streams with single-head weights, then decomposes.
pub fn decompose_pooled<T: Element>(x_tokens: &Tensor<T>, y_tokens: &Tensor<T>, weights: &ProjectionWeights<T>) -> Result<AttentionTrace<T>> {
    if x_tokens.rows() == 0 || y_tokens.rows() == 0 {
        return Err(Error::Contract("empty sequence in pooled decomposition".into()));
    }
    decompose_pooled_qkv(&weights.project(x_tokens, y_tokens)?)
}

/// Multi-head projection weights `[d × d]` each; head `h` owns column block
/// `h·d/heads .. (h+1)·d/heads`.
#[derive(Clone, Debug)]
pub struct MultiHeadWeights<T: Element = f32> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct MultiHeadTrace<T: Element = f32> {
    pub heads: Vec<AttentionTrace<T>>,
    /// Pooled multi-head output of the concatenated input, computed directly.
    pub concat_output: Tensor<T>,
    /// Per-head expansions concatenated along features.
    pub expansion: Tensor<T>,
    pub residual: T,
}

pub fn decompose_pooled_multihead<T: Element>(x_tokens: &Tensor<T>, y_tokens: &Tensor<T>, weights: &MultiHeadWeights<T>) -> Result<MultiHeadTrace<T>> {
    let d = weights.wq.cols();
    if weights.heads == 0 || !d.is_multiple_of(weights.heads) || !weights.wv.cols().is_multiple_of(weights.heads) {
        return Err(Error::Dimension(format!("width {d} not divisible by {} heads", weights.heads)));
    }
    let (dh, dvh) = (d / weights.heads, weights.wv.cols() / weights.heads);
    let mut traces = Vec::with_capacity(weights.heads);
    for h in 0..weights.heads {
        let w = ProjectionWeights { wq: weights.wq.columns(h * dh, dh)?, wk: weights.wk.columns(h * dh, dh)?, wv: weights.wv.columns(h * dvh, dvh)? };
        traces.push(decompose_pooled(x_tokens, y_tokens, &w)?);
    }

    // Direct route: full projections of the joint sequence, heads sliced last.
    let z = Tensor::vstack(&[x_tokens, y_tokens])?;
    let (q, k, v) = (z.matmul(&weights.wq)?, z.matmul(&weights.wk)?, z.matmul(&weights.wv)?);
    let mut head_outputs = Vec::with_capacity(weights.heads);
    for h in 0..weights.heads {
        head_outputs.push(attend(&q.columns(h * dh, dh)?, &k.columns(h * dh, dh)?, &v.columns(h * dvh, dvh)?, dh)?);
    }
    let refs: Vec<&Tensor<T>> = head_outputs.iter().collect();
    let concat_output = Tensor::hstack(&refs)?.mean_rows();
    let exp_refs: Vec<&Tensor<T>> = traces.iter().map(|t| &t.expansion).collect();
    let expansion = Tensor::hstack(&exp_refs)?;
    let residual = concat_output.max_abs_diff(&expansion)?;
    Ok(MultiHeadTrace { heads: traces, concat_output, expansion, residual })
}

/// How queries and keys are drawn for verification trials.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogitMode {
    /// Standard normal entries in every projection.
    Random,
    /// Zero queries, so every logit is equal; forces `l_Y = l_X`.
    Uniform,
}

#[derive(Clone, Debug)]
pub struct VerifyDims {
    pub min_len: usize,
    pub max_len: usize,
    pub head_dims: Vec<usize>,
    pub value_dim: usize,
}

impl Default for VerifyDims {
    fn default() -> Self {
        Self { min_len: 1, max_len: 32, head_dims: vec![4, 8, 16], value_dim: 8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialRow {
    pub trial: usize,
    pub l_x: usize,
    pub l_y: usize,
    pub d_k: usize,
    pub residual: f64,
    pub betas: [f64; 4],
    pub lambda_mean: f64,
    pub scalar_residual: f64,
}

#[derive(Clone, Debug)]
pub struct VerifyReport {
    pub precision: &'static str,
    pub rows: Vec<TrialRow>,
}

impl VerifyReport {
    pub fn max_residual(&self) -> f64 {
        self.rows.iter().map(|r| r.residual).fold(0.0, f64::max)
    }

    pub fn max_beta_sum_error(&self) -> f64 {
        self.rows.iter().map(|r| (r.betas.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
    }

    pub fn max_beta_deviation(&self) -> f64 {
        self.rows.iter().flat_map(|r| r.betas.iter().map(|b| (b - 0.25).abs())).fold(0.0, f64::max)
    }

    pub fn mean_beta_deviation(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        let total: f64 = self.rows.iter().map(|r| r.betas.iter().map(|b| (b - 0.25).abs()).fold(0.0, f64::max)).sum();
        total / self.rows.len() as f64
    }

    /// `(min, mean, max)` of per-trial mean λ_X.
    pub fn lambda_stats(&self) -> (f64, f64, f64) {
        let vals: Vec<f64> = self.rows.iter().map(|r| r.lambda_mean).collect();
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
        (min, mean, max)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "trial,l_x,l_y,residual,beta1,beta2,beta3,beta4,lambda_mean")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{:e},{},{},{},{},{}", r.trial, r.l_x, r.l_y, r.residual, r.betas[0], r.betas[1], r.betas[2], r.betas[3], r.lambda_mean)?;
        }
        Ok(())
    }
}

fn normal_matrix<T: Element>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<T> {
    Tensor::from_fn(&[rows, cols], |_| {
        let v: f64 = StandardNormal.sample(rng);
        T::from_f64(v)
    })
}

/// Runs `trials` bare-attention decompositions at precision `T`. Trial `i`
/// draws from its own stream of the seeded generator, so rows are
/// reproducible independently of each other.
pub fn verify_decomposition<T: Element>(trials: usize, dims: &VerifyDims, seed: u64, mode: LogitMode) -> Result<VerifyReport> {
    use rand::Rng;
    if trials == 0 {
        return Err(Error::Contract("verification needs at least one trial".into()));
    }
    if dims.min_len == 0 || dims.max_len < dims.min_len || dims.head_dims.is_empty() {
        return Err(Error::Contract(format!("bad verification dims {dims:?}")));
    }
    let mut rows = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64);
        let l_x = rng.gen_range(dims.min_len..=dims.max_len);
        let l_y = match mode {
            LogitMode::Random => rng.gen_range(dims.min_len..=dims.max_len),
            LogitMode::Uniform => l_x,
        };
        let d_k = dims.head_dims[rng.gen_range(0..dims.head_dims.len())];
        let mut p = StreamProjections {
            q_x: normal_matrix::<T>(&mut rng, l_x, d_k),
            k_x: normal_matrix(&mut rng, l_x, d_k),
            v_x: normal_matrix(&mut rng, l_x, dims.value_dim),
            q_y: normal_matrix(&mut rng, l_y, d_k),
            k_y: normal_matrix(&mut rng, l_y, d_k),
            v_y: normal_matrix(&mut rng, l_y, dims.value_dim),
            d_k,
        };
        if mode == LogitMode::Uniform {
            p.q_x = Tensor::zeros(&[l_x, d_k]);
            p.q_y = Tensor::zeros(&[l_y, d_k]);
        }
        let tr = decompose_pooled_qkv(&p)?;
        rows.push(TrialRow {
            trial,
            l_x,
            l_y,
            d_k,
            residual: tr.residual.as_f64(),
            betas: tr.betas.map(|b| b.as_f64()),
            lambda_mean: mean(&tr.lambda_x).as_f64(),
            scalar_residual: tr.scalar_residual.as_f64(),
        });
    }
    Ok(VerifyReport { precision: T::NAME, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        normal_matrix(rng, r, c)
    }

    /// Softmax and weighted sum written out element by element.
    fn reference_attend(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, d_k: usize) -> Tensor<f64> {
        let s = 1.0 / (d_k as f64).sqrt();
        let mut out = vec![0.0; q.rows() * v.cols()];
        for i in 0..q.rows() {
            let logits: Vec<f64> = (0..k.rows()).map(|j| (0..q.cols()).map(|p| q.at(i, p) * k.at(j, p)).sum::<f64>() * s).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..k.rows() {
                for c in 0..v.cols() {
                    out[i * v.cols() + c] += e[j] / z * v.at(j, c);
                }
            }
        }
        Tensor::new(vec![q.rows(), v.cols()], out).unwrap()
    }

    #[test]
    fn zero_queries_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = rand_t(&mut rng, 5, 4);
        let v = rand_t(&mut rng, 5, 3);
        let out = attend(&Tensor::zeros(&[2, 4]), &k, &v, 4).unwrap();
        let mean = v.mean_rows();
        for i in 0..2 {
            for c in 0..3 {
                assert!((out.at(i, c) - mean.at(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_key_broadcasts_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = rand_t(&mut rng, 3, 4);
        let k = rand_t(&mut rng, 1, 4);
        let v = rand_t(&mut rng, 1, 2);
        let out = attend(&q, &k, &v, 4).unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), v.row(0));
        }
    }

    #[test]
    fn attend_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = rand_t(&mut rng, 4, 8);
        let k = rand_t(&mut rng, 6, 8);
        let v = rand_t(&mut rng, 6, 5);
        let got = attend(&q.cast::<f32>(), &k.cast(), &v.cast(), 8).unwrap();
        let want = reference_attend(&q, &k, &v, 8).cast::<f32>();
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-6);
        assert!(attend(&q, &k, &rand_t(&mut rng, 5, 5), 8).is_err());
    }

    #[test]
    fn lambda_uniform_logits_is_length_ratio() {
        let lam = lambda_weights::<f64>(&Tensor::zeros(&[4, 3]), &Tensor::full(&[2, 3], 0.7), &Tensor::full(&[3, 3], -0.2), 3).unwrap();
        assert!(lam.iter().all(|&l| (l - 0.4).abs() < 1e-15));
    }

    #[test]
    fn lambda_saturates_when_y_logits_are_far_lower() {
        // q·k_x/√d = 0, q·k_y/√d = -40
        let q = Tensor::<f64>::full(&[2, 1], 1.0);
        let kx = Tensor::<f64>::zeros(&[3, 1]);
        let ky = Tensor::<f64>::full(&[4, 1], -40.0);
        let lam = lambda_weights(&q, &kx, &ky, 1).unwrap();
        assert!(lam.iter().all(|&l| (1.0 - l) <= 1e-6 && l <= 1.0));
    }

    #[test]
    fn lambda_matches_concatenated_softmax_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (q, kx, ky) = (rand_t(&mut rng, 5, 8), rand_t(&mut rng, 3, 8), rand_t(&mut rng, 6, 8));
        let lam = lambda_weights(&q, &kx, &ky, 8).unwrap();
        let k = Tensor::vstack(&[&kx, &ky]).unwrap();
        let p = q.matmul_nt(&k).unwrap().scale(1.0 / 8f64.sqrt()).softmax_rows().unwrap();
        for i in 0..5 {
            let mass: f64 = p.row(i)[..3].iter().sum();
            assert!((mass - lam[i]).abs() <= 1e-10);
        }
    }

    #[test]
    fn duplicate_key_block_reconstructs_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = rand_t(&mut rng, 4, 4);
        let kx = rand_t(&mut rng, 1, 4);
        let vx = rand_t(&mut rng, 1, 3);
        let d = decompose_block(&AttentionInputs { q_x: q, k_x: kx.clone(), v_x: vx.clone(), k_y: kx, v_y: vx, d_k: 4 }).unwrap();
        assert!(d.residual <= 1e-15);
        assert!(d.lambda.iter().all(|&l| (l - 0.5).abs() < 1e-15));
    }

    #[test]
    fn equal_logits_give_elementwise_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inputs = AttentionInputs {
            q_x: Tensor::zeros(&[3, 4]),
            k_x: rand_t(&mut rng, 2, 4),
            v_x: rand_t(&mut rng, 2, 3),
            k_y: rand_t(&mut rng, 2, 4),
            v_y: rand_t(&mut rng, 2, 3),
            d_k: 4,
        };
        let d = decompose_block(&inputs).unwrap();
        let mean = d.self_output.add(&d.cross_output).unwrap().scale(0.5);
        assert!(d.reconstruction.max_abs_diff(&mean).unwrap() < 1e-15);
    }

    #[test]
    fn random_block_residual_is_tiny_at_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = AttentionInputs {
            q_x: rand_t(&mut rng, 7, 8),
            k_x: rand_t(&mut rng, 7, 8),
            v_x: rand_t(&mut rng, 7, 5),
            k_y: rand_t(&mut rng, 9, 8),
            v_y: rand_t(&mut rng, 9, 5),
            d_k: 8,
        };
        assert!(decompose_block(&inputs).unwrap().residual <= 1e-10);
    }

    #[test]
    fn uniform_equal_lengths_give_quarter_betas() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = StreamProjections {
            q_x: Tensor::zeros(&[3, 4]),
            k_x: rand_t(&mut rng, 3, 4),
            v_x: rand_t(&mut rng, 3, 2),
            q_y: Tensor::zeros(&[3, 4]),
            k_y: rand_t(&mut rng, 3, 4),
            v_y: rand_t(&mut rng, 3, 2),
            d_k: 4,
        };
        let t = decompose_pooled_qkv(&p).unwrap();
        assert_eq!(t.alpha, 0.5);
        for b in t.betas {
            assert!((b - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_unequal_lengths_hand_evaluated_betas() {
        // l_X = 3, l_Y = 1: α = 3/4, λ_X = 3/4, λ_Y = 1/4.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = StreamProjections {
            q_x: Tensor::zeros(&[3, 2]),
            k_x: rand_t(&mut rng, 3, 2),
            v_x: rand_t(&mut rng, 3, 2),
            q_y: Tensor::zeros(&[1, 2]),
            k_y: rand_t(&mut rng, 1, 2),
            v_y: rand_t(&mut rng, 1, 2),
            d_k: 2,
        };
        let t = decompose_pooled_qkv(&p).unwrap();
        assert!((t.alpha - 0.75).abs() < 1e-15);
        assert!(t.lambda_x.iter().all(|l| (l - 0.75).abs() < 1e-15));
        assert!(t.lambda_y.iter().all(|l| (l - 0.25).abs() < 1e-15));
        let want = [9.0 / 16.0, 3.0 / 16.0, 1.0 / 16.0, 3.0 / 16.0];
        for (b, w) in t.betas.iter().zip(want) {
            assert!((b - w).abs() < 1e-15, "{:?}", t.betas);
        }
        // uniform attention makes the scalar summary exact as well
        assert!(t.scalar_residual < 1e-14);
    }

    #[test]
    fn empty_stream_is_a_contract_error() {
        let w = ProjectionWeights::<f64> { wq: Tensor::eye(2), wk: Tensor::eye(2), wv: Tensor::eye(2) };
        let r = decompose_pooled(&Tensor::zeros(&[0, 2]), &Tensor::zeros(&[2, 2]), &w);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn alpha_partition_of_pooled_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_t(&mut rng, 4, 6);
        let y = rand_t(&mut rng, 7, 6);
        let w = ProjectionWeights { wq: rand_t(&mut rng, 6, 4), wk: rand_t(&mut rng, 6, 4), wv: rand_t(&mut rng, 6, 3) };
        let t = decompose_pooled(&x, &y, &w).unwrap();
        let p = w.project(&x, &y).unwrap();
        let k = Tensor::vstack(&[&p.k_x, &p.k_y]).unwrap();
        let v = Tensor::vstack(&[&p.v_x, &p.v_y]).unwrap();
        let fx = attend(&p.q_x, &k, &v, 4).unwrap().mean_rows();
        let fy = attend(&p.q_y, &k, &v, 4).unwrap().mean_rows();
        let a = 4.0 / 11.0;
        let split = fx.scale(a).add(&fy.scale(1.0 - a)).unwrap();
        assert!(split.max_abs_diff(&t.concat_output).unwrap() <= 1e-12);
        assert!(t.residual <= 1e-12);
    }

    #[test]
    fn multihead_residual_is_tiny() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_t(&mut rng, 5, 8);
        let y = rand_t(&mut rng, 3, 8);
        let w = MultiHeadWeights { wq: rand_t(&mut rng, 8, 8), wk: rand_t(&mut rng, 8, 8), wv: rand_t(&mut rng, 8, 8), heads: 2 };
        let t = decompose_pooled_multihead(&x, &y, &w).unwrap();
        assert_eq!(t.heads.len(), 2);
        assert!(t.residual <= 1e-10);
    }

    #[test]
    fn engineered_uniform_trial() {
        let r = verify_decomposition::<f64>(1, &VerifyDims::default(), 3, LogitMode::Uniform).unwrap();
        assert!(r.max_residual() <= 1e-12);
        assert!(r.max_beta_deviation() < 1e-15);
    }

    #[test]
    fn verify_is_deterministic_and_csv_has_header() {
        let a = verify_decomposition::<f64>(5, &VerifyDims::default(), 9, LogitMode::Random).unwrap();
        let b = verify_decomposition::<f64>(5, &VerifyDims::default(), 9, LogitMode::Random).unwrap();
        assert_eq!(a.rows, b.rows);
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("trial,l_x,l_y,residual,beta1,beta2,beta3,beta4,lambda_mean\n"));
        assert_eq!(text.lines().count(), 6);
        assert!(verify_decomposition::<f64>(0, &VerifyDims::default(), 9, LogitMode::Random).is_err());
    }
}
