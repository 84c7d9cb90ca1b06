//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub coordinates: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the sampled
    /// coordinates.
    pub relative_error: f64,
    pub max_abs_error: f64,
    /// `(input, flat index)` of the coordinate with the largest error.
    pub worst: (usize, usize),
    pub analytic_norm: f64,
}

/// Compares `∂f/∂θ` from the tape against `(f(θ+h) − f(θ−h)) / 2h` on up to
/// `samples` randomly chosen coordinates across all `inputs`.
pub fn check<F>(inputs: &[Tensor], f: F, samples: usize, step: f32, seed: u64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item()? as f64)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().zip(inputs).map(|(&v, t)| grads.get_or_zeros(v, t)).collect();

    let total: usize = inputs.iter().map(Tensor::len).sum();
    if total == 0 {
        return Err(Error::Contract("gradient check without parameters".into()));
    }
    let mut coords: Vec<(usize, usize)> = Vec::new();
    if total <= samples {
        for (i, t) in inputs.iter().enumerate() {
            coords.extend((0..t.len()).map(|j| (i, j)));
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        while coords.len() < samples {
            let mut k = rng.gen_range(0..total);
            let mut i = 0;
            while k >= inputs[i].len() {
                k -= inputs[i].len();
                i += 1;
            }
            if !coords.contains(&(i, k)) {
                coords.push((i, k));
            }
        }
    }
    let mut values = inputs.to_vec();
    let (mut diff2, mut a2, mut n2, mut max_abs) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut worst = (0, 0);
    for &(i, j) in &coords {
        let orig = values[i].data()[j];
        values[i].data_mut()[j] = orig + step;
        let up = eval(&values)?;
        values[i].data_mut()[j] = orig - step;
        let down = eval(&values)?;
        values[i].data_mut()[j] = orig;
        // divide by the step actually representable in f32
        let numeric = (up - down) / (((orig + step) as f64) - ((orig - step) as f64));
        let a = analytic[i].data()[j] as f64;
        diff2 += (a - numeric).powi(2);
        a2 += a * a;
        n2 += numeric * numeric;
        if (a - numeric).abs() > max_abs {
            max_abs = (a - numeric).abs();
            worst = (i, j);
        }
    }
    let denom = a2.sqrt().max(n2.sqrt());
    Ok(GradCheck {
        coordinates: coords.len(),
        relative_error: if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom },
        max_abs_error: max_abs,
        worst,
        analytic_norm: a2.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Segment;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        })
    }

    /// Fixed random projection turning any tensor into a scalar with
    /// non-trivial gradients.
    fn probe(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
        let w = tape.constant(randn(tape.value(x).shape(), seed));
        let p = tape.mul(x, w)?;
        tape.sum(p)
    }

    fn assert_ok(name: &str, r: GradCheck) {
        assert!(r.relative_error <= 1e-3, "{name}: relative error {:.2e}", r.relative_error);
    }

    fn run(name: &str, inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
        assert_ok(name, check(inputs, f, 100, 1e-3, 7).unwrap());
    }

    #[test]
    fn elementwise_and_matmul_ops() {
        let (a, b, c) = (randn(&[3, 4], 1), randn(&[4, 5], 2), randn(&[3, 4], 3));
        run("matmul", &[a.clone(), b.clone()], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            probe(t, y, 9)
        });
        run("matmul_nt", &[a.clone(), c.clone()], |t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            probe(t, y, 9)
        });
        run("add_sub_mul", &[a.clone(), c.clone()], |t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(s, v[1])?;
            let m = t.mul(d, v[1])?;
            probe(t, m, 9)
        });
        run("add_row_scale", &[a.clone(), randn(&[4], 4)], |t, v| {
            let y = t.add_row(v[0], v[1])?;
            let y = t.scale(y, -1.7)?;
            probe(t, y, 9)
        });
        run("div_scalar", &[a.clone(), Tensor::scalar(0.8)], |t, v| {
            let y = t.div_scalar(v[0], v[1])?;
            probe(t, y, 9)
        });
        run("gelu", std::slice::from_ref(&a), |t, v| {
            let y = t.gelu(v[0])?;
            probe(t, y, 9)
        });
        run("sum_mean", &[a], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let m = t.mean(sq)?;
            let s = t.sum(v[0])?;
            t.add(m, s)
        });
    }

    #[test]
    fn normalisation_ops() {
        let x = randn(&[4, 6], 5);
        run("layer_norm", &[x.clone(), randn(&[6], 6), randn(&[6], 7)], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            probe(t, y, 9)
        });
        run("l2_normalize", std::slice::from_ref(&x), |t, v| {
            let y = t.l2_normalize(v[0])?;
            probe(t, y, 9)
        });
        run("softmax_rows", &[x], |t, v| {
            let y = t.softmax_rows(v[0])?;
            probe(t, y, 9)
        });
    }

    #[test]
    fn indexing_and_pooling_ops() {
        let (a, b) = (randn(&[3, 4], 8), randn(&[2, 4], 9));
        run("gather", &[a.clone(), b], |t, v| {
            let y = t.gather(&[v[0], v[1]], vec![(0, 2), (1, 0), (0, 2), (1, 1)])?;
            probe(t, y, 9)
        });
        run("segment_mean", &[randn(&[6, 3], 10)], |t, v| {
            let y = t.segment_mean(v[0], vec![0..2, 2..6, 3..4])?;
            probe(t, y, 9)
        });
    }

    #[test]
    fn attention_op() {
        let (q, k, v) = (randn(&[7, 8], 11), randn(&[9, 8], 12), randn(&[9, 4], 13));
        run("attention", &[q, k, v], |t, x| {
            let segs = vec![Segment { queries: 0..3, keys: 0..4 }, Segment { queries: 3..7, keys: 2..9 }];
            let y = t.attention(x[0], x[1], x[2], 2, segs)?;
            probe(t, y, 9)
        });
    }

    #[test]
    fn loss_ops() {
        run("cross_entropy", &[randn(&[5, 4], 14)], |t, v| t.cross_entropy(v[0], vec![0, 3, 1, 1, 2]));
        let target = randn(&[3, 4], 15);
        run("mse", &[randn(&[3, 4], 16)], move |t, v| t.mse(v[0], target.clone()));
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // treat x·x as if d/dx were x (true value 2x)
        let r = check(
            &[randn(&[4], 17)],
            |t, v| {
                let c = t.detach(v[0]);
                let y = t.mul(v[0], c)?;
                t.sum(y)
            },
            10,
            1e-2,
            0,
        )
        .unwrap();
        assert!(r.relative_error > 0.1);
    }
}
