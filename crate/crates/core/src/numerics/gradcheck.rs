//! Central finite-difference verification of reverse-mode gradients, run in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|a − n| / max(1, |a|, |n|)` over checked entries.
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Error metric used throughout: relative with a unit floor.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Checks `d loss / d inputs` where `loss = Σ r ⊙ f(inputs)` for a fixed
/// random projection `r` (or `f` itself when it is already scalar).
///
/// At most `max_entries` coordinates per input are perturbed, chosen at random.
pub fn check<F>(f: F, inputs: &[Tensor<f64>], eps: f64, max_entries: usize, seed: u64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut probe: Option<Tensor<f64>> = None;
    let eval = |xs: &[Tensor<f64>], want_grad: bool, probe: &mut Option<Tensor<f64>>, rng: &mut ChaCha8Rng| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let loss = if g.value(out).numel() == 1 {
            out
        } else {
            let r = probe
                .get_or_insert_with(|| {
                    let shape = g.shape(out).to_vec();
                    let n = shape.iter().product();
                    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
                        .expect("probe shape")
                })
                .clone();
            let r = g.constant(r);
            let prod = g.mul(out, r)?;
            g.sum(prod)?
        };
        let value = g.value(loss).item();
        if !want_grad {
            return Ok((value, vec![]));
        }
        let grads = g.backward(loss)?;
        let gs = vars
            .iter()
            .zip(xs)
            .map(|(v, t)| {
                grads
                    .wrt(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect();
        Ok((value, gs))
    };

    let (_, analytic) = eval(inputs, true, &mut probe, &mut rng)?;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut xs = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let picks: Vec<usize> = if n <= max_entries {
            (0..n).collect()
        } else {
            (0..max_entries).map(|_| rng.random_range(0..n)).collect()
        };
        for idx in picks {
            let orig = xs[ti].data()[idx];
            xs[ti].data_mut()[idx] = orig + eps;
            let (plus, _) = eval(&xs, false, &mut probe, &mut rng)?;
            xs[ti].data_mut()[idx] = orig - eps;
            let (minus, _) = eval(&xs, false, &mut probe, &mut rng)?;
            xs[ti].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(rel_error(analytic[ti].data()[idx], numeric));
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked,
    })
}
