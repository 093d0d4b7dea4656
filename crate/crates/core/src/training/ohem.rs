use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{kernels::log_softmax_at, Graph, Real, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OhemConfig {
    /// Pixels whose true-class probability is below this are "hard".
    pub prob_threshold: f64,
    /// Floor on kept pixels is `⌊n_total / divisor⌋`.
    pub divisor: usize,
    pub ignore_label: u32,
}

impl Default for OhemConfig {
    fn default() -> Self {
        Self {
            prob_threshold: 0.7,
            divisor: 16,
            ignore_label: 255,
        }
    }
}

/// Which pixels a hard-example loss keeps.
#[derive(Debug, Clone, PartialEq)]
pub struct OhemSelection {
    /// Non-ignored pixel count.
    pub n_total: usize,
    pub n_hard: usize,
    pub n_keep: usize,
    /// Kept pixel indices, hardest first.
    pub kept: Vec<usize>,
    /// Set when every pixel is ignored; the loss is then defined as zero.
    pub all_ignored: bool,
}

/// Per-pixel cross-entropy for class-major logits `[𝒞 × N]`; `None` at ignored pixels.
pub fn pixel_ce<S: Real>(logits: &Tensor<S>, labels: &[u32], ignore: u32) -> Result<Vec<Option<f64>>> {
    let classes = logits.shape()[0];
    let n = logits.numel() / classes;
    if labels.len() != n {
        return Err(Error::invalid(
            "ohem",
            format!("{} labels for {n} pixels", labels.len()),
        ));
    }
    let z = logits.data();
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            if y == ignore {
                return Ok(None);
            }
            if y as usize >= classes {
                return Err(Error::ClassOutOfRange { id: y, classes });
            }
            let (mx, lse) = log_softmax_at(z, classes, n, i);
            Ok(Some((mx + lse - z[y as usize * n + i]).as_f64()))
        })
        .collect()
}

/// `n_keep = clamp(max(#{p_correct < p_th}, ⌊n_total/divisor⌋), 1, n_total)`,
/// taking the largest-loss pixels (ties to the lower index).
pub fn ohem_select<S: Real>(logits: &Tensor<S>, labels: &[u32], cfg: &OhemConfig) -> Result<OhemSelection> {
    if !(cfg.prob_threshold > 0.0 && cfg.prob_threshold <= 1.0) || cfg.divisor == 0 {
        return Err(Error::invalid(
            "ohem",
            format!("threshold {} / divisor {}", cfg.prob_threshold, cfg.divisor),
        ));
    }
    let ce = pixel_ce(logits, labels, cfg.ignore_label)?;
    let mut valid: Vec<(usize, f64)> = ce.iter().enumerate().filter_map(|(i, c)| c.map(|c| (i, c))).collect();
    let n_total = valid.len();
    if n_total == 0 {
        return Ok(OhemSelection {
            n_total,
            n_hard: 0,
            n_keep: 0,
            kept: Vec::new(),
            all_ignored: true,
        });
    }
    let n_hard = valid
        .iter()
        .filter(|(_, c)| (-c).exp() < cfg.prob_threshold)
        .count();
    let n_keep = n_hard.max(n_total / cfg.divisor).clamp(1, n_total);
    valid.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(OhemSelection {
        n_total,
        n_hard,
        n_keep,
        kept: valid[..n_keep].iter().map(|&(i, _)| i).collect(),
        all_ignored: false,
    })
}

/// Mean cross-entropy over the selected hard pixels of `logits` (`𝒞 × ...`).
/// Ignored and unselected pixels receive exactly zero gradient.
pub fn ohem_ce<S: Real>(
    g: &mut Graph<S>,
    logits: Var,
    labels: Arc<Vec<u32>>,
    cfg: &OhemConfig,
) -> Result<(Var, OhemSelection)> {
    let sel = ohem_select(g.value(logits), &labels, cfg)?;
    let mut weights = vec![S::zero(); labels.len()];
    if !sel.all_ignored {
        let w = S::lit(1.0 / sel.n_keep as f64);
        for &i in &sel.kept {
            weights[i] = w;
        }
    }
    let loss = g.weighted_cross_entropy(logits, labels, weights)?;
    Ok((loss, sel))
}

/// Loss values of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub s0: f64,
    pub s1: f64,
    pub total: f64,
}

/// `w0·L(up(s0)) + w1·L(up(s1))`, each head upsampled to the `h × w` labels.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<S: Real>(
    g: &mut Graph<S>,
    s0: Var,
    s1: Var,
    labels: Arc<Vec<u32>>,
    (h, w): (usize, usize),
    w0: f64,
    w1: f64,
    cfg: &OhemConfig,
) -> Result<(Var, LossParts)> {
    if !(w0 >= 0.0 && w1 >= 0.0) || (w0 == 0.0 && w1 == 0.0) {
        return Err(Error::invalid(
            "total_loss",
            format!("head weights ({w0}, {w1}) must be non-negative and not both zero"),
        ));
    }
    let up0 = g.upsample_bilinear(s0, h, w)?;
    let up1 = g.upsample_bilinear(s1, h, w)?;
    let (l0, _) = ohem_ce(g, up0, labels.clone(), cfg)?;
    let (l1, _) = ohem_ce(g, up1, labels, cfg)?;
    let a = g.scale(l0, w0)?;
    let b = g.scale(l1, w1)?;
    let total = g.add(a, b)?;
    let parts = LossParts {
        s0: g.value(l0).item().as_f64(),
        s1: g.value(l1).item().as_f64(),
        total: g.value(total).item().as_f64(),
    };
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn everything_ignored_is_zero() {
        let mut g = Graph::new();
        let z = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let (loss, sel) = ohem_ce(&mut g, z, Arc::new(vec![255, 255]), &OhemConfig::default()).unwrap();
        assert!(sel.all_ignored);
        assert_eq!(g.value(loss).item(), 0.0);
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(z).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn easy_pixels_fall_back_to_the_single_hardest() {
        // 16 pixels, all confidently correct: n_keep = max(0, 16/16) = 1
        let n = 16;
        let mut z = vec![0.0; 2 * n];
        for i in 0..n {
            z[i] = 5.0 + i as f64 * 0.1;
        }
        let logits = t(&[2, n], &z);
        let labels = vec![0u32; n];
        let sel = ohem_select(&logits, &labels, &OhemConfig::default()).unwrap();
        assert_eq!((sel.n_hard, sel.n_keep), (0, 1));
        assert_eq!(sel.kept, vec![0]);
        let mut g = Graph::new();
        let zv = g.constant(logits);
        let (loss, _) = ohem_ce(&mut g, zv, Arc::new(labels), &OhemConfig::default()).unwrap();
        let expect = (1.0 + (-5.0f64).exp()).ln();
        assert!((g.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_labels_error() {
        let logits = t(&[2, 2], &[0.0; 4]);
        assert!(matches!(
            ohem_select(&logits, &[0, 2], &OhemConfig::default()),
            Err(Error::ClassOutOfRange { id: 2, classes: 2 })
        ));
    }

    #[test]
    fn ignored_pixels_get_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let z = g.input(Tensor::<f64>::randn(vec![3, 2, 3], 2.0, &mut rng));
        let labels = Arc::new(vec![0, 255, 2, 1, 255, 0]);
        let cfg = OhemConfig { prob_threshold: 1.0, ..OhemConfig::default() };
        let (loss, sel) = ohem_ce(&mut g, z, labels, &cfg).unwrap();
        assert_eq!(sel.n_keep, 4);
        let grads = g.backward(loss).unwrap();
        let gz = grads.wrt(z).unwrap();
        for c in 0..3 {
            assert_eq!(gz.data()[c * 6 + 1], 0.0);
            assert_eq!(gz.data()[c * 6 + 4], 0.0);
        }
    }

    #[test]
    fn head_weighting() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Tensor::<f64>::randn(vec![3, 2, 2], 1.0, &mut rng);
        let labels = Arc::new((0..16).map(|i| (i % 3) as u32).collect::<Vec<_>>());
        let cfg = OhemConfig::default();
        let mut g = Graph::new();
        let (a, b) = (g.constant(s.clone()), g.constant(s));
        let (_, only0) = total_loss(&mut g, a, b, labels.clone(), (4, 4), 1.0, 0.0, &cfg).unwrap();
        assert_eq!(only0.total, only0.s0);
        let (_, both) = total_loss(&mut g, a, b, labels.clone(), (4, 4), 1.0, 1.0, &cfg).unwrap();
        assert!((both.total - 2.0 * only0.s0).abs() < 1e-12);
        assert!(total_loss(&mut g, a, b, labels.clone(), (4, 4), 0.0, 0.0, &cfg).is_err());
        assert!(total_loss(&mut g, a, b, labels, (4, 4), -1.0, 1.0, &cfg).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn kept_set_size_rule(seed in any::<u64>(), n in 1usize..60, ignore_every in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = Tensor::<f64>::randn(vec![3, n], 3.0, &mut rng);
            let labels: Vec<u32> = (0..n).map(|i| if i % ignore_every == 0 { 255 } else { (i % 3) as u32 }).collect();
            let sel = ohem_select(&logits, &labels, &OhemConfig::default()).unwrap();
            let total = labels.iter().filter(|&&l| l != 255).count();
            prop_assert_eq!(sel.n_total, total);
            if total > 0 {
                prop_assert!(sel.n_keep >= 1 && sel.n_keep <= total);
                prop_assert!(sel.n_keep >= total / 16);
                prop_assert!(sel.n_keep >= sel.n_hard);
                prop_assert!(sel.kept.iter().all(|&i| labels[i] != 255));
            }
        }
    }
}
