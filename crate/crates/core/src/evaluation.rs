//! Confusion matrices, IoU metrics, and the missing-modality / noise
//! scenario grid.

use std::fmt::Write as _;
use std::thread;

use crate::data::{drop_modalities, inject_noise, ModalitySample, NoiseSpec, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::ParamStore;

/// `𝒞 × 𝒞` counts; rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts every pixel whose ground truth is not [`IGNORE_LABEL`].
    pub fn accumulate(&mut self, pred: &[u32], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::invalid(
                "accumulate",
                format!("{} predictions for {} labels", pred.len(), gt.len()),
            ));
        }
        let c = self.classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE_LABEL {
                continue;
            }
            if g as usize >= c {
                return Err(Error::ClassOutOfRange { id: g as u32, classes: c });
            }
            if p as usize >= c {
                return Err(Error::ClassOutOfRange { id: p, classes: c });
            }
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g != IGNORE_LABEL {
                self.counts[g as usize * c + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::invalid(
                "merge",
                format!("{} vs {} classes", self.classes, other.classes),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Per-class IoU (`None` where the class never occurs in either ground truth
/// or prediction) and their mean over the classes that do.
pub fn miou(cm: &ConfusionMatrix) -> Result<(Vec<Option<f64>>, f64)> {
    if cm.total() == 0 {
        return Err(Error::EmptyConfusion);
    }
    let c = cm.classes();
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let fn_: u64 = (0..c).map(|p| cm.get(k, p)).sum::<u64>() - tp;
            let fp: u64 = (0..c).map(|g| cm.get(g, k)).sum::<u64>() - tp;
            let union = tp + fp + fn_;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok((per_class.clone(), present.iter().sum::<f64>() / present.len() as f64))
}

/// One row of the robustness grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub name: String,
    pub keep: Vec<String>,
    pub noise: Option<NoiseSpec>,
}

impl Scenario {
    pub fn clean(keep: &[String]) -> Self {
        Self {
            name: keep.join("+"),
            keep: keep.to_vec(),
            noise: None,
        }
    }

    pub fn noisy(keep: &[String], noise: NoiseSpec) -> Self {
        Self {
            name: format!("{}|{noise}", keep.join("+")),
            keep: keep.to_vec(),
            noise: Some(noise),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub samples: usize,
}

/// All nonempty subsets, by size and then lexicographically by position in `mods`.
pub fn all_subsets(mods: &[String]) -> Vec<Vec<String>> {
    let m = mods.len();
    let mut subsets: Vec<Vec<usize>> = (1u32..(1 << m))
        .map(|mask| (0..m).filter(|i| mask & (1 << i) != 0).collect())
        .collect();
    subsets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    subsets
        .into_iter()
        .map(|s| s.into_iter().map(|i| mods[i].clone()).collect())
        .collect()
}

/// Seed of the noise applied to sample `index`.
pub fn sample_noise_seed(base: u64, index: usize) -> u64 {
    base ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn evaluate_one(
    model: &Model,
    store: &ParamStore<f32>,
    sample: &ModalitySample,
    index: usize,
    scenario: &Scenario,
) -> Result<(Vec<u32>, Vec<u8>)> {
    let mut s = drop_modalities(sample, &scenario.keep)?;
    if let Some(noise) = &scenario.noise {
        let spec = NoiseSpec {
            seed: sample_noise_seed(noise.seed, index),
            ..noise.clone()
        };
        s = inject_noise(&s, &spec)?;
    }
    let pred = model.predict(store, &s.inputs())?;
    Ok((pred, s.label.data))
}

/// Confusion matrix of `model` over `samples` under one scenario, using up
/// to `threads` workers. The result does not depend on `threads`.
pub fn evaluate(
    model: &Model,
    store: &ParamStore<f32>,
    samples: &[ModalitySample],
    scenario: &Scenario,
    threads: usize,
) -> Result<ConfusionMatrix> {
    let registered = model.modality_names();
    if scenario.keep.is_empty() {
        return Err(Error::invalid("scenario", format!("`{}` keeps no modality", scenario.name)));
    }
    for m in scenario.keep.iter().chain(scenario.noise.as_ref().map(|n| &n.modality)) {
        if !registered.contains(m) {
            return Err(Error::UnknownModality(m.clone()));
        }
    }
    let classes = model.cfg.classes;
    let threads = threads.clamp(1, samples.len().max(1));
    let chunk = samples.len().div_ceil(threads).max(1);
    let partials: Vec<Result<ConfusionMatrix>> = thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .enumerate()
            .map(|(ci, part)| {
                scope.spawn(move || {
                    let mut cm = ConfusionMatrix::new(classes);
                    for (j, sample) in part.iter().enumerate() {
                        let (pred, gt) = evaluate_one(model, store, sample, ci * chunk + j, scenario)?;
                        cm.accumulate(&pred, &gt)?;
                    }
                    Ok(cm)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut cm = ConfusionMatrix::new(classes);
    for p in partials {
        cm.merge(&p?)?;
    }
    Ok(cm)
}

pub fn run_scenarios(
    model: &Model,
    store: &ParamStore<f32>,
    samples: &[ModalitySample],
    scenarios: &[Scenario],
    threads: usize,
) -> Result<Vec<ScenarioResult>> {
    scenarios
        .iter()
        .map(|sc| {
            let cm = evaluate(model, store, samples, sc, threads)?;
            let (per_class, m) = miou(&cm)?;
            Ok(ScenarioResult {
                scenario: sc.clone(),
                per_class,
                miou: m,
                samples: samples.len(),
            })
        })
        .collect()
}

/// CSV grid: a `#` note line, the header, then one row per scenario.
pub fn results_csv(results: &[ScenarioResult], classes: usize) -> String {
    let mut out = String::from("# miou averages classes with nonzero union; other classes read nan\n");
    out.push_str("scenario,kept_modalities,noise");
    for c in 0..classes {
        let _ = write!(out, ",class_{c}");
    }
    out.push_str(",miou,samples\n");
    for r in results {
        let noise = r.scenario.noise.as_ref().map_or("none".to_string(), |n| n.to_string());
        let _ = write!(out, "{},{},{}", r.scenario.name, r.scenario.keep.join("+"), noise);
        for v in &r.per_class {
            match v {
                Some(x) => {
                    let _ = write!(out, ",{x:.4}");
                }
                None => out.push_str(",nan"),
            }
        }
        let _ = writeln!(out, ",{:.4},{}", r.miou, r.samples);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_counted_matrix() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1, 1, 0], &[0, 1, 0, 255]).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)), (1, 1, 0, 1));
        let (iou, m) = miou(&cm).unwrap();
        assert_eq!(iou, vec![Some(0.5), Some(0.5)]);
        assert_eq!(m, 0.5);
    }

    #[test]
    fn perfect_and_ignored() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap();
        assert_eq!(cm.total(), 4);
        let (iou, m) = miou(&cm).unwrap();
        assert_eq!(iou, vec![Some(1.0), Some(1.0), None]);
        assert_eq!(m, 1.0);

        let mut empty = ConfusionMatrix::new(2);
        empty.accumulate(&[1, 0], &[255, 255]).unwrap();
        assert_eq!(empty.total(), 0);
        assert!(matches!(miou(&empty), Err(Error::EmptyConfusion)));
        assert!(empty.accumulate(&[0], &[2]).is_err());
        assert!(empty.accumulate(&[2], &[0]).is_err());
    }

    #[test]
    fn subset_enumeration_order() {
        let m: Vec<String> = ["rgb", "depth"].iter().map(|s| s.to_string()).collect();
        assert_eq!(all_subsets(&m), vec![vec!["rgb".to_string()], vec!["depth".to_string()], m.clone()]);
        let four: Vec<String> = ["rgb", "depth", "event", "lidar"].iter().map(|s| s.to_string()).collect();
        let s = all_subsets(&four);
        assert_eq!(s.len(), 15);
        assert!(s.windows(2).all(|w| w[0].len() <= w[1].len()));
        assert_eq!(s[4], vec!["rgb".to_string(), "depth".to_string()]);
        assert_eq!(s[14], four);
    }

    #[test]
    fn csv_layout() {
        let noise = NoiseSpec { kind: crate::data::NoiseKind::Gaussian, modality: "rgb".into(), seed: 0 };
        let keep = vec!["rgb".to_string(), "depth".to_string()];
        let r = ScenarioResult {
            scenario: Scenario::noisy(&keep, noise),
            per_class: vec![Some(0.5), None],
            miou: 0.5,
            samples: 3,
        };
        let csv = results_csv(&[r], 2);
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with('#'));
        assert_eq!(lines[1], "scenario,kept_modalities,noise,class_0,class_1,miou,samples");
        assert_eq!(lines[2], "rgb+depth|gaussian:rgb,rgb+depth,gaussian:rgb,0.5000,nan,0.5000,3");
    }

    proptest! {
        #[test]
        fn order_independent_and_bounded(
            pixels in prop::collection::vec((0u32..3, prop_oneof![0u8..3, Just(255u8)]), 1..80),
            rot in 0usize..80,
        ) {
            let (pred, gt): (Vec<u32>, Vec<u8>) = pixels.iter().copied().unzip();
            let mut a = ConfusionMatrix::new(3);
            a.accumulate(&pred, &gt).unwrap();
            let k = rot % pixels.len();
            let mut b = ConfusionMatrix::new(3);
            b.accumulate(&pred[k..], &gt[k..]).unwrap();
            b.accumulate(&pred[..k], &gt[..k]).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.total() as usize, gt.iter().filter(|&&g| g != 255).count());
            if let Ok((iou, m)) = miou(&a) {
                prop_assert!(iou.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
                prop_assert!((0.0..=1.0).contains(&m));
            }
            // predictions at ignored pixels are irrelevant
            let flipped: Vec<u32> = pred.iter().zip(&gt).map(|(&p, &g)| if g == 255 { (p + 1) % 3 } else { p }).collect();
            let mut c = ConfusionMatrix::new(3);
            c.accumulate(&flipped, &gt).unwrap();
            prop_assert_eq!(a, c);
        }
    }
}
