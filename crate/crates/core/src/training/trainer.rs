use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{total_loss, AdamW, LossParts, OhemConfig, Schedule};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{augment, crop, load_split, AugmentConfig, ModalitySample, Split};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, miou, Scenario};
use crate::model::Model;
use crate::numerics::{Gradients, Graph, ParamStore};

/// Everything the inner loop needs, independent of files on disk.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub schedule: Schedule,
    pub optimizer: AdamW,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub w0: f64,
    pub w1: f64,
    pub ohem: OhemConfig,
    pub augment: Option<AugmentConfig>,
    /// Evaluate train mIoU after every epoch (otherwise it is reported as NaN).
    pub track_miou: bool,
    pub threads: usize,
}

impl TrainSettings {
    pub fn from_config(cfg: &RunConfig, threads: usize) -> Self {
        let o = &cfg.optim;
        Self {
            schedule: o.schedule(),
            optimizer: AdamW::new(o.betas.0, o.betas.1, o.eps, o.weight_decay),
            batch: o.batch,
            epochs: o.epochs,
            seed: o.seed,
            w0: cfg.w0,
            w1: cfg.w1,
            ohem: cfg.ohem(),
            augment: cfg.data.augment.then(AugmentConfig::default),
            track_miou: true,
            threads,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Rate used by the epoch's first step.
    pub lr: f64,
    pub loss_s0: f64,
    pub loss_s1: f64,
    pub loss_total: f64,
    pub train_miou: f64,
}

/// `%g`-style formatting with 6 significant digits.
pub fn format_sig6(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent");
    let trim = |s: &str| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    } else {
        let decimals = (5 - exp).max(0) as usize;
        trim(&format!("{x:.decimals$}"))
    }
}

impl EpochMetrics {
    pub const HEADER: &'static str = "epoch,lr,loss_s0,loss_s1,loss_total,train_miou";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            format_sig6(self.lr),
            format_sig6(self.loss_s0),
            format_sig6(self.loss_s1),
            format_sig6(self.loss_total),
            format_sig6(self.train_miou)
        )
    }
}

fn derive_seed(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng.set_word_pos(((a as u128) << 32 | b as u128) * 4);
    rand::RngCore::next_u64(&mut rng)
}

struct SampleResult {
    grads: Gradients<f32>,
    loss: LossParts,
}

fn sample_step(
    model: &Model,
    store: &ParamStore<f32>,
    sample: &ModalitySample,
    settings: &TrainSettings,
    dropout_seed: u64,
) -> Result<SampleResult> {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let out = model.forward(&mut g, store, &sample.inputs(), Some(&mut rng))?;
    let labels = Arc::new(sample.label.as_u32());
    let (loss, parts) = total_loss(
        &mut g,
        out.s0,
        out.s1,
        labels,
        (sample.label.height, sample.label.width),
        settings.w0,
        settings.w1,
        &settings.ohem,
    )?;
    let grads = g.backward(loss)?;
    Ok(SampleResult { grads, loss: parts })
}

/// Runs `f` over `items` on up to `threads` workers, returning results in input order.
fn parallel_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(usize, &T) -> U + Sync) -> Vec<U> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(ci, part)| {
                scope.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(j, x)| f(ci * chunk + j, x))
                        .collect::<Vec<U>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("training worker panicked"))
            .collect()
    })
}

/// Mean-IoU of the model in evaluation mode on `samples` with every modality present.
pub fn train_miou(model: &Model, store: &ParamStore<f32>, samples: &[ModalitySample], threads: usize) -> Result<f64> {
    let scenario = Scenario::clean(&model.modality_names());
    let cm = evaluate(model, store, samples, &scenario, threads)?;
    Ok(miou(&cm)?.1)
}

/// Shuffled mini-batch AdamW training. Per-sample gradients are summed in a
/// fixed order, so results do not depend on `settings.threads`.
/// `on_epoch` sees each epoch's metrics and the updated parameters.
pub fn train_epochs(
    model: &Model,
    store: &mut ParamStore<f32>,
    samples: &[ModalitySample],
    settings: &TrainSettings,
    mut on_epoch: impl FnMut(&EpochMetrics, &ParamStore<f32>) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    if samples.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if settings.batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let mut schedule = settings.schedule;
    schedule.total_epochs = settings.epochs as f64;
    schedule.warmup_epochs = schedule.warmup_epochs.min(schedule.total_epochs);
    schedule.validate()?;
    let mut opt = settings.optimizer.clone();
    let steps_per_epoch = samples.len().div_ceil(settings.batch);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(settings.seed);
    shuffle_rng.set_stream(1);
    let mut history = Vec::with_capacity(settings.epochs);
    let mut step = 0usize;
    for epoch in 0..settings.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = LossParts::default();
        let mut first_lr = None;
        for (b, batch) in order.chunks(settings.batch).enumerate() {
            let lr = schedule.lr_at(epoch as f64 + b as f64 / steps_per_epoch as f64)?;
            first_lr.get_or_insert(lr);
            let prepared: Vec<ModalitySample> = match &settings.augment {
                Some(aug) => batch
                    .iter()
                    .map(|&i| augment(&samples[i], aug, derive_seed(settings.seed, 2, step as u64, i as u64)))
                    .collect::<Result<_>>()?,
                None => batch.iter().map(|&i| samples[i].clone()).collect(),
            };
            let frozen: &ParamStore<f32> = store;
            let results = parallel_map(&prepared, settings.threads, |j, s| {
                sample_step(model, frozen, s, settings, derive_seed(settings.seed, 3, step as u64, j as u64))
            });
            store.zero_grads();
            let scale = 1.0 / batch.len() as f32;
            for r in results {
                let r = r?;
                if !r.loss.total.is_finite() {
                    return Err(Error::Divergence {
                        step,
                        msg: format!("loss {}", r.loss.total),
                    });
                }
                sums.s0 += r.loss.s0;
                sums.s1 += r.loss.s1;
                sums.total += r.loss.total;
                store.accumulate(&r.grads, scale);
            }
            opt.step(store, lr).map_err(|e| match e {
                Error::NonFinite(what) => Error::Divergence {
                    step,
                    msg: format!("non-finite {what}"),
                },
                other => other,
            })?;
            step += 1;
        }
        let n = samples.len() as f64;
        let m = EpochMetrics {
            epoch: epoch + 1,
            lr: first_lr.unwrap_or(0.0),
            loss_s0: sums.s0 / n,
            loss_s1: sums.s1 / n,
            loss_total: sums.total / n,
            train_miou: if settings.track_miou {
                train_miou(model, store, samples, settings.threads)?
            } else {
                f64::NAN
            },
        };
        log::info!("{}", m.csv_row());
        on_epoch(&m, store)?;
        history.push(m);
    }
    Ok(history)
}

/// Artifacts of a finished run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochMetrics>,
    pub metrics_path: PathBuf,
    pub last: PathBuf,
    pub best: Option<PathBuf>,
}

/// Center crop to `h × w`; errors if the sample is smaller.
fn fit(sample: &ModalitySample, h: usize, w: usize) -> Result<ModalitySample> {
    let (sh, sw) = (sample.label.height, sample.label.width);
    if (sh, sw) == (h, w) {
        return Ok(sample.clone());
    }
    if sh < h || sw < w {
        return Err(Error::Dataset(format!("sample {} is {sh}×{sw}, smaller than the configured {h}×{w}", sample.id)));
    }
    crop(sample, (sh - h) / 2, (sw - w) / 2, h, w)
}

/// Full run from a config: loads the train split, trains, and writes
/// `metrics.csv`, `last/` and `best/` under `out`.
pub fn train(cfg: &RunConfig, out: &Path, threads: usize) -> Result<TrainReport> {
    cfg.validate()?;
    let (manifest, raw) = load_split(&cfg.data.root, Split::Train, cfg.data.modalities.as_deref())?;
    if manifest.classes > cfg.model.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model predicts {}",
            manifest.classes, cfg.model.classes
        )));
    }
    let samples: Vec<ModalitySample> = raw
        .iter()
        .map(|s| fit(s, cfg.data.height, cfg.data.width))
        .collect::<Result<_>>()?;
    let modalities = cfg.data.modalities.clone().unwrap_or(manifest.modalities.clone());
    let (model, mut store) = Model::new(cfg.model.clone(), &modalities, cfg.optim.seed)?;
    log::info!(
        "training on {} samples, modalities {:?}, {} trainable values",
        samples.len(),
        modalities,
        store.num_trainable_elements()
    );

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let metrics_path = out.join("metrics.csv");
    let mut f = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    writeln!(f, "{}", EpochMetrics::HEADER).map_err(|e| Error::io(&metrics_path, e))?;
    drop(f);

    let last = out.join("last");
    let best_dir = out.join("best");
    let steps_per_epoch = samples.len().div_ceil(cfg.optim.batch) as u64;
    let mut best: Option<f64> = None;
    let settings = TrainSettings::from_config(cfg, threads);
    let every = cfg.optim.checkpoint_every;
    let history = train_epochs(&model, &mut store, &samples, &settings, |m, store| {
        let mut f = OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?;
        writeln!(f, "{}", m.csv_row()).map_err(|e| Error::io(&metrics_path, e))?;
        let step = m.epoch as u64 * steps_per_epoch;
        if every > 0 && m.epoch % every == 0 {
            checkpoint::save(&last, cfg, &model, store, step)?;
        }
        if best.is_none_or(|b| m.train_miou > b) {
            best = Some(m.train_miou);
            checkpoint::save(&best_dir, cfg, &model, store, step)?;
        }
        Ok(())
    })?;
    checkpoint::save(&last, cfg, &model, &store, history.len() as u64 * steps_per_epoch)?;
    Ok(TrainReport {
        history,
        metrics_path,
        last,
        best: best.map(|_| best_dir),
    })
}
