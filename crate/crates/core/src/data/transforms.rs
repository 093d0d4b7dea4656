use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{is_dense, LabelMap, ModalitySample};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const GAUSSIAN_SCALE: f64 = 50.0;
pub const UNIFORM_RANGE: (f64, f64) = (-100.0, 100.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Gaussian,
    Uniform,
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Uniform => "uniform",
        })
    }
}

impl FromStr for NoiseKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "uniform" => Ok(Self::Uniform),
            other => Err(format!("unknown noise kind `{other}` (gaussian, uniform)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub modality: String,
    pub seed: u64,
}

impl fmt::Display for NoiseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.modality)
    }
}

/// `clamp(v + delta, 0, 255)`
pub fn add_clipped(v: f32, delta: f64) -> f32 {
    (v as f64 + delta).clamp(0.0, 255.0) as f32
}

/// Adds seeded noise to the targeted raster and clips to `[0, 255]`.
pub fn inject_noise(sample: &ModalitySample, spec: &NoiseSpec) -> Result<ModalitySample> {
    let mut out = sample.clone();
    let raster = out
        .rasters
        .get_mut(&spec.modality)
        .ok_or_else(|| Error::UnknownModality(spec.modality.clone()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for v in raster.data_mut() {
        let delta = match spec.kind {
            NoiseKind::Gaussian => GAUSSIAN_SCALE * rng.sample::<f64, _>(StandardNormal),
            NoiseKind::Uniform => rng.random_range(UNIFORM_RANGE.0..=UNIFORM_RANGE.1),
        };
        *v = add_clipped(*v, delta);
    }
    Ok(out)
}

/// Keeps exactly the listed modalities.
pub fn drop_modalities(sample: &ModalitySample, keep: &[String]) -> Result<ModalitySample> {
    if keep.is_empty() {
        return Err(Error::invalid("drop_modalities", "keep set is empty"));
    }
    let mut rasters = std::collections::BTreeMap::new();
    for m in keep {
        let r = sample
            .rasters
            .get(m)
            .ok_or_else(|| Error::UnknownModality(m.clone()))?;
        rasters.insert(m.clone(), r.clone());
    }
    Ok(ModalitySample {
        id: sample.id.clone(),
        rasters,
        label: sample.label.clone(),
    })
}

/// Mirrors every raster and the label left-to-right.
pub fn hflip(sample: &ModalitySample) -> ModalitySample {
    let w = sample.label.width;
    let mut out = sample.clone();
    for r in out.rasters.values_mut() {
        r.data_mut().chunks_mut(w).for_each(<[f32]>::reverse);
    }
    out.label.data.chunks_mut(w).for_each(<[u8]>::reverse);
    out
}

/// Cuts the window `[top, top+h) × [left, left+w)` out of every raster and the label.
pub fn crop(sample: &ModalitySample, top: usize, left: usize, h: usize, w: usize) -> Result<ModalitySample> {
    let (sh, sw) = (sample.label.height, sample.label.width);
    if h == 0 || w == 0 || top + h > sh || left + w > sw {
        return Err(Error::invalid(
            "crop",
            format!("window {h}×{w} at ({top}, {left}) exceeds {sh}×{sw}"),
        ));
    }
    let mut out = sample.clone();
    for r in out.rasters.values_mut() {
        let c = r.shape()[0];
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in top..top + h {
                let row = ch * sh * sw + y * sw;
                data.extend_from_slice(&r.data()[row + left..row + left + w]);
            }
        }
        *r = Tensor::new(vec![c, h, w], data)?;
    }
    let mut label = Vec::with_capacity(h * w);
    for y in top..top + h {
        label.extend_from_slice(&sample.label.data[y * sw + left..y * sw + left + w]);
    }
    out.label = LabelMap::new(h, w, label)?;
    Ok(out)
}

/// Brightness scale then contrast stretch about the mean, clipped to `[0, 255]`.
pub fn color_jitter(raster: &mut Tensor<f32>, brightness: f64, contrast: f64) {
    let n = raster.numel() as f64;
    let mean = raster.data().iter().map(|&v| v as f64 * brightness).sum::<f64>() / n;
    for v in raster.data_mut() {
        let b = *v as f64 * brightness;
        *v = (mean + contrast * (b - mean)).clamp(0.0, 255.0) as f32;
    }
}

/// Separable Gaussian blur with edge clamping, applied per channel.
pub fn gaussian_blur(raster: &mut Tensor<f32>, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (2.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (c, h, w) = (raster.shape()[0], raster.shape()[1], raster.shape()[2]);
    let mut tmp = vec![0f32; h * w];
    for ch in 0..c {
        let plane = &mut raster.data_mut()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let xx = (x as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += kv * plane[y * w + xx] as f64;
                }
                tmp[y * w + x] = acc as f32;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let yy = (y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[yy * w + x] as f64;
                }
                plane[y * w + x] = (acc as f32).clamp(0.0, 255.0);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Colour jitter on rgb.
    pub jitter: bool,
    /// Gaussian blur on dense modalities.
    pub blur: bool,
    pub blur_prob: f64,
    /// Random crop size; `None` keeps the full frame.
    pub crop: Option<(usize, usize)>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            jitter: true,
            blur: true,
            blur_prob: 0.5,
            crop: None,
        }
    }
}

/// Seeded crop → flip → jitter → blur.
pub fn augment(sample: &ModalitySample, cfg: &AugmentConfig, seed: u64) -> Result<ModalitySample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = match cfg.crop {
        Some((h, w)) => {
            let (sh, sw) = (sample.label.height, sample.label.width);
            if h > sh || w > sw {
                return Err(Error::invalid("augment", format!("crop {h}×{w} larger than {sh}×{sw}")));
            }
            let top = rng.random_range(0..=sh - h);
            let left = rng.random_range(0..=sw - w);
            crop(sample, top, left, h, w)?
        }
        None => sample.clone(),
    };
    if rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0)) {
        out = hflip(&out);
    }
    let brightness = rng.random_range(0.8..1.2);
    let contrast = rng.random_range(0.8..1.2);
    let blur = rng.random_bool(cfg.blur_prob.clamp(0.0, 1.0));
    let sigma = rng.random_range(0.3..1.0);
    for (name, r) in out.rasters.iter_mut() {
        if cfg.jitter && name == "rgb" {
            color_jitter(r, brightness, contrast);
        }
        if cfg.blur && blur && is_dense(name) {
            gaussian_blur(r, sigma);
        }
    }
    Ok(out)
}
