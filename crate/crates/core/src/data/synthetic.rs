use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::dataset::{sample_dir, Manifest, Split};
use super::mmt::{write_f32, write_tensor, RawTensor};
use super::{modality_channels, LabelMap, ModalitySample};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Upper bounds on the nonzero fraction of the sparse modalities.
const EVENT_DENSITY: f64 = 0.10;
const LIDAR_DENSITY: f64 = 0.05;
const LIDAR_RING_SPACING: usize = 6;
const LIDAR_KEEP: f64 = 0.35;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    /// Training samples; validation and test each get `⌈count/4⌉`.
    pub count: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub modalities: Vec<String>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Dataset("count must be at least 1".into()));
        }
        if !(1..=255).contains(&self.classes) {
            return Err(Error::Dataset(format!("classes {} outside 1..=255", self.classes)));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::Dataset(format!(
                "image size {}×{} below 4×4",
                self.height, self.width
            )));
        }
        if self.modalities.is_empty() {
            return Err(Error::Dataset("no modalities requested".into()));
        }
        for m in &self.modalities {
            modality_channels(m)?;
        }
        Ok(())
    }

    pub fn split_count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.count,
            Split::Val | Split::Test => self.count.div_ceil(4),
        }
    }
}

struct Shape {
    class: u8,
    ellipse: bool,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    color: [f64; 3],
    depth: f64,
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        if self.ellipse {
            dy * dy + dx * dx <= 1.0
        } else {
            dy.abs() <= 1.0 && dx.abs() <= 1.0
        }
    }
}

/// Saturated class colour on an evenly spaced hue wheel.
fn class_color(class: u8, classes: usize) -> [f64; 3] {
    let hue = 6.0 * (class as f64 - 1.0) / (classes.max(2) - 1) as f64;
    let f = |shift: f64| {
        let k = (shift + hue) % 6.0;
        let v = 1.0 - (k.min(4.0 - k).clamp(0.0, 1.0));
        40.0 + 190.0 * v
    };
    [f(5.0), f(3.0), f(1.0)]
}


/// Keeps at most `max_frac` of the pixels of `plane` nonzero, dropping extras
/// in a seeded random order.
fn cap_density(plane: &mut [f32], max_frac: f64, rng: &mut ChaCha8Rng) {
    let limit = (max_frac * plane.len() as f64).floor() as usize;
    let mut on: Vec<usize> = (0..plane.len()).filter(|&i| plane[i] != 0.0).collect();
    while on.len() > limit {
        let k = rng.random_range(0..on.len());
        plane[on.swap_remove(k)] = 0.0;
    }
}

/// Deterministic sample `index` of `split`.
pub fn generate_sample(spec: &SyntheticSpec, split: Split, index: usize) -> Result<ModalitySample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(((split as u64) << 40) | index as u64);

    let mut shapes = Vec::new();
    if spec.classes > 1 {
        let n = rng.random_range(2..=4);
        let (min_r, max_r) = (h.min(w) as f64 / 10.0, h.min(w) as f64 / 4.0);
        for _ in 0..n {
            let class = rng.random_range(1..spec.classes) as u8;
            let base = class_color(class, spec.classes);
            let color = base.map(|c| c + rng.random_range(-20.0..20.0));
            shapes.push(Shape {
                class,
                ellipse: rng.random_bool(0.5),
                cy: rng.random_range(0.0..h as f64),
                cx: rng.random_range(0.0..w as f64),
                ry: rng.random_range(min_r..=max_r),
                rx: rng.random_range(min_r..=max_r),
                color,
                depth: rng.random_range(30.0..170.0),
            });
        }
    }

    // Later shapes occlude earlier ones.
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    for (s_idx, s) in shapes.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                if s.contains(y, x) {
                    owner[y * w + x] = Some(s_idx);
                }
            }
        }
    }
    let label: Vec<u8> = owner.iter().map(|o| o.map_or(0, |i| shapes[i].class)).collect();

    let bg_color: [f64; 3] = std::array::from_fn(|_| rng.random_range(90.0..140.0));
    let mut depth = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            depth[i] = match owner[i] {
                Some(s) => {
                    let sh = &shapes[s];
                    sh.depth + 10.0 * (y as f64 + 0.5 - sh.cy) / sh.ry
                }
                None => 250.0 - 40.0 * y as f64 / h as f64,
            }
            .clamp(1.0, 255.0) as f32;
        }
    }

    let mut rasters = BTreeMap::new();
    for m in &spec.modalities {
        let t = match m.as_str() {
            "rgb" => {
                let mut data = vec![0f32; 3 * h * w];
                for c in 0..3 {
                    for i in 0..h * w {
                        let base = owner[i].map_or(bg_color[c], |s| shapes[s].color[c]);
                        let tex: f64 = rng.sample::<f64, _>(StandardNormal) * 8.0;
                        data[c * h * w + i] = (base + tex).clamp(0.0, 255.0) as f32;
                    }
                }
                data
            }
            "depth" => depth.clone(),
            "event" => {
                let mut data = vec![0f32; h * w];
                for y in 0..h {
                    for x in 0..w {
                        let i = y * w + x;
                        let edge = (x + 1 < w && label[i] != label[i + 1])
                            || (y + 1 < h && label[i] != label[i + w])
                            || (x + 1 < w && y + 1 < h && owner[i] != owner[i + w + 1]);
                        if edge {
                            data[i] = if depth[i] < 200.0 { 255.0 } else { 128.0 };
                        } else if rng.random_bool(0.003) {
                            data[i] = 64.0;
                        }
                    }
                }
                cap_density(&mut data, EVENT_DENSITY, &mut rng);
                data
            }
            "lidar" => {
                let mut data = vec![0f32; h * w];
                let offset = rng.random_range(0..LIDAR_RING_SPACING);
                for y in (offset..h).step_by(LIDAR_RING_SPACING) {
                    for x in 0..w {
                        if rng.random_bool(LIDAR_KEEP) {
                            data[y * w + x] = depth[y * w + x];
                        }
                    }
                }
                cap_density(&mut data, LIDAR_DENSITY, &mut rng);
                data
            }
            other => return Err(Error::UnknownModality(other.to_string())),
        };
        let c = modality_channels(m)?;
        rasters.insert(m.clone(), Tensor::new(vec![c, h, w], t)?);
    }

    Ok(ModalitySample {
        id: format!("{index:06}"),
        rasters,
        label: LabelMap::new(h, w, label)?,
    })
}

/// Writes the full train/val/test tree plus `manifest` under `root`.
pub fn gen_synthetic(root: &Path, spec: &SyntheticSpec) -> Result<Manifest> {
    spec.validate()?;
    let manifest = Manifest {
        modalities: spec.modalities.clone(),
        classes: spec.classes,
        height: spec.height,
        width: spec.width,
        count: spec.count,
        val_count: spec.split_count(Split::Val),
        test_count: spec.split_count(Split::Test),
        seed: spec.seed,
    };
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for split in Split::ALL {
        for index in 0..spec.split_count(split) {
            let sample = generate_sample(spec, split, index)?;
            let dir = sample_dir(root, split, &sample.id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (name, raster) in &sample.rasters {
                write_f32(&dir.join(format!("{name}.mmt")), raster)?;
            }
            write_tensor(
                &dir.join("label.mmt"),
                &RawTensor::u8(vec![spec.height, spec.width], sample.label.data.clone()),
            )?;
        }
    }
    manifest.write(root)?;
    Ok(manifest)
}
