//! Multi-modal samples, tensor files, the synthetic scene generator,
//! augmentation, and robustness transforms.

mod dataset;
pub mod mmt;
mod synthetic;
mod transforms;

use std::collections::BTreeMap;

pub use dataset::{load_split, Manifest, Split};
pub use synthetic::{gen_synthetic, generate_sample, SyntheticSpec};
pub use transforms::{
    augment, color_jitter, crop, drop_modalities, gaussian_blur, hflip, add_clipped, inject_noise, AugmentConfig, NoiseKind, NoiseSpec,
};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const IGNORE_LABEL: u8 = 255;

/// Every modality the generator and model understand, in canonical order.
pub const KNOWN_MODALITIES: [&str; 4] = ["rgb", "depth", "event", "lidar"];

/// Input channel count of a named modality.
pub fn modality_channels(name: &str) -> Result<usize> {
    match name {
        "rgb" => Ok(3),
        "depth" | "event" | "lidar" => Ok(1),
        other => Err(Error::UnknownModality(other.to_string())),
    }
}

/// Dense modalities carry information at most pixels.
pub fn is_dense(name: &str) -> bool {
    matches!(name, "rgb" | "depth")
}

/// Row-major `H × W` class ids, with [`IGNORE_LABEL`] marking ignored pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dataset(format!(
                "label has {} pixels, expected {height}×{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn as_u32(&self) -> Vec<u32> {
        self.data.iter().map(|&v| v as u32).collect()
    }
}

/// One scene: a raster per modality (`C × H × W`, values in `[0, 255]`) plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySample {
    pub id: String,
    pub rasters: BTreeMap<String, Tensor<f32>>,
    pub label: LabelMap,
}

impl ModalitySample {
    /// Checks shared extents, value range, and label range.
    pub fn validate(&self, classes: usize) -> Result<()> {
        let (h, w) = (self.label.height, self.label.width);
        for (name, r) in &self.rasters {
            let s = r.shape();
            if s.len() != 3 || s[0] != modality_channels(name)? || s[1] != h || s[2] != w {
                return Err(Error::Dataset(format!(
                    "sample {}: modality `{name}` has shape {s:?}, label is {h}×{w}",
                    self.id
                )));
            }
            if r.data().iter().any(|v| !(0.0..=255.0).contains(v)) {
                return Err(Error::Dataset(format!(
                    "sample {}: modality `{name}` has values outside [0, 255]",
                    self.id
                )));
            }
        }
        if let Some(&bad) = self
            .label
            .data
            .iter()
            .find(|&&v| v != IGNORE_LABEL && v as usize >= classes)
        {
            return Err(Error::Dataset(format!(
                "sample {}: label {bad} outside 0..{classes}",
                self.id
            )));
        }
        Ok(())
    }

    pub fn modalities(&self) -> Vec<String> {
        self.rasters.keys().cloned().collect()
    }

    /// Borrowed `(name, raster)` pairs, the model's input form.
    pub fn inputs(&self) -> Vec<(&str, &Tensor<f32>)> {
        self.rasters.iter().map(|(k, v)| (k.as_str(), v)).collect()
    }
}
