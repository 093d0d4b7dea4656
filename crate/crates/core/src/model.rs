//! The full network: per-modality encoders and necks, routed fusion, and the
//! two-pathway decoder.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::modality_channels;
use crate::decoder::{combine_predictions, Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, RoutingDecision, TopK};
use crate::neck::{Neck, NeckConfig};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Which logits drive inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InferenceHead {
    #[default]
    Combined,
    S0,
    S1,
}

impl fmt::Display for InferenceHead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InferenceHead::Combined => "combined",
            InferenceHead::S0 => "s0",
            InferenceHead::S1 => "s1",
        })
    }
}

impl FromStr for InferenceHead {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "combined" => Ok(Self::Combined),
            "s0" => Ok(Self::S0),
            "s1" => Ok(Self::S1),
            other => Err(format!("unknown inference head `{other}` (combined, s0, s1)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_stages: usize,
    pub window: usize,
    pub heads: Vec<usize>,
    pub patch_stride: usize,
    pub lora_rank: usize,
    pub top_k: TopK,
    pub renormalize_topk: bool,
    pub dropout: f64,
    pub classes: usize,
    pub inference_head: InferenceHead,
    pub topdown_levels: Option<Vec<usize>>,
    pub neck_per_modality: bool,
    pub freeze_neck: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        Self {
            embed_dim: enc.embed_dim,
            num_stages: enc.num_stages,
            window: enc.window,
            heads: enc.heads,
            patch_stride: enc.patch_stride,
            lora_rank: enc.lora_rank,
            top_k: TopK::Auto,
            renormalize_topk: false,
            dropout: 0.1,
            classes: 5,
            inference_head: InferenceHead::Combined,
            topdown_levels: None,
            neck_per_modality: false,
            freeze_neck: false,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            embed_dim: self.embed_dim,
            num_stages: self.num_stages,
            window: self.window,
            heads: self.heads.clone(),
            patch_stride: self.patch_stride,
            lora_rank: self.lora_rank,
        }
    }

    pub fn neck(&self) -> NeckConfig {
        let mut cfg = NeckConfig::new(self.embed_dim, self.num_stages);
        if let Some(levels) = &self.topdown_levels {
            cfg.topdown_levels = levels.clone();
        }
        cfg.per_modality = self.neck_per_modality;
        cfg.frozen = self.freeze_neck;
        cfg
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            dropout: self.dropout,
            ..DecoderConfig::new(self.embed_dim, self.classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        self.neck().validate()?;
        if self.classes == 0 {
            return Err(Error::Config("classes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if let TopK::Fixed(0) = self.top_k {
            return Err(Error::Config("top_k must be positive".into()));
        }
        Ok(())
    }
}

/// Logits and routing of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `𝒞 × H₀ × W₀`
    pub s0: Var,
    /// `𝒞 × H₀ × W₀`
    pub s1: Var,
    /// Input resolution.
    pub height: usize,
    pub width: usize,
    pub decisions: Vec<RoutingDecision>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    /// Registered modality names with channel counts, in canonical order.
    pub modalities: Vec<(String, usize)>,
    pub encoder: Encoder,
    pub neck: Neck,
    pub fusion: Fusion,
    pub decoder: Decoder,
}

/// Maps raw `[0, 255]` rasters to `[-1, 1]`.
pub fn normalize_input<S: Real>(raw: &Tensor<f32>) -> Tensor<S> {
    raw.map(|v| v / 127.5 - 1.0).cast()
}

impl Model {
    /// Builds the network and its freshly initialized parameters.
    pub fn new(cfg: ModelConfig, modalities: &[String], seed: u64) -> Result<(Self, ParamStore<f32>)> {
        cfg.validate()?;
        if modalities.is_empty() {
            return Err(Error::Config("at least one modality is required".into()));
        }
        let mut mods = Vec::with_capacity(modalities.len());
        for m in modalities {
            if mods.iter().any(|(n, _): &(String, usize)| n == m) {
                return Err(Error::Config(format!("modality `{m}` listed twice")));
            }
            mods.push((m.clone(), modality_channels(m)?));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(cfg.encoder(), &mods, &mut store, &mut rng)?;
        let widths: Vec<usize> = (0..cfg.num_stages).map(|i| cfg.encoder().stage_channels(i)).collect();
        let neck = Neck::new(cfg.neck(), &widths, modalities, &mut store, &mut rng)?;
        let mut fusion = Fusion::new(
            cfg.embed_dim,
            cfg.num_stages - 1,
            mods.len(),
            cfg.top_k,
            &mut store,
            &mut rng,
        )?;
        fusion.renormalize_topk = cfg.renormalize_topk;
        let decoder = Decoder::new(cfg.decoder(), &mut store, &mut rng)?;
        Ok((
            Self {
                cfg,
                modalities: mods,
                encoder,
                neck,
                fusion,
                decoder,
            },
            store,
        ))
    }

    pub fn modality_names(&self) -> Vec<String> {
        self.modalities.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Every parameter the optimizer is allowed to touch under this model's
    /// freeze policy, i.e. everything except the encoder base.
    pub fn frozen_params(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.base_params();
        if self.cfg.freeze_neck {
            ids.extend(self.neck.params());
        }
        ids
    }

    /// Forward pass over the supplied modalities (any nonempty subset of the
    /// registered ones, in any order). Inputs are raw `[0, 255]` rasters.
    /// Dropout is active only when `train_rng` is given.
    pub fn forward<S: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        inputs: &[(&str, &Tensor<f32>)],
        train_rng: Option<&mut R>,
    ) -> Result<ForwardOutput> {
        if inputs.is_empty() {
            return Err(Error::invalid("forward", "no modalities supplied"));
        }
        let mut ordered: Vec<(usize, &str, &Tensor<f32>)> = Vec::with_capacity(inputs.len());
        for &(name, raster) in inputs {
            let idx = self
                .modalities
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::UnknownModality(name.to_string()))?;
            if ordered.iter().any(|(i, _, _)| *i == idx) {
                return Err(Error::invalid("forward", format!("modality `{name}` supplied twice")));
            }
            ordered.push((idx, name, raster));
        }
        ordered.sort_by_key(|(i, _, _)| *i);

        let (height, width) = {
            let s = ordered[0].2.shape();
            (s[1], s[2])
        };
        let mut triples = Vec::with_capacity(ordered.len());
        for (_, name, raster) in ordered {
            let s = raster.shape();
            if s.len() != 3 || s[1] != height || s[2] != width {
                return Err(Error::invalid(
                    "forward",
                    format!("modality `{name}` has shape {s:?}, expected C×{height}×{width}"),
                ));
            }
            let x = g.constant(normalize_input(raster));
            let feats = self.encoder.encode(g, store, x, name)?;
            triples.push(self.neck.forward(g, store, &feats, name)?);
        }
        let (fused, decisions) = self.fusion.forward(g, store, &triples)?;
        let dual = self.decoder.forward(g, store, &fused, train_rng)?;
        Ok(ForwardOutput {
            s0: dual.s0,
            s1: dual.s1,
            height,
            width,
            decisions,
        })
    }

    /// Full-resolution logits of the configured inference head.
    pub fn head_logits<S: Real>(&self, g: &mut Graph<S>, out: &ForwardOutput) -> Result<Var> {
        let (h, w) = (out.height, out.width);
        match self.cfg.inference_head {
            InferenceHead::Combined => combine_predictions(g, out.s0, out.s1, h, w),
            InferenceHead::S0 => g.upsample_bilinear(out.s0, h, w),
            InferenceHead::S1 => g.upsample_bilinear(out.s1, h, w),
        }
    }

    /// Evaluation-mode logits `𝒞 × H × W`.
    pub fn logits(&self, store: &ParamStore<f32>, inputs: &[(&str, &Tensor<f32>)]) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, inputs, None::<&mut ChaCha8Rng>)?;
        let v = self.head_logits(&mut g, &out)?;
        Ok(g.value(v).clone())
    }

    /// Per-pixel argmax class (ties to the lower id), row-major `H × W`.
    pub fn predict(&self, store: &ParamStore<f32>, inputs: &[(&str, &Tensor<f32>)]) -> Result<Vec<u32>> {
        Ok(argmax_classes(&self.logits(store, inputs)?))
    }
}

/// Argmax over the leading (class) axis; ties resolve to the lowest class.
pub fn argmax_classes<S: Real>(logits: &Tensor<S>) -> Vec<u32> {
    let c = logits.shape()[0];
    let n = logits.numel() / c;
    let z = logits.data();
    (0..n)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if z[k * n + i] > z[best * n + i] {
                    best = k;
                }
            }
            best as u32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            embed_dim: 16,
            heads: vec![1, 2, 2],
            lora_rank: 2,
            classes: 3,
            ..ModelConfig::default()
        }
    }

    fn mods(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn forward_shapes() {
        let (model, store) = Model::new(tiny(), &mods(&["rgb", "depth"]), 1).unwrap();
        let rgb = Tensor::full(vec![3, 32, 32], 100.0);
        let depth = Tensor::full(vec![1, 32, 32], 50.0);
        let logits = model.logits(&store, &[("rgb", &rgb), ("depth", &depth)]).unwrap();
        assert_eq!(logits.shape(), &[3, 32, 32]);
        assert!(logits.all_finite());
        assert_eq!(model.predict(&store, &[("depth", &depth)]).unwrap().len(), 32 * 32);
    }

    #[test]
    fn input_order_is_irrelevant() {
        let (model, store) = Model::new(tiny(), &mods(&["rgb", "depth"]), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rgb = Tensor::<f32>::randn(vec![3, 16, 16], 60.0, &mut rng).map(|v| v.abs().min(255.0));
        let depth = Tensor::<f32>::randn(vec![1, 16, 16], 60.0, &mut rng).map(|v| v.abs().min(255.0));
        let a = model.logits(&store, &[("rgb", &rgb), ("depth", &depth)]).unwrap();
        let b = model.logits(&store, &[("depth", &depth), ("rgb", &rgb)]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_unknown_or_duplicate_modalities() {
        let (model, store) = Model::new(tiny(), &mods(&["rgb"]), 3).unwrap();
        let x = Tensor::zeros(vec![1, 16, 16]);
        assert!(matches!(
            model.logits(&store, &[("lidar", &x)]),
            Err(Error::UnknownModality(_))
        ));
        let rgb = Tensor::zeros(vec![3, 16, 16]);
        assert!(model.logits(&store, &[("rgb", &rgb), ("rgb", &rgb)]).is_err());
        assert!(Model::new(tiny(), &mods(&["rgb", "rgb"]), 0).is_err());
        assert!(Model::new(tiny(), &mods(&["thermal"]), 0).is_err());
    }

    #[test]
    fn only_encoder_base_is_frozen() {
        let (model, store) = Model::new(tiny(), &mods(&["rgb", "event"]), 4).unwrap();
        let frozen: Vec<ParamId> = store.iter().filter(|(_, p)| p.frozen).map(|(id, _)| id).collect();
        let mut expect = model.frozen_params();
        expect.sort();
        assert_eq!(frozen, expect);
        assert!(store.iter().any(|(_, p)| p.name.starts_with("lora.event") && !p.frozen));
    }

    #[test]
    fn argmax_ties_pick_lower_class() {
        let t = Tensor::from_f64(vec![3, 1, 2], &[1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(argmax_classes::<f32>(&t), vec![0, 1]);
    }

    #[test]
    fn head_names_round_trip() {
        for h in [InferenceHead::Combined, InferenceHead::S0, InferenceHead::S1] {
            assert_eq!(h.to_string().parse::<InferenceHead>().unwrap(), h);
        }
        assert!("both".parse::<InferenceHead>().is_err());
    }
}
