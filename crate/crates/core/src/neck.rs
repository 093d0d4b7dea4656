//! Feature pyramid neck: lateral 1×1 projections, averaged top-down fusion,
//! and the SFM / IFP / FFP triple.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Deep semantic map plus the two channel-reduced high-resolution maps.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTriple {
    /// `d × H_n × W_n`
    pub sfm: Var,
    /// `d/4 × H₁ × W₁`
    pub ifp: Var,
    /// `d/8 × H₀ × W₀`
    pub ffp: Var,
    /// Modality name, or `"fused"`.
    pub tag: String,
}

#[derive(Debug, Clone)]
pub struct Conv1x1 {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv1x1 {
    fn register<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        prefix: &str,
        cin: usize,
        cout: usize,
        frozen: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.register(
            format!("{prefix}.weight"),
            Tensor::randn(vec![cout, cin], (1.0 / cin as f64).sqrt(), rng),
            frozen,
        )?;
        let bias = store.register(format!("{prefix}.bias"), Tensor::zeros(vec![cout]), frozen)?;
        Ok(Self { weight, bias })
    }

    pub fn apply<S: Real>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv1x1(x, w, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct NeckWeights {
    pub lateral: Vec<Conv1x1>,
    pub ifp: Conv1x1,
    pub ffp: Conv1x1,
}

#[derive(Debug, Clone)]
pub struct NeckConfig {
    pub embed_dim: usize,
    pub num_stages: usize,
    /// Levels that receive the upsampled deeper map.
    pub topdown_levels: Vec<usize>,
    pub per_modality: bool,
    pub frozen: bool,
}

impl NeckConfig {
    pub fn new(embed_dim: usize, num_stages: usize) -> Self {
        Self {
            embed_dim,
            num_stages,
            topdown_levels: (0..num_stages.saturating_sub(1)).collect(),
            per_modality: false,
            frozen: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.embed_dim % 8 != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of 8",
                self.embed_dim
            )));
        }
        if self.num_stages < 2 {
            return Err(Error::Config(format!(
                "need at least 2 stages for the feature triple, got {}",
                self.num_stages
            )));
        }
        check_levels(&self.topdown_levels, self.num_stages)
    }
}

fn check_levels(levels: &[usize], num_stages: usize) -> Result<()> {
    let deepest = num_stages - 1;
    match levels.iter().find(|&&i| i >= deepest) {
        Some(&i) => Err(Error::invalid(
            "topdown_fuse",
            format!("level {i} has no deeper source (deepest stage is {deepest})"),
        )),
        None => Ok(()),
    }
}

#[derive(Debug, Clone)]
pub struct Neck {
    pub cfg: NeckConfig,
    weights: BTreeMap<String, NeckWeights>,
}

const SHARED: &str = "shared";

impl Neck {
    /// `stage_channels[i]` is `C_i`. With `per_modality`, one weight set per
    /// entry of `modalities`; otherwise a single shared set.
    pub fn new<R: Rng + ?Sized>(
        cfg: NeckConfig,
        stage_channels: &[usize],
        modalities: &[String],
        store: &mut ParamStore<f32>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if stage_channels.len() != cfg.num_stages {
            return Err(Error::Config(format!(
                "{} stage widths for {} stages",
                stage_channels.len(),
                cfg.num_stages
            )));
        }
        let keys: Vec<String> = if cfg.per_modality {
            modalities.to_vec()
        } else {
            vec![SHARED.to_string()]
        };
        let d = cfg.embed_dim;
        let mut weights = BTreeMap::new();
        for key in keys {
            let prefix = if cfg.per_modality { format!("neck.{key}") } else { "neck".to_string() };
            let lateral = stage_channels
                .iter()
                .enumerate()
                .map(|(i, &c)| Conv1x1::register(store, &format!("{prefix}.lateral{i}"), c, d, cfg.frozen, rng))
                .collect::<Result<Vec<_>>>()?;
            let ifp = Conv1x1::register(store, &format!("{prefix}.ifp"), d, d / 4, cfg.frozen, rng)?;
            let ffp = Conv1x1::register(store, &format!("{prefix}.ffp"), d, d / 8, cfg.frozen, rng)?;
            weights.insert(key, NeckWeights { lateral, ifp, ffp });
        }
        Ok(Self { cfg, weights })
    }

    pub fn weights_for(&self, modality: &str) -> Result<&NeckWeights> {
        let key = if self.cfg.per_modality { modality } else { SHARED };
        self.weights
            .get(key)
            .ok_or_else(|| Error::UnknownModality(modality.to_string()))
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.weights
            .values()
            .flat_map(|w| {
                w.lateral
                    .iter()
                    .chain([&w.ifp, &w.ffp])
                    .flat_map(Conv1x1::params)
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Encoder features of one modality → its feature triple.
    pub fn forward<S: Real>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        feats: &[Var],
        modality: &str,
    ) -> Result<FeatureTriple> {
        let w = self.weights_for(modality)?;
        if feats.len() != w.lateral.len() {
            return Err(Error::invalid(
                "neck",
                format!("{} feature maps for {} stages", feats.len(), w.lateral.len()),
            ));
        }
        let z = feats
            .iter()
            .enumerate()
            .map(|(i, &x)| lateral(g, store, w, i, x))
            .collect::<Result<Vec<_>>>()?;
        let y = topdown_fuse(g, &z, &self.cfg.topdown_levels)?;
        project_triple(g, store, w, &y, modality)
    }
}

/// `Z_i = conv1x1(X_i)` to `d` channels.
pub fn lateral<S: Real>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    w: &NeckWeights,
    stage: usize,
    x: Var,
) -> Result<Var> {
    let conv = w.lateral.get(stage).ok_or_else(|| {
        Error::invalid("lateral", format!("stage {stage} outside 0..{}", w.lateral.len()))
    })?;
    conv.apply(g, store, x)
}

/// `Y_n = Z_n`; `Y_i = (Z_i + up(Y_{i+1}))/2` for `i ∈ levels`, else `Y_i = Z_i`.
pub fn topdown_fuse<S: Real>(g: &mut Graph<S>, z: &[Var], levels: &[usize]) -> Result<Vec<Var>> {
    if z.is_empty() {
        return Err(Error::invalid("topdown_fuse", "no stages"));
    }
    check_levels(levels, z.len())?;
    let n = z.len() - 1;
    let mut y = z.to_vec();
    for i in (0..n).rev() {
        if !levels.contains(&i) {
            continue;
        }
        let (h, w) = {
            let s = g.shape(z[i]);
            (s[1], s[2])
        };
        let up = g.upsample_bilinear(y[i + 1], h, w)?;
        let s = g.add(z[i], up)?;
        y[i] = g.scale(s, 0.5)?;
    }
    Ok(y)
}

pub fn project_triple<S: Real>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    w: &NeckWeights,
    y: &[Var],
    tag: &str,
) -> Result<FeatureTriple> {
    if y.len() < 2 {
        return Err(Error::invalid("project_triple", format!("{} levels, need ≥ 2", y.len())));
    }
    let d = g.shape(y[0])[0];
    if d % 8 != 0 {
        return Err(Error::invalid("project_triple", format!("{d} channels not divisible by 8")));
    }
    Ok(FeatureTriple {
        sfm: *y.last().unwrap(),
        ifp: w.ifp.apply(g, store, y[1])?,
        ffp: w.ffp.apply(g, store, y[0])?,
        tag: tag.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(d: usize, per_modality: bool) -> (Neck, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cfg = NeckConfig::new(d, 3);
        cfg.per_modality = per_modality;
        let mods = vec!["rgb".to_string(), "depth".to_string()];
        let neck = Neck::new(cfg, &[d, 2 * d, 4 * d], &mods, &mut store, &mut rng).unwrap();
        (neck, store)
    }

    #[test]
    fn identity_lateral_passes_through() {
        let mut store = ParamStore::<f64>::new();
        let weight = store.register("w", Tensor::identity(4), false).unwrap();
        let bias = store.register("b", Tensor::zeros(vec![4]), false).unwrap();
        let conv = Conv1x1 { weight, bias };
        let nw = NeckWeights { lateral: vec![conv.clone()], ifp: conv.clone(), ffp: conv };
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = g.constant(Tensor::randn(vec![4, 3, 5], 1.0, &mut rng));
        let z = lateral(&mut g, &store, &nw, 0, x).unwrap();
        assert_eq!(g.value(z), g.value(x));
        assert!(lateral(&mut g, &store, &nw, 1, x).is_err());
    }

    #[test]
    fn averaging_constants() {
        let mut g = Graph::<f64>::new();
        let z0 = g.constant(Tensor::full(vec![2, 4, 4], 2.0));
        let z1 = g.constant(Tensor::full(vec![2, 2, 2], 4.0));
        let y = topdown_fuse(&mut g, &[z0, z1], &[0]).unwrap();
        assert!(g.value(y[0]).data().iter().all(|&v| v == 3.0));
        assert_eq!(y[1], z1);

        let y = topdown_fuse(&mut g, &[z0, z1], &[]).unwrap();
        assert_eq!(y, vec![z0, z1]);
        assert!(topdown_fuse(&mut g, &[z0, z1], &[1]).is_err());
        assert!(topdown_fuse(&mut g, &[z0, z1], &[5]).is_err());
    }

    #[test]
    fn triple_channels_and_extents() {
        let (neck, store) = build(32, false);
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feats = vec![
            g.constant(Tensor::randn(vec![32, 16, 16], 1.0, &mut rng)),
            g.constant(Tensor::randn(vec![64, 8, 8], 1.0, &mut rng)),
            g.constant(Tensor::randn(vec![128, 4, 4], 1.0, &mut rng)),
        ];
        let t = neck.forward(&mut g, &store, &feats, "rgb").unwrap();
        assert_eq!(g.shape(t.sfm), &[32, 4, 4]);
        assert_eq!(g.shape(t.ifp), &[8, 8, 8]);
        assert_eq!(g.shape(t.ffp), &[4, 16, 16]);
        assert_eq!(t.tag, "rgb");
    }

    #[test]
    fn zero_projection_gives_bias() {
        let mut store = ParamStore::<f64>::new();
        let w = store.register("w", Tensor::zeros(vec![1, 8]), false).unwrap();
        let b = store.register("b", Tensor::full(vec![1], 1.5), false).unwrap();
        let conv = Conv1x1 { weight: w, bias: b };
        let nw = NeckWeights { lateral: vec![], ifp: conv.clone(), ffp: conv };
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y0 = g.constant(Tensor::randn(vec![8, 6, 6], 1.0, &mut rng));
        let y1 = g.constant(Tensor::randn(vec![8, 3, 3], 1.0, &mut rng));
        let t = project_triple(&mut g, &store, &nw, &[y0, y1], "fused").unwrap();
        assert!(g.value(t.ffp).data().iter().all(|&v| v == 1.5));
        assert_eq!(g.shape(t.ffp), &[1, 6, 6]);
    }

    #[test]
    fn rejects_non_multiple_of_eight() {
        assert!(NeckConfig::new(12, 3).validate().is_err());
        let mut cfg = NeckConfig::new(16, 3);
        cfg.topdown_levels = vec![2];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn shared_versus_per_modality_weights() {
        let (shared, _) = build(8, false);
        assert_eq!(
            shared.weights_for("rgb").unwrap().ifp.weight,
            shared.weights_for("depth").unwrap().ifp.weight
        );
        let (split, _) = build(8, true);
        assert_ne!(
            split.weights_for("rgb").unwrap().ifp.weight,
            split.weights_for("depth").unwrap().ifp.weight
        );
        assert!(split.weights_for("lidar").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn topdown_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let zs = [
                Tensor::<f64>::randn(vec![2, 8, 8], 1.0, &mut rng),
                Tensor::randn(vec![2, 4, 4], 1.0, &mut rng),
                Tensor::randn(vec![2, 2, 2], 1.0, &mut rng),
            ];
            let mut g = Graph::new();
            let a: Vec<Var> = zs.iter().map(|t| g.constant(t.clone())).collect();
            let b: Vec<Var> = zs.iter().map(|t| g.constant(t.map(|v| v * alpha))).collect();
            let ya = topdown_fuse(&mut g, &a, &[0, 1]).unwrap();
            let yb = topdown_fuse(&mut g, &b, &[0, 1]).unwrap();
            for (p, q) in ya.iter().zip(&yb) {
                let scaled = g.value(*p).map(|v| v * alpha);
                prop_assert!(scaled.max_abs_diff(g.value(*q)) < 1e-6);
            }
        }

        #[test]
        fn unlisted_levels_are_untouched(seed in any::<u64>(), mask in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::<f32>::new();
            let z: Vec<Var> = [8usize, 4, 2]
                .iter()
                .map(|&s| g.constant(Tensor::randn(vec![3, s, s], 1.0, &mut rng)))
                .collect();
            let levels: Vec<usize> = (0..2).filter(|i| mask & (1 << i) != 0).collect();
            let y = topdown_fuse(&mut g, &z, &levels).unwrap();
            for i in 0..3 {
                if !levels.contains(&i) {
                    prop_assert_eq!(g.value(y[i]), g.value(z[i]));
                }
            }
        }
    }
}
