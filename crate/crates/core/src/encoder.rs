//! Per-modality hierarchical windowed-attention backbone.
//!
//! Base weights (patch embedding, attention projections, inter-stage
//! projections) are frozen after random initialization. Each modality owns a
//! set of LoRA adapters that add low-rank updates to the query and value
//! projections of every stage.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var, GATHER_ZERO};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub num_stages: usize,
    pub window: usize,
    pub heads: Vec<usize>,
    pub patch_stride: usize,
    pub lora_rank: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            num_stages: 3,
            window: 4,
            heads: vec![1, 2, 4],
            patch_stride: 4,
            lora_rank: 32,
        }
    }
}

impl EncoderConfig {
    /// Channel count `d · 2^i` of stage `i`.
    pub fn stage_channels(&self, i: usize) -> usize {
        self.embed_dim << i
    }

    /// Downsampling factor `s₀ · 2^i` of stage `i` (`2^(i+2)` for `s₀ = 4`).
    pub fn stage_stride(&self, i: usize) -> usize {
        self.patch_stride << i
    }

    /// Spatial extents of stage `i` for an `h×w` input (padding rounds up).
    pub fn stage_extent(&self, i: usize, h: usize, w: usize) -> (usize, usize) {
        let (mut sh, mut sw) = (h.div_ceil(self.patch_stride), w.div_ceil(self.patch_stride));
        for _ in 0..i {
            sh = sh.div_ceil(2);
            sw = sw.div_ceil(2);
        }
        (sh, sw)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.embed_dim == 0 || self.num_stages == 0 || self.window == 0 || self.patch_stride == 0 {
            return bad("embed_dim, stages, window and patch_stride must be positive".into());
        }
        if self.heads.len() != self.num_stages {
            return bad(format!(
                "heads lists {} entries for {} stages",
                self.heads.len(),
                self.num_stages
            ));
        }
        for (i, &h) in self.heads.iter().enumerate() {
            if h == 0 || self.stage_channels(i) % h != 0 {
                return bad(format!(
                    "stage {i}: {h} heads do not divide {} channels",
                    self.stage_channels(i)
                ));
            }
        }
        if self.lora_rank == 0 || self.lora_rank > self.embed_dim {
            return bad(format!(
                "lora rank {} must be in 1..={}",
                self.lora_rank, self.embed_dim
            ));
        }
        Ok(())
    }
}

/// Frozen patch embedding for one input channel count.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub channels: usize,
    /// `(s₀·s₀·C) × d`
    pub weight: ParamId,
    /// `d`
    pub bias: ParamId,
}

/// Frozen attention block and inter-stage projection of one stage.
#[derive(Debug, Clone)]
pub struct StageWeights {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub o: ParamId,
    /// `C_i × 2C_i`, absent on the last stage.
    pub down: Option<ParamId>,
}

/// Low-rank query/value update for one attention block of one modality.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub modality: String,
    pub stage: usize,
    pub rank: usize,
    /// `C_i × r`
    pub q_a: ParamId,
    /// `r × C_i`
    pub q_b: ParamId,
    pub v_a: ParamId,
    pub v_b: ParamId,
}

impl LoraAdapter {
    pub fn params(&self) -> [ParamId; 4] {
        [self.q_a, self.q_b, self.v_a, self.v_b]
    }

    /// `ΔQ = W_a^Q · W_b^Q` as a dense `C_i × C_i` matrix.
    pub fn delta_q<S: Real>(&self, store: &ParamStore<S>) -> Tensor<S> {
        dense_product(store.value(self.q_a), store.value(self.q_b))
    }

    pub fn delta_v<S: Real>(&self, store: &ParamStore<S>) -> Tensor<S> {
        dense_product(store.value(self.v_a), store.value(self.v_b))
    }
}

fn dense_product<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k, p) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![S::zero(); m * p];
    crate::numerics::kernels::mm_acc(a.data(), b.data(), &mut out, m, k, p);
    Tensor::new(vec![m, p], out).expect("product shape")
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    patch: BTreeMap<usize, PatchEmbed>,
    stages: Vec<StageWeights>,
    adapters: BTreeMap<String, Vec<LoraAdapter>>,
    channels: BTreeMap<String, usize>,
}

impl Encoder {
    /// Registers frozen base weights plus one adapter set per `(modality, channels)`.
    pub fn new<R: Rng + ?Sized>(
        cfg: EncoderConfig,
        modalities: &[(String, usize)],
        store: &mut ParamStore<f32>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let s0 = cfg.patch_stride;

        let mut patch = BTreeMap::new();
        for &(_, c) in modalities {
            if patch.contains_key(&c) {
                continue;
            }
            let fan_in = s0 * s0 * c;
            let weight = store.register(
                format!("encoder.patch_embed.c{c}.weight"),
                Tensor::randn(vec![fan_in, d], (1.0 / fan_in as f64).sqrt(), rng),
                true,
            )?;
            let bias = store.register(
                format!("encoder.patch_embed.c{c}.bias"),
                Tensor::randn(vec![d], 0.02, rng),
                true,
            )?;
            patch.insert(c, PatchEmbed { channels: c, weight, bias });
        }

        let mut stages = Vec::with_capacity(cfg.num_stages);
        for i in 0..cfg.num_stages {
            let c = cfg.stage_channels(i);
            let std = (1.0 / c as f64).sqrt();
            let mut proj = |name: &str, rng: &mut R| {
                store.register(
                    format!("encoder.stage{i}.attn.{name}"),
                    Tensor::randn(vec![c, c], std, rng),
                    true,
                )
            };
            let q = proj("q", rng)?;
            let k = proj("k", rng)?;
            let v = proj("v", rng)?;
            let o = proj("o", rng)?;
            let down = if i + 1 < cfg.num_stages {
                Some(store.register(
                    format!("encoder.stage{i}.down"),
                    Tensor::randn(vec![c, 2 * c], std, rng),
                    true,
                )?)
            } else {
                None
            };
            stages.push(StageWeights { q, k, v, o, down });
        }

        let mut enc = Encoder {
            cfg,
            patch,
            stages,
            adapters: BTreeMap::new(),
            channels: BTreeMap::new(),
        };
        for (name, c) in modalities {
            enc.register_modality(name, *c, store, rng)?;
        }
        Ok(enc)
    }

    fn register_modality<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        channels: usize,
        store: &mut ParamStore<f32>,
        rng: &mut R,
    ) -> Result<()> {
        let r = self.cfg.lora_rank;
        let a_std = (1.0 / r as f64).sqrt();
        let mut set = Vec::with_capacity(self.cfg.num_stages);
        for i in 0..self.cfg.num_stages {
            let c = self.cfg.stage_channels(i);
            let prefix = format!("lora.{name}.stage{i}");
            let q_a = store.register(format!("{prefix}.q_a"), Tensor::randn(vec![c, r], a_std, rng), false)?;
            let q_b = store.register(format!("{prefix}.q_b"), Tensor::zeros(vec![r, c]), false)?;
            let v_a = store.register(format!("{prefix}.v_a"), Tensor::randn(vec![c, r], a_std, rng), false)?;
            let v_b = store.register(format!("{prefix}.v_b"), Tensor::zeros(vec![r, c]), false)?;
            set.push(LoraAdapter {
                modality: name.to_string(),
                stage: i,
                rank: r,
                q_a,
                q_b,
                v_a,
                v_b,
            });
        }
        self.adapters.insert(name.to_string(), set);
        self.channels.insert(name.to_string(), channels);
        Ok(())
    }

    pub fn adapters(&self, modality: &str) -> Option<&[LoraAdapter]> {
        self.adapters.get(modality).map(Vec::as_slice)
    }

    pub fn all_adapters(&self) -> impl Iterator<Item = &LoraAdapter> + '_ {
        self.adapters.values().flatten()
    }

    pub fn stages(&self) -> &[StageWeights] {
        &self.stages
    }

    pub fn patch_embed_for(&self, channels: usize) -> Option<&PatchEmbed> {
        self.patch.get(&channels)
    }

    /// Every frozen base parameter.
    pub fn base_params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.patch.values().flat_map(|p| [p.weight, p.bias]).collect();
        for s in &self.stages {
            ids.extend([s.q, s.k, s.v, s.o]);
            ids.extend(s.down);
        }
        ids
    }

    /// Multi-scale features `X_i` (`C_i × H_i × W_i`, `i = 0..n`) of a
    /// `C × H × W` input for `modality`.
    pub fn encode<S: Real>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        modality: &str,
    ) -> Result<Vec<Var>> {
        let adapters = self
            .adapters
            .get(modality)
            .ok_or_else(|| Error::UnknownModality(modality.to_string()))?;
        self.encode_with(g, store, x, Some(adapters))
    }

    /// Forward pass through the frozen base only (no adapters).
    pub fn encode_base<S: Real>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Vec<Var>> {
        self.encode_with(g, store, x, None)
    }

    fn encode_with<S: Real>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        adapters: Option<&[LoraAdapter]>,
    ) -> Result<Vec<Var>> {
        let c = g.shape(x)[0];
        let pe = self.patch.get(&c).ok_or_else(|| {
            Error::invalid("encode", format!("no patch embedding for {c}-channel input"))
        })?;
        let (mut tokens, mut h, mut w) = patch_embed(g, store, x, pe, self.cfg.patch_stride)?;
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            let adapter = adapters.map(|a| &a[i]);
            tokens = window_attention(
                g,
                store,
                tokens,
                (h, w),
                stage,
                self.cfg.heads[i],
                self.cfg.window,
                adapter,
            )?;
            let ch = g.shape(tokens)[1];
            let t = g.transpose(tokens)?;
            let fmap = g.reshape(t, vec![ch, h, w])?;
            out.push(fmap);
            if let Some(down) = stage.down {
                let pooled = g.avg_pool2(fmap)?;
                h = h.div_ceil(2);
                w = w.div_ceil(2);
                let flat = g.reshape(pooled, vec![ch, h * w])?;
                let t = g.transpose(flat)?;
                let dw = g.param(store, down);
                tokens = g.matmul(t, dw)?;
            }
        }
        Ok(out)
    }
}

/// Splits `x` (`C × H × W`) into non-overlapping `s×s` patches (zero-padded
/// at the far edges) and maps each flattened patch to `d` dims. Returns the
/// token matrix `[H₀·W₀ × d]` and the token grid extents.
pub fn patch_embed<S: Real>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    x: Var,
    pe: &PatchEmbed,
    stride: usize,
) -> Result<(Var, usize, usize)> {
    let (c, h, w) = match *g.shape(x) {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::invalid("patch_embed", format!("expected C×H×W, got {s:?}"))),
    };
    if c != pe.channels {
        return Err(Error::Shape {
            op: "patch_embed",
            lhs: g.shape(x).to_vec(),
            rhs: store.value(pe.weight).shape().to_vec(),
        });
    }
    let (h0, w0) = (h.div_ceil(stride), w.div_ceil(stride));
    let patch_len = c * stride * stride;
    let mut index = Vec::with_capacity(h0 * w0 * patch_len);
    for py in 0..h0 {
        for px in 0..w0 {
            for ch in 0..c {
                for dy in 0..stride {
                    for dx in 0..stride {
                        let (y, xx) = (py * stride + dy, px * stride + dx);
                        index.push(if y < h && xx < w {
                            (ch * h * w + y * w + xx) as u32
                        } else {
                            GATHER_ZERO
                        });
                    }
                }
            }
        }
    }
    let patches = g.gather(x, Arc::new(index), vec![h0 * w0, patch_len])?;
    let (wv, bv) = (g.param(store, pe.weight), g.param(store, pe.bias));
    let proj = g.matmul(patches, wv)?;
    Ok((g.add_bias(proj, bv)?, h0, w0))
}

/// Index maps between a token matrix `[N × C]` on an `h×w` grid and the
/// window-batched layout `[windows·heads × win² × C/heads]`.
struct WindowLayout {
    partition: Arc<Vec<u32>>,
    merge: Arc<Vec<u32>>,
    batch: usize,
    tokens_per_window: usize,
    head_dim: usize,
}

impl WindowLayout {
    fn new(h: usize, w: usize, channels: usize, heads: usize, win: usize) -> Self {
        let (nwy, nwx) = (h.div_ceil(win), w.div_ceil(win));
        let dh = channels / heads;
        let tpw = win * win;
        let batch = nwy * nwx * heads;
        let mut partition = vec![GATHER_ZERO; batch * tpw * dh];
        let mut merge = vec![0u32; h * w * channels];
        for wy in 0..nwy {
            for wx in 0..nwx {
                for head in 0..heads {
                    let b = (wy * nwx + wx) * heads + head;
                    for ty in 0..win {
                        for tx in 0..win {
                            let (y, x) = (wy * win + ty, wx * win + tx);
                            if y >= h || x >= w {
                                continue;
                            }
                            let t = ty * win + tx;
                            for e in 0..dh {
                                let dst = (b * tpw + t) * dh + e;
                                let src = (y * w + x) * channels + head * dh + e;
                                partition[dst] = src as u32;
                                merge[src] = dst as u32;
                            }
                        }
                    }
                }
            }
        }
        Self {
            partition: Arc::new(partition),
            merge: Arc::new(merge),
            batch,
            tokens_per_window: tpw,
            head_dim: dh,
        }
    }

    fn split<S: Real>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        g.gather(
            x,
            self.partition.clone(),
            vec![self.batch, self.tokens_per_window, self.head_dim],
        )
    }
}

/// One windowed multi-head self-attention block with residual connection.
/// Query and value use the frozen projections plus the adapter's low-rank
/// update; the key uses the frozen projection only.
#[allow(clippy::too_many_arguments)]
pub fn window_attention<S: Real>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    x: Var,
    (h, w): (usize, usize),
    stage: &StageWeights,
    heads: usize,
    window: usize,
    adapter: Option<&LoraAdapter>,
) -> Result<Var> {
    let (n, c) = match *g.shape(x) {
        [n, c] => (n, c),
        ref s => return Err(Error::invalid("window_attention", format!("expected N×C tokens, got {s:?}"))),
    };
    if n != h * w {
        return Err(Error::invalid(
            "window_attention",
            format!("{n} tokens on a {h}×{w} grid"),
        ));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::invalid(
            "window_attention",
            format!("{heads} heads do not divide {c} channels"),
        ));
    }

    let wq = g.param(store, stage.q);
    let wk = g.param(store, stage.k);
    let wv = g.param(store, stage.v);
    let wo = g.param(store, stage.o);

    let mut q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let mut v = g.matmul(x, wv)?;
    if let Some(a) = adapter {
        q = lora_update(g, store, x, q, a.q_a, a.q_b)?;
        v = lora_update(g, store, x, v, a.v_a, a.v_b)?;
    }

    let layout = WindowLayout::new(h, w, c, heads, window);
    let qw = layout.split(g, q)?;
    let kw = layout.split(g, k)?;
    let vw = layout.split(g, v)?;
    let scores = g.bmm_nt(qw, kw)?;
    let scores = g.scale(scores, 1.0 / (layout.head_dim as f64).sqrt())?;
    let attn = g.softmax(scores, 2)?;
    let ctx = g.bmm(attn, vw)?;
    let merged = g.gather(ctx, layout.merge.clone(), vec![n, c])?;
    let y = g.matmul(merged, wo)?;
    g.add(x, y)
}

/// `base + (x · A) · B`
fn lora_update<S: Real>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    x: Var,
    base: Var,
    a: ParamId,
    b: ParamId,
) -> Result<Var> {
    let (av, bv) = (g.param(store, a), g.param(store, b));
    let low = g.matmul(x, av)?;
    let delta = g.matmul(low, bv)?;
    g.add(base, delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 8,
            num_stages: 3,
            window: 2,
            heads: vec![1, 2, 2],
            patch_stride: 4,
            lora_rank: 2,
        }
    }

    fn setup(mods: &[(&str, usize)]) -> (Encoder, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mods: Vec<(String, usize)> = mods.iter().map(|(n, c)| (n.to_string(), *c)).collect();
        let enc = Encoder::new(small_cfg(), &mods, &mut store, &mut rng).unwrap();
        (enc, store)
    }

    #[test]
    fn patch_embed_scalar_affine() {
        let mut store = ParamStore::<f64>::new();
        let weight = store.register("w", Tensor::from_f64(vec![1, 1], &[2.0]).unwrap(), true).unwrap();
        let bias = store.register("b", Tensor::from_f64(vec![1], &[0.5]).unwrap(), true).unwrap();
        let pe = PatchEmbed { channels: 1, weight, bias };
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_f64(vec![1, 1, 1], &[3.0]).unwrap());
        let (tok, h, w) = patch_embed(&mut g, &store, x, &pe, 1).unwrap();
        assert_eq!((h, w), (1, 1));
        assert_eq!(g.value(tok).data(), &[6.5]);
    }

    #[test]
    fn patch_embed_shape_and_zero_weights() {
        let mut store = ParamStore::<f32>::new();
        let weight = store.register("w", Tensor::zeros(vec![3 * 16, 32]), true).unwrap();
        let bias = store.register("b", Tensor::full(vec![32], 0.25), true).unwrap();
        let pe = PatchEmbed { channels: 3, weight, bias };
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = g.constant(Tensor::randn(vec![3, 64, 64], 1.0, &mut rng));
        let (tok, h, w) = patch_embed(&mut g, &store, x, &pe, 4).unwrap();
        assert_eq!((h, w), (16, 16));
        assert_eq!(g.shape(tok), &[256, 32]);
        assert!(g.value(tok).data().iter().all(|&v| v == 0.25));

        let bad = g.constant(Tensor::zeros(vec![1, 64, 64]));
        assert!(patch_embed(&mut g, &store, bad, &pe, 4).is_err());
    }

    #[test]
    fn single_token_attention_passes_value_through() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = 4;
        let mk = |s: &mut ParamStore<f64>, n: &str, t: Tensor<f64>| s.register(n, t, true).unwrap();
        let q = mk(&mut store, "q", Tensor::randn(vec![c, c], 1.0, &mut rng));
        let k = mk(&mut store, "k", Tensor::randn(vec![c, c], 1.0, &mut rng));
        let v = mk(&mut store, "v", Tensor::randn(vec![c, c], 1.0, &mut rng));
        let o = mk(&mut store, "o", Tensor::identity(c));
        let stage = StageWeights { q, k, v, o, down: None };
        let mut g = Graph::new();
        let xt = Tensor::randn(vec![1, c], 1.0, &mut rng);
        let x = g.constant(xt.clone());
        let y = window_attention(&mut g, &store, x, (1, 1), &stage, 1, 1, None).unwrap();
        // softmax over a single key is 1, so y = x + x·W_v
        let mut expect = xt.data().to_vec();
        for j in 0..c {
            for t in 0..c {
                expect[j] += xt.data()[t] * store.value(v).data()[t * c + j];
            }
        }
        for (a, b) in g.value(y).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn heads_must_divide_channels() {
        let (enc, store) = setup(&[("rgb", 3)]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![4, 8]));
        let err = window_attention(&mut g, &store, x, (2, 2), &enc.stages()[0], 3, 2, None);
        assert!(err.is_err());
    }

    #[test]
    fn encode_shapes_follow_stage_arithmetic() {
        let (enc, store) = setup(&[("rgb", 3)]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![3, 64, 64], 0.5));
        let feats = enc.encode(&mut g, &store, x, "rgb").unwrap();
        let shapes: Vec<Vec<usize>> = feats.iter().map(|&f| g.shape(f).to_vec()).collect();
        assert_eq!(shapes, vec![vec![8, 16, 16], vec![16, 8, 8], vec![32, 4, 4]]);
        assert!(matches!(
            enc.encode(&mut g, &store, x, "thermal"),
            Err(Error::UnknownModality(_))
        ));
    }

    #[test]
    fn non_divisible_inputs_are_padded() {
        let (enc, store) = setup(&[("depth", 1)]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![1, 30, 21], 0.5));
        let feats = enc.encode(&mut g, &store, x, "depth").unwrap();
        assert_eq!(g.shape(feats[0]), &[8, 8, 6]);
        assert_eq!(g.shape(feats[2]), &[32, 2, 2]);
    }

    #[test]
    fn fresh_adapters_are_exact_no_ops() {
        let (enc, store) = setup(&[("rgb", 3)]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = Tensor::randn(vec![3, 32, 32], 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let with = enc.encode(&mut g, &store, x, "rgb").unwrap();
        let base = enc.encode_base(&mut g, &store, x).unwrap();
        for (a, b) in with.iter().zip(&base) {
            assert_eq!(g.value(*a), g.value(*b));
        }
    }

    #[test]
    fn adapters_are_independent_per_modality() {
        let (enc, mut store) = setup(&[("depth", 1), ("event", 1)]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = Tensor::randn(vec![1, 32, 32], 1.0, &mut rng);

        let run = |store: &ParamStore<f32>| {
            let mut g = Graph::new();
            let x = g.constant(input.clone());
            let d = enc.encode(&mut g, store, x, "depth").unwrap();
            let e = enc.encode(&mut g, store, x, "event").unwrap();
            (
                d.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>(),
                e.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>(),
            )
        };
        let (d0, e0) = run(&store);
        // identical inputs and (zero-update) adapters give identical features
        assert_eq!(d0, e0);

        for a in enc.adapters("depth").unwrap() {
            let qb = store.get_mut(a.q_b);
            qb.value = Tensor::randn(qb.value.shape().to_vec(), 0.5, &mut rng);
        }
        let (d1, e1) = run(&store);
        assert_ne!(d0, d1);
        assert_eq!(e0, e1);
    }

    #[test]
    fn window_locality_within_one_block() {
        let (enc, store) = setup(&[("rgb", 3)]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (h, w, c) = (4, 4, 8);
        let tokens = Tensor::randn(vec![h * w, c], 1.0, &mut rng);
        let mut perturbed = tokens.clone();
        // token (0, 0) lives in window (0, 0) for window size 2
        perturbed.data_mut()[0] += 1.0;

        let run = |t: &Tensor<f32>| {
            let mut g = Graph::new();
            let x = g.constant(t.clone());
            let y = window_attention(&mut g, &store, x, (h, w), &enc.stages()[0], 1, 2, None).unwrap();
            g.value(y).clone()
        };
        let (a, b) = (run(&tokens), run(&perturbed));
        for y in 0..h {
            for x in 0..w {
                let same_window = y < 2 && x < 2;
                let t = y * w + x;
                let row_a = &a.data()[t * c..(t + 1) * c];
                let row_b = &b.data()[t * c..(t + 1) * c];
                if same_window {
                    assert_ne!(row_a, row_b, "token ({y},{x}) should change");
                } else {
                    assert_eq!(row_a, row_b, "token ({y},{x}) must not change");
                }
            }
        }
    }
}
