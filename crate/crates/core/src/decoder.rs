//! Two-pathway mask prediction from a fused feature triple.
//!
//! Pathway 1 decodes class tokens against the positionally encoded semantic
//! map and refines the coarse masks with the two high-resolution maps.
//! Pathway 2 is a light per-scale MLP head at the finest feature resolution.

use rand::Rng;

use crate::error::{Error, Result};
use crate::neck::{Conv1x1, FeatureTriple};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub classes: usize,
    pub rounds: usize,
    pub dropout: f64,
}

impl DecoderConfig {
    pub fn new(embed_dim: usize, classes: usize) -> Self {
        Self {
            embed_dim,
            classes,
            rounds: 2,
            dropout: 0.1,
        }
    }
}

/// Logits of both pathways; `s0` and `s1` are `𝒞 × H₀ × W₀`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualLogits {
    pub s0: Var,
    pub s1: Var,
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// `in × out`
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    fn register<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.register(
                format!("{name}.weight"),
                Tensor::randn(vec![fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng),
                false,
            )?,
            bias: store.register(format!("{name}.bias"), Tensor::zeros(vec![fan_out]), false)?,
        })
    }

    /// `x[N × in] → [N × out]`
    pub fn apply<S: Real>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// One token→feature cross-attention round followed by a feed-forward block.
#[derive(Debug, Clone)]
pub struct DecodeRound {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub o: ParamId,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    /// `𝒞 × d`
    pub tokens: ParamId,
    pub rounds: Vec<DecodeRound>,
    pub hyper: [Linear; 2],
    pub refine_ifp: Conv1x1,
    pub refine_ffp: Conv1x1,
    pub aux_mlp: [Conv1x1; 3],
    pub aux_fuse: Conv1x1,
    pub aux_pred: Conv1x1,
}

fn conv<R: Rng + ?Sized>(
    store: &mut ParamStore<f32>,
    name: &str,
    cin: usize,
    cout: usize,
    rng: &mut R,
) -> Result<Conv1x1> {
    Ok(Conv1x1 {
        weight: store.register(
            format!("{name}.weight"),
            Tensor::randn(vec![cout, cin], (1.0 / cin as f64).sqrt(), rng),
            false,
        )?,
        bias: store.register(format!("{name}.bias"), Tensor::zeros(vec![cout]), false)?,
    })
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(cfg: DecoderConfig, store: &mut ParamStore<f32>, rng: &mut R) -> Result<Self> {
        let d = cfg.embed_dim;
        let c = cfg.classes;
        if d == 0 || d % 8 != 0 {
            return Err(Error::Config(format!("embed_dim {d} must be a positive multiple of 8")));
        }
        if c == 0 {
            return Err(Error::Config("need at least one class".into()));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", cfg.dropout)));
        }
        let tokens = store.register("decoder.tokens", Tensor::randn(vec![c, d], 1.0, rng), false)?;
        let std = (1.0 / d as f64).sqrt();
        let mut rounds = Vec::with_capacity(cfg.rounds);
        for r in 0..cfg.rounds {
            let mut proj = |n: &str, rng: &mut R| {
                store.register(format!("decoder.round{r}.{n}"), Tensor::randn(vec![d, d], std, rng), false)
            };
            let (q, k, v, o) = (proj("q", rng)?, proj("k", rng)?, proj("v", rng)?, proj("o", rng)?);
            rounds.push(DecodeRound {
                q,
                k,
                v,
                o,
                ffn_in: Linear::register(store, &format!("decoder.round{r}.ffn_in"), d, 2 * d, rng)?,
                ffn_out: Linear::register(store, &format!("decoder.round{r}.ffn_out"), 2 * d, d, rng)?,
            });
        }
        let hyper = [
            Linear::register(store, "decoder.hyper.fc1", d, d, rng)?,
            Linear::register(store, "decoder.hyper.fc2", d, d, rng)?,
        ];
        let e = d / 8;
        Ok(Self {
            tokens,
            rounds,
            hyper,
            refine_ifp: conv(store, "decoder.refine.ifp", d / 4, c, rng)?,
            refine_ffp: conv(store, "decoder.refine.ffp", d / 8, c, rng)?,
            aux_mlp: [
                conv(store, "aux.mlp_sfm", d, e, rng)?,
                conv(store, "aux.mlp_ifp", d / 4, e, rng)?,
                conv(store, "aux.mlp_ffp", d / 8, e, rng)?,
            ],
            aux_fuse: conv(store, "aux.fuse", 3 * e, e, rng)?,
            aux_pred: conv(store, "aux.pred", e, c, rng)?,
            cfg,
        })
    }

    /// Parameters of the token decoder and refinement path.
    pub fn pathway1_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tokens];
        for r in &self.rounds {
            ids.extend([r.q, r.k, r.v, r.o]);
            ids.extend(r.ffn_in.params());
            ids.extend(r.ffn_out.params());
        }
        ids.extend(self.hyper.iter().flat_map(Linear::params));
        ids.extend(self.refine_ifp.params());
        ids.extend(self.refine_ffp.params());
        ids
    }

    pub fn pathway2_params(&self) -> Vec<ParamId> {
        self.aux_mlp
            .iter()
            .chain([&self.aux_fuse, &self.aux_pred])
            .flat_map(Conv1x1::params)
            .collect()
    }

    /// Both pathways. Dropout runs only when `train_rng` is supplied.
    pub fn forward<S: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        fused: &FeatureTriple,
        train_rng: Option<&mut R>,
    ) -> Result<DualLogits> {
        let pe = add_sine_pe(g, fused.sfm)?;
        let s_low = self.mask_decode(g, store, pe)?;
        let s0 = self.refine(g, store, s_low, fused.ifp, fused.ffp)?;
        let s1 = self.aux_head(g, store, fused, train_rng)?;
        Ok(DualLogits { s0, s1 })
    }

    /// Coarse class masks `𝒞 × H_n × W_n` from the encoded semantic map.
    pub fn mask_decode<S: Real>(&self, g: &mut Graph<S>, store: &ParamStore<S>, sfm_pe: Var) -> Result<Var> {
        let (d, h, w) = match *g.shape(sfm_pe) {
            [d, h, w] => (d, h, w),
            ref s => return Err(Error::invalid("mask_decode", format!("expected d×H×W, got {s:?}"))),
        };
        if d != self.cfg.embed_dim {
            return Err(Error::Shape {
                op: "mask_decode",
                lhs: g.shape(sfm_pe).to_vec(),
                rhs: vec![self.cfg.classes, self.cfg.embed_dim],
            });
        }
        let flat = g.reshape(sfm_pe, vec![d, h * w])?;
        let feats = g.transpose(flat)?;
        let mut t = g.param(store, self.tokens);
        let scale = 1.0 / (d as f64).sqrt();
        for r in &self.rounds {
            let (wq, wk, wv, wo) = (
                g.param(store, r.q),
                g.param(store, r.k),
                g.param(store, r.v),
                g.param(store, r.o),
            );
            let q = g.matmul(t, wq)?;
            let k = g.matmul(feats, wk)?;
            let v = g.matmul(feats, wv)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax(scores, 1)?;
            let ctx = g.matmul(attn, v)?;
            let upd = g.matmul(ctx, wo)?;
            t = g.add(t, upd)?;
            let hid = r.ffn_in.apply(g, store, t)?;
            let hid = g.gelu(hid)?;
            let upd = r.ffn_out.apply(g, store, hid)?;
            t = g.add(t, upd)?;
        }
        let hid = self.hyper[0].apply(g, store, t)?;
        let hid = g.gelu(hid)?;
        let hyper = self.hyper[1].apply(g, store, hid)?;
        let masks = g.matmul(hyper, flat)?;
        g.reshape(masks, vec![self.cfg.classes, h, w])
    }

    /// `S_inter = up(S_low) + conv(ifp)`; `s0 = up(S_inter) + conv(ffp)`.
    pub fn refine<S: Real>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        s_low: Var,
        ifp: Var,
        ffp: Var,
    ) -> Result<Var> {
        let lat1 = self.refine_ifp.apply(g, store, ifp)?;
        let (h1, w1) = (g.shape(ifp)[1], g.shape(ifp)[2]);
        let up = g.upsample_bilinear(s_low, h1, w1)?;
        let inter = g.add(up, lat1)?;
        let lat0 = self.refine_ffp.apply(g, store, ffp)?;
        let (h0, w0) = (g.shape(ffp)[1], g.shape(ffp)[2]);
        let up = g.upsample_bilinear(inter, h0, w0)?;
        g.add(up, lat0)
    }

    /// Auxiliary logits `𝒞 × H₀ × W₀`.
    pub fn aux_head<S: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        t: &FeatureTriple,
        train_rng: Option<&mut R>,
    ) -> Result<Var> {
        let (h0, w0) = (g.shape(t.ffp)[1], g.shape(t.ffp)[2]);
        let mut parts = Vec::with_capacity(3);
        for (mlp, x) in self.aux_mlp.iter().zip([t.sfm, t.ifp, t.ffp]) {
            let y = mlp.apply(g, store, x)?;
            parts.push(g.upsample_bilinear(y, h0, w0)?);
        }
        let mut cat = g.concat_channels(&parts)?;
        if let Some(rng) = train_rng {
            if self.cfg.dropout > 0.0 {
                cat = g.dropout(cat, self.cfg.dropout, rng)?;
            }
        }
        let fused = self.aux_fuse.apply(g, store, cat)?;
        self.aux_pred.apply(g, store, fused)
    }
}

/// Fixed 2-D sine/cosine encoding `d × H × W`: channels `[0, d/4)` are
/// `sin(row·ω_k)`, `[d/4, d/2)` are `sin(col·ω_k)`, and the second half holds
/// the matching cosines, with `ω_k = 10000^(−k/(d/4))`.
pub fn sine_pe<S: Real>(d: usize, h: usize, w: usize) -> Result<Tensor<S>> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::invalid("sine_pe", format!("channel count {d} must be a multiple of 4")));
    }
    let q = d / 4;
    let mut out = vec![S::zero(); d * h * w];
    for k in 0..q {
        let omega = 10000f64.powf(-(k as f64) / q as f64);
        for y in 0..h {
            for x in 0..w {
                let (ay, ax) = (y as f64 * omega, x as f64 * omega);
                let p = y * w + x;
                out[k * h * w + p] = S::lit(ay.sin());
                out[(q + k) * h * w + p] = S::lit(ax.sin());
                out[(2 * q + k) * h * w + p] = S::lit(ay.cos());
                out[(3 * q + k) * h * w + p] = S::lit(ax.cos());
            }
        }
    }
    Tensor::new(vec![d, h, w], out)
}

pub fn add_sine_pe<S: Real>(g: &mut Graph<S>, sfm: Var) -> Result<Var> {
    let (d, h, w) = match *g.shape(sfm) {
        [d, h, w] => (d, h, w),
        ref s => return Err(Error::invalid("add_sine_pe", format!("expected d×H×W, got {s:?}"))),
    };
    let pe = g.constant(sine_pe(d, h, w)?);
    g.add(sfm, pe)
}

/// Mean of both pathways after bilinear upsampling to `h × w`.
pub fn combine_predictions<S: Real>(g: &mut Graph<S>, s0: Var, s1: Var, h: usize, w: usize) -> Result<Var> {
    if g.shape(s0)[0] != g.shape(s1)[0] {
        return Err(Error::Shape {
            op: "combine_predictions",
            lhs: g.shape(s0).to_vec(),
            rhs: g.shape(s1).to_vec(),
        });
    }
    let a = g.upsample_bilinear(s0, h, w)?;
    let b = g.upsample_bilinear(s1, h, w)?;
    let s = g.add(a, b)?;
    g.scale(s, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type NoRng = ChaCha8Rng;

    fn build(d: usize, c: usize) -> (Decoder, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dec = Decoder::new(DecoderConfig::new(d, c), &mut store, &mut rng).unwrap();
        (dec, store)
    }

    fn triple(g: &mut Graph<f32>, d: usize, rng: &mut ChaCha8Rng) -> FeatureTriple {
        FeatureTriple {
            sfm: g.constant(Tensor::randn(vec![d, 4, 4], 1.0, rng)),
            ifp: g.constant(Tensor::randn(vec![d / 4, 8, 8], 1.0, rng)),
            ffp: g.constant(Tensor::randn(vec![d / 8, 16, 16], 1.0, rng)),
            tag: "fused".into(),
        }
    }

    #[test]
    fn pe_at_origin() {
        let pe = sine_pe::<f64>(8, 1, 1).unwrap();
        assert_eq!(pe.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert!(sine_pe::<f64>(7, 2, 2).is_err());
    }

    #[test]
    fn pe_is_additive_on_zero_input() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(vec![8, 3, 3]));
        let once = add_sine_pe(&mut g, z).unwrap();
        let twice = add_sine_pe(&mut g, once).unwrap();
        let doubled = g.value(once).map(|v| 2.0 * v);
        assert_eq!(g.value(twice), &doubled);
    }

    #[test]
    fn zero_features_give_zero_masks() {
        let (dec, store) = build(16, 3);
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(vec![16, 2, 3]));
        let s = dec.mask_decode(&mut g, &store, z).unwrap();
        assert_eq!(g.shape(s), &[3, 2, 3]);
        assert!(g.value(s).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn refine_preserves_constants_with_zero_laterals() {
        let (dec, mut store) = build(16, 2);
        for id in dec.refine_ifp.params().into_iter().chain(dec.refine_ffp.params()) {
            let p = store.get_mut(id);
            p.value = Tensor::zeros(p.value.shape().to_vec());
        }
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s_low = g.constant(Tensor::full(vec![2, 2, 2], 1.75));
        let ifp = g.constant(Tensor::randn(vec![4, 4, 4], 1.0, &mut rng));
        let ffp = g.constant(Tensor::randn(vec![2, 8, 8], 1.0, &mut rng));
        let s0 = dec.refine(&mut g, &store, s_low, ifp, ffp).unwrap();
        assert_eq!(g.shape(s0), &[2, 8, 8]);
        assert!(g.value(s0).data().iter().all(|&v| (v - 1.75).abs() < 1e-6));
    }

    #[test]
    fn zero_aux_network_emits_prediction_bias() {
        let (dec, mut store) = build(16, 3);
        for id in dec.pathway2_params() {
            let p = store.get_mut(id);
            p.value = Tensor::zeros(p.value.shape().to_vec());
        }
        store.get_mut(dec.aux_pred.bias).value = Tensor::from_f64(vec![3], &[0.5, -1.0, 2.0]).unwrap();
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = triple(&mut g, 16, &mut rng);
        let s1 = dec.aux_head(&mut g, &store, &t, None::<&mut NoRng>).unwrap();
        assert_eq!(g.shape(s1), &[3, 16, 16]);
        let v = g.value(s1);
        for (c, beta) in [0.5f32, -1.0, 2.0].iter().enumerate() {
            assert!(v.channel(c).data().iter().all(|x| x == beta));
        }
    }

    #[test]
    fn dual_logits_shapes_and_eval_determinism() {
        let (dec, store) = build(32, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let t = triple(&mut g, 32, &mut rng);
        let a = dec.forward(&mut g, &store, &t, None::<&mut NoRng>).unwrap();
        let b = dec.forward(&mut g, &store, &t, None::<&mut NoRng>).unwrap();
        assert_eq!(g.shape(a.s0), &[3, 16, 16]);
        assert_eq!(g.shape(a.s1), &[3, 16, 16]);
        assert_eq!(g.value(a.s1), g.value(b.s1));
        let out = combine_predictions(&mut g, a.s0, a.s1, 64, 64).unwrap();
        assert_eq!(g.shape(out), &[3, 64, 64]);
    }

    #[test]
    fn train_mode_masks_replay_with_seed() {
        let (dec, store) = build(16, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let t = triple(&mut g, 16, &mut rng);
        let run = |g: &mut Graph<f32>, seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let s = dec.aux_head(g, &store, &t, Some(&mut r)).unwrap();
            g.value(s).clone()
        };
        let (a, b, c) = (run(&mut g, 9), run(&mut g, 9), run(&mut g, 10));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn pathways_do_not_share_parameters() {
        let (dec, store) = build(16, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = [
            Tensor::randn(vec![16, 4, 4], 1.0, &mut rng),
            Tensor::randn(vec![4, 8, 8], 1.0, &mut rng),
            Tensor::randn(vec![2, 16, 16], 1.0, &mut rng),
        ];
        let run = |store: &ParamStore<f32>| {
            let mut g = Graph::new();
            let t = FeatureTriple {
                sfm: g.constant(inputs[0].clone()),
                ifp: g.constant(inputs[1].clone()),
                ffp: g.constant(inputs[2].clone()),
                tag: "fused".into(),
            };
            let out = dec.forward(&mut g, store, &t, None::<&mut NoRng>).unwrap();
            (g.value(out.s0).clone(), g.value(out.s1).clone())
        };
        let zero = |ids: Vec<ParamId>| {
            let mut s = store.clone();
            for id in ids {
                let p = s.get_mut(id);
                p.value = Tensor::zeros(p.value.shape().to_vec());
            }
            s
        };
        let (s0, s1) = run(&store);
        let (a0, a1) = run(&zero(dec.pathway2_params()));
        assert_eq!(s0, a0);
        assert_ne!(s1, a1);
        let (b0, b1) = run(&zero(dec.pathway1_params()));
        assert_eq!(s1, b1);
        assert_ne!(s0, b0);
    }

    #[test]
    fn combine_rejects_class_mismatch() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(vec![2, 4, 4]));
        let b = g.constant(Tensor::zeros(vec![3, 4, 4]));
        assert!(combine_predictions(&mut g, a, b, 8, 8).is_err());
        let same = combine_predictions(&mut g, a, a, 8, 8).unwrap();
        assert_eq!(g.shape(same), &[2, 8, 8]);
    }
}
