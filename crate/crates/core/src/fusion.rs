//! Cross-modal fusion of feature triples: uniform average, softmax routing
//! over present modalities, top-k weighted mixture, and their mean.

use rand::Rng;

use crate::error::{Error, Result};
use crate::neck::FeatureTriple;
use crate::numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// How many modalities survive the gate at each level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopK {
    /// `⌈M/2⌉` for `M` registered modalities.
    Auto,
    Fixed(usize),
}

impl TopK {
    /// Effective `k` for `registered` modalities of which `present` are supplied.
    pub fn resolve(self, registered: usize, present: usize) -> usize {
        let k = match self {
            TopK::Auto => registered.div_ceil(2),
            TopK::Fixed(k) => k,
        };
        k.clamp(1, present.max(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    /// Pyramid level (0, 1, or the deepest stage index).
    pub level: usize,
    pub modalities: Vec<String>,
    /// Softmax gate over present modalities, before masking.
    pub weights: Vec<f64>,
    /// Indices into `modalities`, highest weight first.
    pub selected: Vec<usize>,
    pub k: usize,
}

/// Scalar-logit router `a·f + b` for one pyramid level.
#[derive(Debug, Clone)]
pub struct Router {
    pub level: usize,
    /// `C × 1`
    pub weight: ParamId,
    /// `1`
    pub bias: ParamId,
}

impl Router {
    /// `stream` names the gated feature stream (`ffp`, `ifp` or `sfm`).
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        stream: &str,
        level: usize,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.register(
            format!("fusion.router_{stream}.weight"),
            Tensor::randn(vec![channels, 1], (1.0 / channels as f64).sqrt(), rng),
            false,
        )?;
        let bias = store.register(format!("fusion.router_{stream}.bias"), Tensor::zeros(vec![1]), false)?;
        Ok(Self { level, weight, bias })
    }
}

#[derive(Debug, Clone)]
pub struct Fusion {
    /// Routers for levels 0, 1, n (ffp, ifp, sfm).
    pub routers: [Router; 3],
    pub top_k: TopK,
    pub renormalize_topk: bool,
    pub registered: usize,
}

impl Fusion {
    /// `d` is the embedding width; `n` the deepest stage index.
    pub fn new<R: Rng + ?Sized>(
        d: usize,
        n: usize,
        registered: usize,
        top_k: TopK,
        store: &mut ParamStore<f32>,
        rng: &mut R,
    ) -> Result<Self> {
        if let TopK::Fixed(0) = top_k {
            return Err(Error::Config("top_k must be positive".into()));
        }
        Ok(Self {
            routers: [
                Router::register(store, "ffp", 0, d / 8, rng)?,
                Router::register(store, "ifp", 1, d / 4, rng)?,
                Router::register(store, "sfm", n, d, rng)?,
            ],
            top_k,
            renormalize_topk: false,
            registered,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.routers.iter().flat_map(|r| [r.weight, r.bias]).collect()
    }

    /// Fuses per-modality triples into one `"fused"` triple; returns the
    /// routing decisions for levels 0, 1, n.
    pub fn forward<S: Real>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        triples: &[FeatureTriple],
    ) -> Result<(FeatureTriple, Vec<RoutingDecision>)> {
        let k = self.top_k.resolve(self.registered, triples.len());
        fuse_streams(g, store, triples, &self.routers, k, self.renormalize_topk)
    }
}

/// `Ȳ = (1/M) Σ_m Y^m`
pub fn average_modalities<S: Real>(g: &mut Graph<S>, maps: &[Var]) -> Result<Var> {
    let (&first, rest) = maps
        .split_first()
        .ok_or_else(|| Error::invalid("average_modalities", "no modalities present"))?;
    let mut acc = first;
    for &m in rest {
        acc = g.add(acc, m)?;
    }
    if maps.len() == 1 {
        return Ok(acc);
    }
    g.scale(acc, 1.0 / maps.len() as f64)
}

/// Gate logits `a·mean_spatial(Y^m) + b` stacked to `[M]`.
pub fn router_logits<S: Real>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    maps: &[Var],
    router: &Router,
) -> Result<Var> {
    if maps.is_empty() {
        return Err(Error::invalid("route", "no modalities present"));
    }
    let a = g.param(store, router.weight);
    let b = g.param(store, router.bias);
    let mut logits = Vec::with_capacity(maps.len());
    for &y in maps {
        let f = g.mean_spatial(y)?;
        let c = g.shape(f)[0];
        let row = g.reshape(f, vec![1, c])?;
        let z = g.matmul(row, a)?;
        let z = g.reshape(z, vec![1])?;
        logits.push(g.add(z, b)?);
    }
    g.concat(&logits)
}

/// Indices of the `k` largest weights; ties go to the lower index.
pub fn select_top_k(weights: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&i, &j| weights[j].total_cmp(&weights[i]).then(i.cmp(&j)));
    order.truncate(k.min(weights.len()));
    order
}

/// Softmax gate over present modalities plus the top-k decision.
/// Returns the differentiable gate `[M]` and logits alongside the decision.
pub fn route<S: Real>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    maps: &[Var],
    router: &Router,
    k: usize,
) -> Result<(Var, Var, RoutingDecision)> {
    let logits = router_logits(g, store, maps, router)?;
    let gate = g.softmax(logits, 0)?;
    let weights: Vec<f64> = g.value(gate).data().iter().map(|v| v.as_f64()).collect();
    let k = k.clamp(1, maps.len());
    let decision = RoutingDecision {
        level: router.level,
        modalities: Vec::new(),
        selected: select_top_k(&weights, k),
        weights,
        k,
    };
    Ok((gate, logits, decision))
}

/// `Ŷ = Σ_{m ∈ selected} w^m · Y^m`, with `w` taken from `gate` as-is.
pub fn topk_fuse<S: Real>(
    g: &mut Graph<S>,
    maps: &[Var],
    gate: Var,
    decision: &RoutingDecision,
) -> Result<Var> {
    if g.shape(gate) != [maps.len()] || decision.weights.len() != maps.len() {
        return Err(Error::invalid(
            "topk_fuse",
            format!(
                "{} maps, gate {:?}, decision over {} modalities",
                maps.len(),
                g.shape(gate),
                decision.weights.len()
            ),
        ));
    }
    let mut acc: Option<Var> = None;
    for &m in &decision.selected {
        let w = g.narrow(gate, m, 1)?;
        let term = g.scale_by(maps[m], w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::invalid("topk_fuse", "empty selection"))
}

/// Softmax restricted to the selected logits, then the weighted sum.
fn topk_fuse_renormalized<S: Real>(
    g: &mut Graph<S>,
    maps: &[Var],
    logits: Var,
    decision: &RoutingDecision,
) -> Result<Var> {
    let picked = decision
        .selected
        .iter()
        .map(|&m| g.narrow(logits, m, 1))
        .collect::<Result<Vec<_>>>()?;
    let sub = g.concat(&picked)?;
    let sub_gate = g.softmax(sub, 0)?;
    let sub_maps: Vec<Var> = decision.selected.iter().map(|&m| maps[m]).collect();
    let sub_decision = RoutingDecision {
        selected: (0..sub_maps.len()).collect(),
        weights: g.value(sub_gate).data().iter().map(|v| v.as_f64()).collect(),
        ..decision.clone()
    };
    topk_fuse(g, &sub_maps, sub_gate, &sub_decision)
}

/// `Ỹ = (Ȳ + Ŷ)/2`
pub fn unify<S: Real>(g: &mut Graph<S>, avg: Var, mixed: Var) -> Result<Var> {
    let s = g.add(avg, mixed)?;
    g.scale(s, 0.5)
}

/// Average → route → top-k → unify, independently at levels 0, 1, n.
pub fn fuse_streams<S: Real>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    triples: &[FeatureTriple],
    routers: &[Router; 3],
    k: usize,
    renormalize: bool,
) -> Result<(FeatureTriple, Vec<RoutingDecision>)> {
    if triples.is_empty() {
        return Err(Error::invalid("fuse_streams", "no modalities present"));
    }
    let names: Vec<String> = triples.iter().map(|t| t.tag.clone()).collect();
    let mut fused = Vec::with_capacity(3);
    let mut decisions = Vec::with_capacity(3);
    for (slot, router) in routers.iter().enumerate() {
        let maps: Vec<Var> = triples
            .iter()
            .map(|t| match slot {
                0 => t.ffp,
                1 => t.ifp,
                _ => t.sfm,
            })
            .collect();
        let avg = average_modalities(g, &maps)?;
        let (gate, logits, mut decision) = route(g, store, &maps, router, k)?;
        decision.modalities = names.clone();
        let mixed = if renormalize {
            topk_fuse_renormalized(g, &maps, logits, &decision)?
        } else {
            topk_fuse(g, &maps, gate, &decision)?
        };
        fused.push(unify(g, avg, mixed)?);
        decisions.push(decision);
    }
    Ok((
        FeatureTriple {
            ffp: fused[0],
            ifp: fused[1],
            sfm: fused[2],
            tag: "fused".to_string(),
        },
        decisions,
    ))
}
