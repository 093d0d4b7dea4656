//! Straight-line reference implementations on plain `Vec<f64>` maps, plus
//! shared fixtures. Nothing here calls into the crate's graph ops.

#![allow(dead_code)]

use std::io::Write;

use mmseg_core::data::{generate_sample, ModalitySample, Split, SyntheticSpec};
use mmseg_core::numerics::{ParamId, ParamStore, Tensor};

/// A `C × H × W` map.
#[derive(Debug, Clone, PartialEq)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    pub fn new(c: usize, h: usize, w: usize, v: Vec<f64>) -> Self {
        assert_eq!(v.len(), c * h * w);
        Self { c, h, w, v }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }

    pub fn from_tensor<S: mmseg_core::numerics::Real>(t: &Tensor<S>) -> Self {
        let s = t.shape();
        Self::new(s[0], s[1], s[2], t.data().iter().map(|v| v.as_f64()).collect())
    }

    pub fn max_abs_diff(&self, other: &Map) -> f64 {
        assert_eq!((self.c, self.h, self.w), (other.c, other.h, other.w));
        self.v.iter().zip(&other.v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn zip(&self, other: &Map, f: impl Fn(f64, f64) -> f64) -> Map {
        assert_eq!((self.c, self.h, self.w), (other.c, other.h, other.w));
        Map::new(self.c, self.h, self.w, self.v.iter().zip(&other.v).map(|(&a, &b)| f(a, b)).collect())
    }

    pub fn scaled(&self, s: f64) -> Map {
        Map::new(self.c, self.h, self.w, self.v.iter().map(|a| a * s).collect())
    }
}

/// Source coordinate of output `o` under half-pixel alignment, clamped to the grid.
fn source_taps(o: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let p = ((o as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
    let lo = p.floor() as usize;
    let hi = (lo + 1).min(src - 1);
    (lo, hi, p - lo as f64)
}

pub fn upsample(x: &Map, oh: usize, ow: usize) -> Map {
    let mut v = Vec::with_capacity(x.c * oh * ow);
    for c in 0..x.c {
        for oy in 0..oh {
            let (y0, y1, fy) = source_taps(oy, x.h, oh);
            for ox in 0..ow {
                let (x0, x1, fx) = source_taps(ox, x.w, ow);
                let top = x.at(c, y0, x0) * (1.0 - fx) + x.at(c, y0, x1) * fx;
                let bot = x.at(c, y1, x0) * (1.0 - fx) + x.at(c, y1, x1) * fx;
                v.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Map::new(x.c, oh, ow, v)
}

/// `out[o, p] = Σ_i w[o][i]·x[i, p] + b[o]` with `w` row-major `cout × cin`.
pub fn conv(x: &Map, w: &[f64], b: &[f64]) -> Map {
    let cout = b.len();
    assert_eq!(w.len(), cout * x.c);
    let n = x.h * x.w;
    let mut v = vec![0.0; cout * n];
    for o in 0..cout {
        for p in 0..n {
            let mut s = b[o];
            for i in 0..x.c {
                s += w[o * x.c + i] * x.v[i * n + p];
            }
            v[o * n + p] = s;
        }
    }
    Map::new(cout, x.h, x.w, v)
}

pub fn concat(maps: &[Map]) -> Map {
    let (h, w) = (maps[0].h, maps[0].w);
    let c = maps.iter().map(|m| m.c).sum();
    Map::new(c, h, w, maps.iter().flat_map(|m| m.v.iter().copied()).collect())
}

pub fn values(store: &ParamStore<f64>, id: ParamId) -> Vec<f64> {
    store.value(id).data().to_vec()
}

/// `Y_n = Z_n`; `Y_i = (Z_i + up(Y_{i+1}))/2` on the listed levels.
pub fn topdown(z: &[Map], levels: &[usize]) -> Vec<Map> {
    let n = z.len() - 1;
    let mut y = z.to_vec();
    for i in (0..n).rev() {
        if levels.contains(&i) {
            let up = upsample(&y[i + 1], z[i].h, z[i].w);
            y[i] = z[i].zip(&up, |a, b| (a + b) / 2.0);
        }
    }
    y
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Average, gate, top-k mix and unify one stream of per-modality maps.
pub fn fuse_stream(maps: &[Map], a: &[f64], b: f64, k: usize) -> (Map, Vec<f64>) {
    let m = maps.len();
    let mut avg = maps[0].clone();
    for x in &maps[1..] {
        avg = avg.zip(x, |p, q| p + q);
    }
    let avg = avg.scaled(1.0 / m as f64);
    let logits: Vec<f64> = maps
        .iter()
        .map(|x| {
            let n = (x.h * x.w) as f64;
            (0..x.c)
                .map(|c| a[c] * (0..x.h * x.w).map(|p| x.v[c * x.h * x.w + p]).sum::<f64>() / n)
                .sum::<f64>()
                + b
        })
        .collect();
    let gate = softmax(&logits);
    let mut chosen: Vec<usize> = Vec::new();
    for _ in 0..k.min(m) {
        let mut best: Option<usize> = None;
        for j in 0..m {
            if chosen.contains(&j) {
                continue;
            }
            if best.is_none_or(|bj| gate[j] > gate[bj]) {
                best = Some(j);
            }
        }
        chosen.push(best.unwrap());
    }
    let mut mixed = maps[0].scaled(0.0);
    for &j in &chosen {
        mixed = mixed.zip(&maps[j], |p, q| p + gate[j] * q);
    }
    (avg.zip(&mixed, |p, q| (p + q) / 2.0), gate)
}

/// Literal hard-example cross-entropy on class-major logits.
pub fn ohem(logits: &Map, labels: &[u32], p_th: f64) -> f64 {
    let n = logits.h * logits.w;
    let mut ce: Vec<(usize, f64)> = Vec::new();
    let mut hard = 0;
    for i in 0..n {
        if labels[i] == 255 {
            continue;
        }
        let z: Vec<f64> = (0..logits.c).map(|c| logits.v[c * n + i]).collect();
        let p = softmax(&z)[labels[i] as usize];
        if p < p_th {
            hard += 1;
        }
        ce.push((i, -p.ln()));
    }
    if ce.is_empty() {
        return 0.0;
    }
    let total = ce.len();
    let keep = hard.max(total / 16).max(1).min(total);
    ce.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    ce[..keep].iter().map(|c| c.1).sum::<f64>() / keep as f64
}

pub fn total_loss(s0: &Map, s1: &Map, labels: &[u32], h: usize, w: usize, w0: f64, w1: f64, p_th: f64) -> f64 {
    w0 * ohem(&upsample(s0, h, w), labels, p_th) + w1 * ohem(&upsample(s1, h, w), labels, p_th)
}

pub fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Synthetic samples of one split, generated in memory.
pub fn synthetic(seed: u64, count: usize, classes: usize, mods: &[&str], split: Split, n: usize) -> Vec<ModalitySample> {
    let spec = SyntheticSpec {
        seed,
        count,
        classes,
        height: 64,
        width: 64,
        modalities: mods.iter().map(|s| s.to_string()).collect(),
    };
    (0..n).map(|i| generate_sample(&spec, split, i).unwrap()).collect()
}

/// Prints a verdict line straight to stdout (bypassing test capture) and
/// fails the test on FAIL.
pub fn report(criterion: u32, name: &str, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let line = format!("{verdict} criterion {criterion} ({name}): {detail}\n");
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(ok, "{}", line.trim_end());
}
