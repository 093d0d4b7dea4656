//! Slice-level loops shared by forward and backward passes.

use super::Real;

/// `out[m×p] += a[m×k] · b[k×p]`
pub(crate) fn mm_acc<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for t in 0..k {
            let av = a[i * k + t];
            if av == S::zero() {
                continue;
            }
            let brow = &b[t * p..(t + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[m×p] += a[m×k] · b[p×k]ᵀ`
pub(crate) fn mm_nt_acc<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..p {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * p + j] = out[i * p + j] + acc;
        }
    }
}

/// `out[k×p] += a[m×k]ᵀ · b[m×p]`
pub(crate) fn mm_tn_acc<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let brow = &b[i * p..(i + 1) * p];
        for t in 0..k {
            let av = a[i * k + t];
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[t * p..(t + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub(crate) fn gelu<S: Real>(x: S) -> S {
    let u = S::lit(GELU_C) * (x + S::lit(GELU_A) * x * x * x);
    S::lit(0.5) * x * (S::one() + u.tanh())
}

#[inline]
pub(crate) fn gelu_grad<S: Real>(x: S) -> S {
    let u = S::lit(GELU_C) * (x + S::lit(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = S::lit(GELU_C) * (S::one() + S::lit(3.0 * GELU_A) * x * x);
    S::lit(0.5) * (S::one() + t) + S::lit(0.5) * x * (S::one() - t * t) * du
}

/// Source taps for one axis of half-pixel bilinear resampling.
#[derive(Debug, Clone)]
pub(crate) struct AxisTaps<S> {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w_lo: Vec<S>,
    pub w_hi: Vec<S>,
}

impl<S: Real> AxisTaps<S> {
    pub fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut taps = AxisTaps {
            lo: Vec::with_capacity(dst),
            hi: Vec::with_capacity(dst),
            w_lo: Vec::with_capacity(dst),
            w_hi: Vec::with_capacity(dst),
        };
        for o in 0..dst {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if hi == lo { 0.0 } else { pos - lo as f64 };
            taps.lo.push(lo);
            taps.hi.push(hi);
            taps.w_lo.push(S::lit(1.0 - frac));
            taps.w_hi.push(S::lit(frac));
        }
        taps
    }
}

/// Per-pixel log-sum-exp and cross-entropy for class-major logits `[C × N]`.
pub(crate) fn log_softmax_at<S: Real>(logits: &[S], classes: usize, n: usize, pixel: usize) -> (S, S) {
    let mut mx = S::neg_infinity();
    for c in 0..classes {
        mx = mx.max(logits[c * n + pixel]);
    }
    let mut sum = S::zero();
    for c in 0..classes {
        sum = sum + (logits[c * n + pixel] - mx).exp();
    }
    (mx, sum.ln())
}
