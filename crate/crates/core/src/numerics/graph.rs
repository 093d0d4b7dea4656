//! Recorded tape of primitive ops with a reverse pass.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and the reverse pass is a single backward sweep.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::Rng;

use super::kernels::{self, AxisTaps};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Marker in a gather index meaning "emit zero".
pub const GATHER_ZERO: u32 = u32::MAX;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        p: usize,
        trans_b: bool,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Reshape {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: S,
    },
    ScaleBy {
        x: Var,
        s: Var,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Gelu {
        x: Var,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Conv1x1 {
        x: Var,
        w: Var,
        b: Var,
        cin: usize,
        cout: usize,
        hw: usize,
    },
    Upsample {
        x: Var,
        rows: Box<AxisTaps<S>>,
        cols: Box<AxisTaps<S>>,
    },
    MeanSpatial {
        x: Var,
        hw: usize,
    },
    Concat {
        xs: Vec<Var>,
    },
    Slice {
        x: Var,
        offset: usize,
    },
    Gather {
        x: Var,
        index: Arc<Vec<u32>>,
    },
    AvgPool2 {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<S>,
    },
    WeightedCe {
        logits: Var,
        labels: Arc<Vec<u32>>,
        weights: Vec<S>,
    },
}

impl<S> Op<S> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b } => vec![*a, *b],
            Op::ScaleBy { x, s } => vec![*x, *s],
            Op::AddBias { x, b } => vec![*x, *b],
            Op::Conv1x1 { x, w, b, .. } => vec![*x, *w, *b],
            Op::Concat { xs } => xs.clone(),
            Op::WeightedCe { logits, .. } => vec![*logits],
            Op::Transpose { x, .. }
            | Op::Reshape { x }
            | Op::Scale { x, .. }
            | Op::Gelu { x }
            | Op::Softmax { x, .. }
            | Op::Upsample { x, .. }
            | Op::MeanSpatial { x, .. }
            | Op::Slice { x, .. }
            | Op::Gather { x, .. }
            | Op::AvgPool2 { x }
            | Op::Sum { x }
            | Op::Dropout { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<S = f32> {
    params: BTreeMap<ParamId, Tensor<S>>,
    leaves: HashMap<Var, Tensor<S>>,
}

impl<S: Real> Gradients<S> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.params.get(&id)
    }

    /// Gradient of a leaf created with [`Graph::input`] or [`Graph::param`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.leaves.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> + '_ {
        self.params.iter().map(|(k, v)| (*k, v))
    }
}

/// Single-owner recording of one forward pass.
#[derive(Debug)]
pub struct Graph<S: Real = f32> {
    nodes: Vec<Node<S>>,
    param_vars: HashMap<ParamId, Var>,
    consumed: bool,
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<S>, op: Op<S>) -> Result<Var> {
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if cfg!(debug_assertions)
            && !value.all_finite()
            && inputs.iter().all(|v| self.nodes[v.0].value.all_finite())
        {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<S>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t, false, None)
    }

    /// Leaf whose gradient is reported through [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t, true, None)
    }

    /// Leaf bound to a registered parameter; frozen parameters get no gradient.
    /// Repeated calls for the same id return the same node.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), !p.frozen, Some(id));
        self.param_vars.insert(id, v);
        v
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m×k] · [k×p] → [m×p]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        self.matmul_impl("matmul", a, b, 1, sa[0], sa[1], sb[1], false, vec![sa[0], sb[1]])
    }

    /// Batched `[B×m×k] · [B×k×p] → [B×m×p]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Shape {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        self.matmul_impl("bmm", a, b, sa[0], sa[1], sa[2], sb[2], false, vec![sa[0], sa[1], sb[2]])
    }

    /// Batched `[B×m×k] · [B×p×k]ᵀ → [B×m×p]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::Shape {
                op: "bmm_nt",
                lhs: sa,
                rhs: sb,
            });
        }
        self.matmul_impl("bmm_nt", a, b, sa[0], sa[1], sa[2], sb[1], true, vec![sa[0], sa[1], sb[1]])
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul_impl(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        p: usize,
        trans_b: bool,
        shape: Vec<usize>,
    ) -> Result<Var> {
        let mut out = vec![S::zero(); batch * m * p];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for n in 0..batch {
                let ab = &av[n * m * k..(n + 1) * m * k];
                let bb = &bv[n * k * p..(n + 1) * k * p];
                let ob = &mut out[n * m * p..(n + 1) * m * p];
                if trans_b {
                    kernels::mm_nt_acc(ab, bb, ob, m, k, p);
                } else {
                    kernels::mm_acc(ab, bb, ob, m, k, p);
                }
            }
        }
        let value = Tensor::from_parts(shape, out);
        self.push(
            name,
            value,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                p,
                trans_b,
            },
        )
    }

    /// `[r×c] → [c×r]`
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::invalid("transpose", format!("expected rank 2, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![S::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        self.push(
            "transpose",
            Tensor::from_parts(vec![cols, rows], out),
            Op::Transpose { x, rows, cols },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape { x })
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (av, bv) = (self.value(a), self.value(b));
        Tensor::from_parts(
            av.shape().to_vec(),
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push("add", v, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", v, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", v, Op::Mul { a, b })
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = S::lit(c);
        let v = self.value(x).map(|e| e * c);
        self.push("scale", v, Op::Scale { x, c })
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::Shape {
                op: "scale_by",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let c = self.value(s).item();
        let v = self.value(x).map(|e| e * c);
        self.push("scale_by", v, Op::ScaleBy { x, s })
    }

    /// Adds `b[n]` along the last axis of `x[..×n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sb.len() != 1 || *sx.last().unwrap() != sb[0] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let n = sb[0];
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(&bias) {
                *o = *o + bv;
            }
        }
        self.push("add_bias", v, Op::AddBias { x, b })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(kernels::gelu);
        self.push("gelu", v, Op::Gelu { x })
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![S::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = S::neg_infinity();
                for l in 0..len {
                    mx = mx.max(src[base + l * inner]);
                }
                let mut sum = S::zero();
                for l in 0..len {
                    let e = (src[base + l * inner] - mx).exp();
                    out[base + l * inner] = e;
                    sum = sum + e;
                }
                for l in 0..len {
                    out[base + l * inner] = out[base + l * inner] / sum;
                }
            }
        }
        self.push(
            "softmax",
            Tensor::from_parts(shape, out),
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
        )
    }

    // ---- image-shaped ops (C×H×W) --------------------------------------

    fn chw(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize)> {
        match *self.shape(x) {
            [c, h, w] => Ok((c, h, w)),
            ref s => Err(Error::invalid(op, format!("expected C×H×W, got {s:?}"))),
        }
    }

    /// Per-pixel linear map across channels: `x[Cin×H×W]`, `w[Cout×Cin]`, `b[Cout]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (cin, h, wd) = self.chw("conv1x1", x)?;
        let (sw, sb) = (self.shape(w).to_vec(), self.shape(b).to_vec());
        if sw.len() != 2 || sw[1] != cin {
            return Err(Error::Shape {
                op: "conv1x1",
                lhs: self.shape(x).to_vec(),
                rhs: sw,
            });
        }
        let cout = sw[0];
        if sb != [cout] {
            return Err(Error::Shape {
                op: "conv1x1",
                lhs: sw,
                rhs: sb,
            });
        }
        let hw = h * wd;
        let mut out = vec![S::zero(); cout * hw];
        for (o, &bv) in self.value(b).data().iter().enumerate() {
            out[o * hw..(o + 1) * hw].iter_mut().for_each(|e| *e = bv);
        }
        kernels::mm_acc(self.value(w).data(), self.value(x).data(), &mut out, cout, cin, hw);
        self.push(
            "conv1x1",
            Tensor::from_parts(vec![cout, h, wd], out),
            Op::Conv1x1 {
                x,
                w,
                b,
                cin,
                cout,
                hw,
            },
        )
    }

    /// Half-pixel-center bilinear resampling to a larger (or equal) grid.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.chw("upsample_bilinear", x)?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid(
                "upsample_bilinear",
                format!("zero target extent {out_h}×{out_w}"),
            ));
        }
        if out_h < h || out_w < w {
            return Err(Error::invalid(
                "upsample_bilinear",
                format!("target {out_h}×{out_w} smaller than source {h}×{w}"),
            ));
        }
        let rows = AxisTaps::<S>::new(h, out_h);
        let cols = AxisTaps::<S>::new(w, out_w);
        let src = self.value(x).data();
        let mut out = vec![S::zero(); c * out_h * out_w];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
            for oy in 0..out_h {
                let (y0, y1, wy0, wy1) = (rows.lo[oy], rows.hi[oy], rows.w_lo[oy], rows.w_hi[oy]);
                for ox in 0..out_w {
                    let (x0, x1, wx0, wx1) =
                        (cols.lo[ox], cols.hi[ox], cols.w_lo[ox], cols.w_hi[ox]);
                    dst[oy * out_w + ox] = wy0 * (wx0 * plane[y0 * w + x0] + wx1 * plane[y0 * w + x1])
                        + wy1 * (wx0 * plane[y1 * w + x0] + wx1 * plane[y1 * w + x1]);
                }
            }
        }
        self.push(
            "upsample_bilinear",
            Tensor::from_parts(vec![c, out_h, out_w], out),
            Op::Upsample {
                x,
                rows: Box::new(rows),
                cols: Box::new(cols),
            },
        )
    }

    /// Per-channel mean over all spatial positions: `[C×H×W] → [C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw("mean_spatial", x)?;
        let hw = h * w;
        let inv = S::lit(1.0 / hw as f64);
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<S>() * inv)
            .collect();
        self.push("mean_spatial", Tensor::from_parts(vec![c], out), Op::MeanSpatial { x, hw })
    }

    /// 2×2 average pooling; odd extents are zero-padded.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw("avg_pool2", x)?;
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let src = self.value(x).data();
        let mut out = vec![S::zero(); c * oh * ow];
        let quarter = S::lit(0.25);
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let o = ch * oh * ow + (y / 2) * ow + xx / 2;
                    out[o] = out[o] + quarter * src[ch * h * w + y * w + xx];
                }
            }
        }
        self.push("avg_pool2", Tensor::from_parts(vec![c, oh, ow], out), Op::AvgPool2 { x })
    }

    /// Concatenation along the leading axis; trailing extents must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        for &x in xs {
            let s = self.shape(x);
            if s[1..] != tail[..] {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            lead += s[0];
        }
        let mut data = Vec::new();
        for &x in xs {
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        self.push("concat", Tensor::from_parts(shape, data), Op::Concat { xs: xs.to_vec() })
    }

    /// Channel concatenation of `C_i×H×W` maps.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        for &x in xs {
            self.chw("concat_channels", x)?;
        }
        self.concat(xs)
    }

    /// Rows `[start, start+len)` of the leading axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[0] {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} outside leading extent {}", start + len, shape[0]),
            ));
        }
        let plane: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * plane..(start + len) * plane].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        self.push(
            "narrow",
            Tensor::from_parts(out_shape, data),
            Op::Slice {
                x,
                offset: start * plane,
            },
        )
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<u32>>, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(Error::invalid(
                "gather",
                format!("index has {} entries for shape {shape:?}", index.len()),
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n);
        for &i in index.iter() {
            if i == GATHER_ZERO {
                out.push(S::zero());
            } else {
                out.push(*src.get(i as usize).ok_or_else(|| {
                    Error::invalid("gather", format!("index {i} out of range {}", src.len()))
                })?);
            }
        }
        self.push("gather", Tensor::from_parts(shape, out), Op::Gather { x, index })
    }

    // ---- reductions / losses -------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: S = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Inverted dropout: zeroes with probability `p`, scales survivors by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("rate {p} outside [0, 1)")));
        }
        let keep = S::lit(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
            .collect();
        let v = self.value(x);
        let out = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect(),
        );
        self.push("dropout", out, Op::Dropout { x, mask })
    }

    /// `Σ_i weight_i · CE(logits[:, i], label_i)` over class-major logits
    /// `[C × ...]`. Pixels with zero weight are skipped entirely, so their
    /// labels may be out of range (ignore markers).
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        labels: Arc<Vec<u32>>,
        weights: Vec<S>,
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let classes = shape[0];
        let n: usize = shape[1..].iter().product();
        if labels.len() != n || weights.len() != n {
            return Err(Error::invalid(
                "weighted_cross_entropy",
                format!(
                    "{} labels / {} weights for {n} pixels",
                    labels.len(),
                    weights.len()
                ),
            ));
        }
        let z = self.value(logits).data();
        let mut loss = S::zero();
        for i in 0..n {
            if weights[i] == S::zero() {
                continue;
            }
            let y = labels[i] as usize;
            if y >= classes {
                return Err(Error::ClassOutOfRange {
                    id: labels[i],
                    classes,
                });
            }
            let (mx, lse) = kernels::log_softmax_at(z, classes, n, i);
            loss = loss + weights[i] * (mx + lse - z[y * n + i]);
        }
        self.push(
            "weighted_cross_entropy",
            Tensor::scalar(loss),
            Op::WeightedCe {
                logits,
                labels,
                weights,
            },
        )
    }

    // ---- reverse pass --------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Each graph supports one sweep.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), S::one()));
        let mut out = Gradients {
            params: BTreeMap::new(),
            leaves: HashMap::new(),
        };

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                match node.param {
                    Some(id) => {
                        out.params.insert(id, g.clone());
                    }
                    None => {}
                }
                out.leaves.insert(Var(i), g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        let gd = g.data();

        let mut give = |v: Var, data: Vec<S>| {
            let t = Tensor::from_parts(nodes[v.0].value.shape().to_vec(), data);
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };

        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                p,
                trans_b,
            } => {
                let (av, bv) = (val(a).data(), val(b).data());
                if wants(a) {
                    let mut ga = vec![S::zero(); batch * m * k];
                    for n in 0..batch {
                        let gb = &gd[n * m * p..(n + 1) * m * p];
                        let bb = &bv[n * k * p..(n + 1) * k * p];
                        let oa = &mut ga[n * m * k..(n + 1) * m * k];
                        if trans_b {
                            kernels::mm_acc(gb, bb, oa, m, p, k);
                        } else {
                            kernels::mm_nt_acc(gb, bb, oa, m, p, k);
                        }
                    }
                    give(a, ga);
                }
                if wants(b) {
                    let mut gbm = vec![S::zero(); batch * k * p];
                    for n in 0..batch {
                        let gb = &gd[n * m * p..(n + 1) * m * p];
                        let ab = &av[n * m * k..(n + 1) * m * k];
                        let ob = &mut gbm[n * k * p..(n + 1) * k * p];
                        if trans_b {
                            kernels::mm_tn_acc(gb, ab, ob, m, p, k);
                        } else {
                            kernels::mm_tn_acc(ab, gb, ob, m, k, p);
                        }
                    }
                    give(b, gbm);
                }
            }
            &Op::Transpose { x, rows, cols } => {
                let mut gx = vec![S::zero(); rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        gx[r * cols + c] = gd[c * rows + r];
                    }
                }
                give(x, gx);
            }
            &Op::Reshape { x } => give(x, gd.to_vec()),
            &Op::Add { a, b } => {
                if wants(a) {
                    give(a, gd.to_vec());
                }
                if wants(b) {
                    give(b, gd.to_vec());
                }
            }
            &Op::Sub { a, b } => {
                if wants(a) {
                    give(a, gd.to_vec());
                }
                if wants(b) {
                    give(b, gd.iter().map(|&e| -e).collect());
                }
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (val(a).data(), val(b).data());
                if wants(a) {
                    give(a, gd.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                }
                if wants(b) {
                    give(b, gd.iter().zip(av).map(|(&g, &x)| g * x).collect());
                }
            }
            &Op::Scale { x, c } => give(x, gd.iter().map(|&e| e * c).collect()),
            &Op::ScaleBy { x, s } => {
                let c = val(s).item();
                if wants(x) {
                    give(x, gd.iter().map(|&e| e * c).collect());
                }
                if wants(s) {
                    let ds: S = gd.iter().zip(val(x).data()).map(|(&g, &v)| g * v).sum();
                    give(s, vec![ds]);
                }
            }
            &Op::AddBias { x, b } => {
                if wants(x) {
                    give(x, gd.to_vec());
                }
                if wants(b) {
                    let n = val(b).numel();
                    let mut gb = vec![S::zero(); n];
                    for row in gd.chunks(n) {
                        for (o, &e) in gb.iter_mut().zip(row) {
                            *o = *o + e;
                        }
                    }
                    give(b, gb);
                }
            }
            &Op::Gelu { x } => give(
                x,
                gd.iter()
                    .zip(val(x).data())
                    .map(|(&g, &v)| g * kernels::gelu_grad(v))
                    .collect(),
            ),
            &Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = nodes[i].value.data();
                let mut gx = vec![S::zero(); y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * len * inner + ii;
                        let mut dot = S::zero();
                        for l in 0..len {
                            dot = dot + gd[base + l * inner] * y[base + l * inner];
                        }
                        for l in 0..len {
                            let j = base + l * inner;
                            gx[j] = y[j] * (gd[j] - dot);
                        }
                    }
                }
                give(x, gx);
            }
            &Op::Conv1x1 {
                x,
                w,
                b,
                cin,
                cout,
                hw,
            } => {
                if wants(x) {
                    let mut gx = vec![S::zero(); cin * hw];
                    kernels::mm_tn_acc(val(w).data(), gd, &mut gx, cout, cin, hw);
                    give(x, gx);
                }
                if wants(w) {
                    let mut gw = vec![S::zero(); cout * cin];
                    kernels::mm_nt_acc(gd, val(x).data(), &mut gw, cout, hw, cin);
                    give(w, gw);
                }
                if wants(b) {
                    give(b, gd.chunks(hw).map(|plane| plane.iter().copied().sum()).collect());
                }
            }
            Op::Upsample { x, rows, cols } => {
                let x = *x;
                let (c, h, w) = match *val(x).shape() {
                    [c, h, w] => (c, h, w),
                    _ => unreachable!(),
                };
                let (oh, ow) = (rows.lo.len(), cols.lo.len());
                let mut gx = vec![S::zero(); c * h * w];
                for ch in 0..c {
                    let gp = &gd[ch * oh * ow..(ch + 1) * oh * ow];
                    let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
                    for oy in 0..oh {
                        let (y0, y1, wy0, wy1) = (rows.lo[oy], rows.hi[oy], rows.w_lo[oy], rows.w_hi[oy]);
                        for ox in 0..ow {
                            let (x0, x1, wx0, wx1) =
                                (cols.lo[ox], cols.hi[ox], cols.w_lo[ox], cols.w_hi[ox]);
                            let gv = gp[oy * ow + ox];
                            dst[y0 * w + x0] = dst[y0 * w + x0] + gv * wy0 * wx0;
                            dst[y0 * w + x1] = dst[y0 * w + x1] + gv * wy0 * wx1;
                            dst[y1 * w + x0] = dst[y1 * w + x0] + gv * wy1 * wx0;
                            dst[y1 * w + x1] = dst[y1 * w + x1] + gv * wy1 * wx1;
                        }
                    }
                }
                give(x, gx);
            }
            &Op::MeanSpatial { x, hw } => {
                let inv = S::lit(1.0 / hw as f64);
                let mut gx = Vec::with_capacity(gd.len() * hw);
                for &e in gd {
                    gx.extend(std::iter::repeat_n(e * inv, hw));
                }
                give(x, gx);
            }
            Op::Concat { xs } => {
                let mut offset = 0;
                for &x in xs {
                    let n = val(x).numel();
                    if wants(x) {
                        give(x, gd[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            &Op::Slice { x, offset } => {
                let mut gx = vec![S::zero(); val(x).numel()];
                gx[offset..offset + gd.len()].copy_from_slice(gd);
                give(x, gx);
            }
            Op::Gather { x, index } => {
                let x = *x;
                let mut gx = vec![S::zero(); val(x).numel()];
                for (&src, &e) in index.iter().zip(gd) {
                    if src != GATHER_ZERO {
                        gx[src as usize] = gx[src as usize] + e;
                    }
                }
                give(x, gx);
            }
            &Op::AvgPool2 { x } => {
                let (c, h, w) = match *val(x).shape() {
                    [c, h, w] => (c, h, w),
                    _ => unreachable!(),
                };
                let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
                let quarter = S::lit(0.25);
                let mut gx = vec![S::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[ch * h * w + y * w + xx] =
                                quarter * gd[ch * oh * ow + (y / 2) * ow + xx / 2];
                        }
                    }
                }
                give(x, gx);
            }
            &Op::Sum { x } => give(x, vec![gd[0]; val(x).numel()]),
            Op::Dropout { x, mask } => {
                give(*x, gd.iter().zip(mask).map(|(&g, &m)| g * m).collect());
            }
            Op::WeightedCe {
                logits,
                labels,
                weights,
            } => {
                let z = val(*logits);
                let classes = z.shape()[0];
                let n = z.numel() / classes;
                let zd = z.data();
                let mut gz = vec![S::zero(); zd.len()];
                for p in 0..n {
                    let wgt = weights[p];
                    if wgt == S::zero() {
                        continue;
                    }
                    let (mx, lse) = kernels::log_softmax_at(zd, classes, n, p);
                    let y = labels[p] as usize;
                    for c in 0..classes {
                        let prob = (zd[c * n + p] - mx - lse).exp();
                        let target = if c == y { S::one() } else { S::zero() };
                        gz[c * n + p] = gd[0] * wgt * (prob - target);
                    }
                }
                give(*logits, gz);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn matmul_identity_and_small_product() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(Tensor::identity(2));
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let b = g.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![4, 5]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = g.constant(t(&[2], &[0.0, 2f64.ln()]));
        let y = g.softmax(x, 0).unwrap();
        assert!((g.value(y).data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((g.value(y).data()[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!(matches!(g.softmax(x, 1), Err(Error::Axis { .. })));
    }

    #[test]
    fn softmax_large_logits_are_stable() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_f64(vec![2, 2], &[1000.0, 1001.0, -1000.0, -999.0]).unwrap());
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y).data();
        assert!((v[0] + v[1] - 1.0).abs() < 1e-6);
        assert!((v[2] + v[3] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn conv1x1_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(vec![2, 3, 3], 1.0));
        let w = g.constant(t(&[1, 2], &[1.0, 1.0]));
        let b = g.constant(t(&[1], &[0.5]));
        let y = g.conv1x1(x, w, b).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 2.5));

        let w3 = g.constant(Tensor::zeros(vec![1, 3]));
        assert!(g.conv1x1(x, w3, b).is_err());
    }

    #[test]
    fn upsample_constant_and_degenerate() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(vec![2, 3, 5], 7.0));
        let y = g.upsample_bilinear(x, 7, 11).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 7.0).abs() < 1e-12));
        let one = g.constant(t(&[1, 1, 1], &[4.5]));
        let y = g.upsample_bilinear(one, 4, 3).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 4.5));
        assert!(g.upsample_bilinear(one, 0, 3).is_err());
    }

    #[test]
    fn mean_spatial_and_concat() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let m = g.mean_spatial(x).unwrap();
        assert_eq!(g.value(m).data(), &[2.5]);

        let a = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.value(c).shape(), &[3, 2, 2]);
        let back_a = g.narrow(c, 0, 1).unwrap();
        let back_b = g.narrow(c, 1, 2).unwrap();
        assert_eq!(g.value(back_a), g.value(a));
        assert_eq!(g.value(back_b), g.value(b));

        let single = g.concat_channels(&[a]).unwrap();
        assert_eq!(g.value(single), g.value(a));

        let odd = g.constant(Tensor::zeros(vec![1, 3, 2]));
        assert!(matches!(g.concat_channels(&[a, odd]), Err(Error::Shape { .. })));
    }

    #[test]
    fn backward_sum_and_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let p = store
            .register("p", t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 0.0, -1.5]), false)
            .unwrap();

        let mut g = Graph::new();
        let pv = g.param(&store, p);
        let s = g.sum(pv).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.param(p).unwrap().data().iter().all(|&v| v == 1.0));

        let mut g = Graph::new();
        let pv = g.param(&store, p);
        let sq = g.mul(pv, pv).unwrap();
        let s = g.sum(sq).unwrap();
        let half = g.scale(s, 0.5).unwrap();
        let grads = g.backward(half).unwrap();
        assert_eq!(grads.param(p).unwrap(), store.value(p));
    }

    #[test]
    fn backward_contract_errors() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(vec![2]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::GraphConsumed)));
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut store = ParamStore::<f32>::new();
        let f = store.register("frozen", Tensor::full(vec![3], 2.0), true).unwrap();
        let t_ = store.register("train", Tensor::full(vec![3], 1.0), false).unwrap();
        let mut g = Graph::new();
        let (fv, tv) = (g.param(&store, f), g.param(&store, t_));
        let prod = g.mul(fv, tv).unwrap();
        let s = g.sum(prod).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.param(f).is_none());
        assert_eq!(grads.param(t_).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn weighted_ce_skips_zero_weight_pixels() {
        let mut g = Graph::<f64>::new();
        let z = g.input(t(&[2, 2], &[1.0, 5.0, -1.0, 2.0]));
        let labels = Arc::new(vec![0, 255]);
        let loss = g.weighted_cross_entropy(z, labels, vec![1.0, 0.0]).unwrap();
        let expected = -(1.0f64.exp() / (1.0f64.exp() + (-1.0f64).exp())).ln();
        assert!((g.value(loss).item() - expected).abs() < 1e-12);
        let grads = g.backward(loss).unwrap();
        let gz = grads.wrt(z).unwrap().data();
        assert_eq!(gz[1], 0.0);
        assert_eq!(gz[3], 0.0);
    }

    #[cfg(debug_assertions)]
    #[test]
    fn nan_guard_flags_overflow_from_finite_inputs() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(vec![2], 3e38));
        assert!(matches!(g.add(x, x), Err(Error::NonFinite("add"))));
    }
}
