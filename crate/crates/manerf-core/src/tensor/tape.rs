//! Define-by-run tape for reverse-mode differentiation.
//!
//! A [`Tape`] records primitive operations as they execute. Nodes are
//! append-only, so inputs always precede outputs and one reverse sweep in
//! [`Tape::backward`] visits every operation exactly once. Gradients
//! accumulate additively when a value feeds several consumers.
//!
//! Conventions at non-differentiable points (fixed for reproducibility):
//! relu'(0) = 0, d|x|/dx at 0 = 0, min/max-with-constant picks the
//! pass-through branch only on strict inequality.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels;
use super::{ParamSet, Tensor};
use crate::fmath;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Membership lists for a scatter-mean: output row `g` averages the input
/// rows `members[starts[g]..starts[g+1]]`.
#[derive(Clone, Debug)]
pub struct ScatterMap {
    pub n_out: usize,
    pub starts: Vec<u32>,
    pub members: Vec<u32>,
}

/// Weighted gather: output row `out` accumulates `weight * input[src]`.
/// Output rows not named by any entry stay zero.
#[derive(Clone, Debug)]
pub struct GatherMap {
    pub n_out: usize,
    pub entries: Vec<GatherEntry>,
}

#[derive(Clone, Copy, Debug)]
pub struct GatherEntry {
    pub out: u32,
    pub src: u32,
    pub weight: f64,
}

/// Sparse 3x3x3 convolution support: each pair routes input row `src`
/// through kernel tap `tap` into output row `out`. Output rows coincide
/// with input rows (submanifold convolution).
#[derive(Clone, Debug)]
pub struct ConvMap {
    pub n_taps: usize,
    pub pairs: Vec<ConvPair>,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvPair {
    pub out: u32,
    pub src: u32,
    pub tap: u16,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Affine { x: Var, w: Var, bias: Var, rows: usize, d_in: usize, d_out: usize },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Neg(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Sin(Var),
    Cos(Var),
    MinConst(Var, f64),
    MaxConst(Var, f64),
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize, end: usize },
    Cumsum { x: Var, axis: usize },
    Reshape(Var),
    PosEnc { x: Var, num_freqs: usize, include_input: bool, dim: usize },
    RepeatRows { x: Var, n: usize },
    ScaleRows { scale: Var, x: Var },
    ScatterMean { x: Var, map: Arc<ScatterMap> },
    GatherWeighted { x: Var, map: Arc<GatherMap> },
    SparseConv { x: Var, w: Var, bias: Option<Var>, map: Arc<ConvMap> },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for shape {shape:?}");
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        assert_eq!(self.numel(v), 1, "expected scalar");
        self.nodes[v.0].data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn value_tensor(&self, v: Var) -> Tensor {
        Tensor::from_vec(self.nodes[v.0].data.clone(), &self.nodes[v.0].shape)
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { data, shape, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    // ── Leaves ───────────────────────────────────────────────────────

    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Var {
        self.push(data, shape.to_vec(), false, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.constant(vec![x], &[1])
    }

    /// Copy a tensor onto the tape, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.data.clone(), t.shape.clone(), t.requires_grad, Op::Leaf)
    }

    /// Register every parameter of a set as a leaf, keyed by name.
    pub fn register(&mut self, params: &ParamSet) -> BTreeMap<String, Var> {
        let mut map = BTreeMap::new();
        for (name, t) in params.iter() {
            map.insert(name.clone(), self.leaf(t));
        }
        map
    }

    /// Move gradients produced by `backward` into the parameter set.
    pub fn write_grads(&self, params: &mut ParamSet, vars: &BTreeMap<String, Var>) {
        for (name, var) in vars {
            if let Some(g) = self.grad(*var) {
                params.get_mut(name).accumulate_grad(g);
            }
        }
    }

    // ── Elementwise binary ───────────────────────────────────────────

    fn binary_shapes(&self, a: Var, b: Var, op: &str) -> (Vec<usize>, bool) {
        assert_eq!(self.shape(a), self.shape(b), "{op}: shape mismatch {:?} vs {:?}", self.shape(a), self.shape(b));
        (self.shape(a).to_vec(), self.requires_grad(a) || self.requires_grad(b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (shape, rg) = self.binary_shapes(a, b, "add");
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        self.push(data, shape, rg, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (shape, rg) = self.binary_shapes(a, b, "sub");
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        self.push(data, shape, rg, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (shape, rg) = self.binary_shapes(a, b, "mul");
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        self.push(data, shape, rg, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.data(a).iter().map(|x| x + c).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.requires_grad(a));
        self.push(data, shape, rg, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.data(a).iter().map(|x| x * c).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.requires_grad(a));
        self.push(data, shape, rg, Op::MulScalar(a, c))
    }

    /// `1 - x`, a common subexpression in compositing and the regularizers.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.mul_scalar(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    // ── Matrix ops ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.len(), 2, "matmul lhs must be rank 2");
        assert_eq!(sb.len(), 2, "matmul rhs must be rank 2");
        assert_eq!(sa[1], sb[0], "matmul inner dims {} vs {}", sa[1], sb[0]);
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let data = kernels::mm(self.data(a), self.data(b), m, k, n);
        self.push(data, vec![m, n], rg, Op::MatMul { a, b, m, k, n })
    }

    /// `x [rows, d_in] . w [d_in, d_out] + bias [d_out]`.
    pub fn affine(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(bias));
        assert_eq!(sx.len(), 2, "affine input must be rank 2");
        assert_eq!(sw.len(), 2, "affine weight must be rank 2");
        assert_eq!(sx[1], sw[0], "affine dims {} vs {}", sx[1], sw[0]);
        assert_eq!(sb, &[sw[1]], "affine bias shape");
        let (rows, d_in, d_out) = (sx[0], sx[1], sw[1]);
        let rg = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(bias);
        let data = kernels::affine(self.data(x), self.data(w), self.data(bias), rows, d_in, d_out);
        self.push(data, vec![rows, d_out], rg, Op::Affine { x, w, bias, rows, d_in, d_out })
    }

    // ── Elementwise unary ────────────────────────────────────────────

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.requires_grad(x));
        self.push(data, shape, rg, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + fmath::exp(-v)), Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, fmath::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        assert!(
            self.data(x).iter().all(|&v| v > 0.0),
            "ln: domain error, input must be strictly positive"
        );
        self.unary(x, fmath::ln, Op::Ln(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, fmath::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        assert!(
            self.data(x).iter().all(|&v| v >= 0.0),
            "sqrt: domain error, input must be non-negative"
        );
        self.unary(x, fmath::sqrt, Op::Sqrt(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, fmath::sin, Op::Sin(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, fmath::cos, Op::Cos(x))
    }

    pub fn min_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| if v < c { v } else { c }, Op::MinConst(x, c))
    }

    pub fn max_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| if v > c { v } else { c }, Op::MaxConst(x, c))
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let (outer, len, inner) = axis_split(self.shape(x), axis);
        let xd = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let out_row = &mut out[o * inner..(o + 1) * inner];
            for a in 0..len {
                let row = &xd[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (ov, v) in out_row.iter_mut().zip(row) {
                    *ov += v;
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.requires_grad(x);
        self.push(out, shape, rg, Op::SumAxis { x, axis })
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let len = self.shape(x)[axis] as f64;
        let s = self.sum_axis(x, axis);
        // Recorded as its own op for a clean vjp.
        let data = self.data(s).iter().map(|v| v / len).collect();
        let (shape, rg) = (self.shape(s).to_vec(), self.requires_grad(s));
        self.nodes.pop();
        self.push(data, shape, rg, Op::MeanAxis { x, axis })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        let rg = self.requires_grad(x);
        self.push(vec![s], vec![1], rg, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.numel(x) as f64;
        let s: f64 = self.data(x).iter().sum();
        let rg = self.requires_grad(x);
        self.push(vec![s / n], vec![1], rg, Op::MeanAll(x))
    }

    // ── Shape ops ────────────────────────────────────────────────────

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let rank = self.shape(xs[0]).len();
        for &x in xs {
            assert_eq!(self.shape(x).len(), rank, "concat rank mismatch");
            for d in 0..rank {
                if d != axis {
                    assert_eq!(
                        self.shape(x)[d],
                        self.shape(xs[0])[d],
                        "concat shape mismatch off-axis"
                    );
                }
            }
        }
        let mut shape = self.shape(xs[0]).to_vec();
        shape[axis] = xs.iter().map(|&x| self.shape(x)[axis]).sum();
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; shape.iter().product()];
        let total_axis = shape[axis];
        let mut offset = 0;
        for &x in xs {
            let ax = self.shape(x)[axis];
            let xd = self.data(x);
            for o in 0..outer {
                let src = &xd[o * ax * inner..(o + 1) * ax * inner];
                let dst_start = (o * total_axis + offset) * inner;
                out[dst_start..dst_start + ax * inner].copy_from_slice(src);
            }
            offset += ax;
        }
        let rg = xs.iter().any(|&x| self.requires_grad(x));
        self.push(out, shape, rg, Op::Concat { xs: xs.to_vec(), axis })
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Var {
        let (outer, len, inner) = axis_split(self.shape(x), axis);
        assert!(start < end && end <= len, "slice [{start}, {end}) out of range for axis of {len}");
        let span = end - start;
        let xd = self.data(x);
        let mut out = vec![0.0; outer * span * inner];
        for o in 0..outer {
            let src = &xd[(o * len + start) * inner..(o * len + end) * inner];
            out[o * span * inner..(o + 1) * span * inner].copy_from_slice(src);
        }
        let mut shape = self.shape(x).to_vec();
        shape[axis] = span;
        let rg = self.requires_grad(x);
        self.push(out, shape, rg, Op::Slice { x, axis, start, end })
    }

    pub fn cumsum(&mut self, x: Var, axis: usize) -> Var {
        let (outer, len, inner) = axis_split(self.shape(x), axis);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                if a == 0 {
                    out[base..base + inner].copy_from_slice(&xd[base..base + inner]);
                } else {
                    let prev = base - inner;
                    for i in 0..inner {
                        out[base + i] = out[prev + i] + xd[base + i];
                    }
                }
            }
        }
        let (shape, rg) = (self.shape(x).to_vec(), self.requires_grad(x));
        self.push(out, shape, rg, Op::Cumsum { x, axis })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        assert_eq!(
            self.numel(x),
            shape.iter().product::<usize>(),
            "reshape element count mismatch"
        );
        let (data, rg) = (self.data(x).to_vec(), self.requires_grad(x));
        self.push(data, shape.to_vec(), rg, Op::Reshape(x))
    }

    // ── Field-specific ops ───────────────────────────────────────────

    /// Frequency encoding of `x [rows, dim]` into `[rows, dim * block]` with
    /// `block = include_input + 2 * num_freqs`. Per component the block is
    /// `[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)]`.
    pub fn posenc(&mut self, x: Var, num_freqs: usize, include_input: bool) -> Var {
        let sx = self.shape(x);
        assert_eq!(sx.len(), 2, "posenc input must be rank 2");
        let (rows, dim) = (sx[0], sx[1]);
        let block = usize::from(include_input) + 2 * num_freqs;
        let xd = self.data(x);
        let mut out = vec![0.0; rows * dim * block];
        for r in 0..rows {
            for c in 0..dim {
                let v = xd[r * dim + c];
                let mut w = (r * dim + c) * block;
                if include_input {
                    out[w] = v;
                    w += 1;
                }
                if num_freqs > 0 {
                    // Doubling recurrence from sin/cos(pi x).
                    let mut s = fmath::sin(core::f64::consts::PI * v);
                    let mut cc = fmath::cos(core::f64::consts::PI * v);
                    for _ in 0..num_freqs {
                        out[w] = s;
                        out[w + 1] = cc;
                        w += 2;
                        let s2 = 2.0 * s * cc;
                        let c2 = cc * cc - s * s;
                        s = s2;
                        cc = c2;
                    }
                }
            }
        }
        let rg = self.requires_grad(x);
        self.push(out, vec![rows, dim * block], rg, Op::PosEnc { x, num_freqs, include_input, dim })
    }

    /// Tile `x [1, c]` into `[n, c]`.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Var {
        let sx = self.shape(x);
        assert_eq!(sx.len(), 2, "repeat_rows input must be rank 2");
        assert_eq!(sx[0], 1, "repeat_rows input must have one row");
        let c = sx[1];
        let xd = self.data(x);
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(xd);
        }
        let rg = self.requires_grad(x);
        self.push(out, vec![n, c], rg, Op::RepeatRows { x, n })
    }

    /// Scale row `i` of `x [n, c]` by `scale[i]` (`scale [n]`).
    pub fn scale_rows(&mut self, scale: Var, x: Var) -> Var {
        let (ss, sx) = (self.shape(scale), self.shape(x));
        assert_eq!(sx.len(), 2, "scale_rows input must be rank 2");
        assert_eq!(ss, &[sx[0]], "scale_rows scale must be [rows]");
        let (n, c) = (sx[0], sx[1]);
        let (sd, xd) = (self.data(scale), self.data(x));
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let si = sd[i];
            let row = &xd[i * c..(i + 1) * c];
            let orow = &mut out[i * c..(i + 1) * c];
            for (o, v) in orow.iter_mut().zip(row) {
                *o = si * v;
            }
        }
        let rg = self.requires_grad(scale) || self.requires_grad(x);
        self.push(out, vec![n, c], rg, Op::ScaleRows { scale, x })
    }

    /// Average rows of `x [n_in, c]` into groups (see [`ScatterMap`]).
    pub fn scatter_mean(&mut self, x: Var, map: Arc<ScatterMap>) -> Var {
        let sx = self.shape(x);
        assert_eq!(sx.len(), 2, "scatter_mean input must be rank 2");
        let c = sx[1];
        assert_eq!(map.starts.len(), map.n_out + 1, "scatter map starts length");
        let xd = self.data(x);
        let mut out = vec![0.0; map.n_out * c];
        for g in 0..map.n_out {
            let members = &map.members[map.starts[g] as usize..map.starts[g + 1] as usize];
            if members.is_empty() {
                continue;
            }
            let inv = 1.0 / members.len() as f64;
            let orow = &mut out[g * c..(g + 1) * c];
            for &m in members {
                let row = &xd[m as usize * c..(m as usize + 1) * c];
                for (o, v) in orow.iter_mut().zip(row) {
                    *o += v;
                }
            }
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        let rg = self.requires_grad(x);
        let n_out = map.n_out;
        self.push(out, vec![n_out, c], rg, Op::ScatterMean { x, map })
    }

    /// Weighted gather of rows (see [`GatherMap`]); rows of the output are
    /// linear combinations of input rows.
    pub fn gather_weighted(&mut self, x: Var, map: Arc<GatherMap>) -> Var {
        let sx = self.shape(x);
        assert_eq!(sx.len(), 2, "gather_weighted input must be rank 2");
        let c = sx[1];
        let xd = self.data(x);
        let mut out = vec![0.0; map.n_out * c];
        for e in &map.entries {
            let row = &xd[e.src as usize * c..(e.src as usize + 1) * c];
            let orow = &mut out[e.out as usize * c..(e.out as usize + 1) * c];
            for (o, v) in orow.iter_mut().zip(row) {
                *o += e.weight * v;
            }
        }
        let rg = self.requires_grad(x);
        let n_out = map.n_out;
        self.push(out, vec![n_out, c], rg, Op::GatherWeighted { x, map })
    }

    /// Submanifold sparse convolution: `x [n_vox, c_in]`, `w [taps, c_in, c_out]`,
    /// optional `bias [c_out]` -> `[n_vox, c_out]`.
    pub fn sparse_conv(&mut self, x: Var, w: Var, bias: Option<Var>, map: Arc<ConvMap>) -> Var {
        let (sx, sw) = (self.shape(x), self.shape(w));
        assert_eq!(sx.len(), 2, "sparse_conv input must be rank 2");
        assert_eq!(sw.len(), 3, "sparse_conv weight must be [taps, c_in, c_out]");
        assert_eq!(sw[0], map.n_taps, "sparse_conv tap count");
        assert_eq!(sw[1], sx[1], "sparse_conv c_in mismatch");
        let n_vox = sx[0];
        let (c_in, c_out) = (sw[1], sw[2]);
        let (xd, wd) = (self.data(x), self.data(w));
        let mut out = vec![0.0; n_vox * c_out];
        if let Some(b) = bias {
            assert_eq!(self.shape(b), &[c_out], "sparse_conv bias shape");
            let bd = self.data(b);
            for row in out.chunks_exact_mut(c_out) {
                row.copy_from_slice(bd);
            }
        }
        for p in &map.pairs {
            let x_row = &xd[p.src as usize * c_in..(p.src as usize + 1) * c_in];
            let w_tap = &wd[p.tap as usize * c_in * c_out..(p.tap as usize + 1) * c_in * c_out];
            let orow = &mut out[p.out as usize * c_out..(p.out as usize + 1) * c_out];
            for (ci, &xv) in x_row.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let w_row = &w_tap[ci * c_out..(ci + 1) * c_out];
                for (o, wv) in orow.iter_mut().zip(w_row) {
                    *o += xv * wv;
                }
            }
        }
        let rg = self.requires_grad(x)
            || self.requires_grad(w)
            || bias.map(|b| self.requires_grad(b)).unwrap_or(false);
        self.push(out, vec![n_vox, c_out], rg, Op::SparseConv { x, w, bias, map })
    }

    // ── Backward ─────────────────────────────────────────────────────

    fn accum(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, contrib: impl Fn(&mut [f64])) {
        if !nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].data.len()]);
        contrib(slot);
    }

    /// Reverse sweep from a scalar loss. Populates gradients for every
    /// reachable node with `requires_grad`; earlier results are discarded.
    pub fn backward(&mut self, loss: Var) {
        assert!(!self.nodes.is_empty(), "backward on empty tape");
        assert_eq!(self.numel(loss), 1, "backward target must be scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.apply_vjp(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
    }

    fn apply_vjp(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::accum(grads, nodes, *a, |s| {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si += gi;
                    }
                });
                Self::accum(grads, nodes, *b, |s| {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si += gi;
                    }
                });
            }
            Op::Sub(a, b) => {
                Self::accum(grads, nodes, *a, |s| {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si += gi;
                    }
                });
                Self::accum(grads, nodes, *b, |s| {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si -= gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
                Self::accum(grads, nodes, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bd[i];
                    }
                });
                Self::accum(grads, nodes, *b, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * ad[i];
                    }
                });
            }
            Op::AddScalar(a) => {
                Self::accum(grads, nodes, *a, |s| {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si += gi;
                    }
                });
            }
            Op::MulScalar(a, c) => {
                let c = *c;
                Self::accum(grads, nodes, *a, |s| {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si += c * gi;
                    }
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
                if nodes[a.0].requires_grad {
                    // dA = dY . B^T
                    let bt = kernels::transpose(bd, k, n);
                    let da = kernels::mm(g, &bt, m, n, k);
                    Self::accum(grads, nodes, *a, |s| {
                        for (si, v) in s.iter_mut().zip(&da) {
                            *si += v;
                        }
                    });
                }
                if nodes[b.0].requires_grad {
                    // dB = A^T . dY
                    let db = kernels::mm_at_b(ad, g, m, k, n);
                    Self::accum(grads, nodes, *b, |s| {
                        for (si, v) in s.iter_mut().zip(&db) {
                            *si += v;
                        }
                    });
                }
            }
            Op::Affine { x, w, bias, rows, d_in, d_out } => {
                let (rows, d_in, d_out) = (*rows, *d_in, *d_out);
                let (xd, wd) = (&nodes[x.0].data, &nodes[w.0].data);
                if nodes[x.0].requires_grad {
                    let wt = kernels::transpose(wd, d_in, d_out);
                    let dx = kernels::mm(g, &wt, rows, d_out, d_in);
                    Self::accum(grads, nodes, *x, |s| {
                        for (si, v) in s.iter_mut().zip(&dx) {
                            *si += v;
                        }
                    });
                }
                if nodes[w.0].requires_grad {
                    let dw = kernels::mm_at_b(xd, g, rows, d_in, d_out);
                    Self::accum(grads, nodes, *w, |s| {
                        for (si, v) in s.iter_mut().zip(&dw) {
                            *si += v;
                        }
                    });
                }
                if nodes[bias.0].requires_grad {
                    let db = kernels::col_sums(g, rows, d_out);
                    Self::accum(grads, nodes, *bias, |s| {
                        for (si, v) in s.iter_mut().zip(&db) {
                            *si += v;
                        }
                    });
                }
            }
            Op::Relu(a) => {
                let ad = &nodes[a.0].data;
                Self::accum(grads, nodes, *a, |s| {
                    for i in 0..s.len() {
                        if ad[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.data;
                Self::accum(grads, nodes, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Exp(a) => {
                let y = &node.data;
                Self::accum(grads, nodes, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i];
                    }
                });
            }
            Op::Ln(a) => {
                let ad = &nodes[a.0].data;
                Self::accum(grads, nodes, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / ad[i];
                    }
                });
            }
            Op::Neg(a) => {
                Self::accum(grads, nodes, *a, |s| {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si -= gi;
                    }
                });
            }
            Op::Abs(a) => {
                let ad = &nodes[a.0].data;
                Self::accum(grads, nodes, *a, |s| {
                    for i in 0..s.len() {
                        if ad[i] > 0.0 {
                            s[i] += g[i];
                        } else if ad[i] < 0.0 {
                            s[i] -= g[i];
                        }
                    }
                });
            }
            Op::Square(a) => {
                let ad = &nodes[a.0].data;
                Self::accum(grads, nodes, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += 2.0 * ad[i] * g[i];
                    }
                });
            }
            Op::Sqrt(a) => {
                let y = &node.data;
                Self::accum(grads, nodes, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / (2.0 * y[i]);
                    }
                });
            }
            Op::Sin(a) => {
                let ad = &nodes[a.0].data;
                Self::accum(grads, nodes, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * fmath::cos(ad[i]);
                    }
                });
            }
            Op::Cos(a) => {
                let ad = &nodes[a.0].data;
                Self::accum(grads, nodes, *a, |s| {
                    for i in 0..s.len() {
                        s[i] -= g[i] * fmath::sin(ad[i]);
                    }
                });
            }
            Op::MinConst(a, c) => {
                let (ad, c) = (&nodes[a.0].data, *c);
                Self::accum(grads, nodes, *a, |s| {
                    for i in 0..s.len() {
                        if ad[i] < c {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::MaxConst(a, c) => {
                let (ad, c) = (&nodes[a.0].data, *c);
                Self::accum(grads, nodes, *a, |s| {
                    for i in 0..s.len() {
                        if ad[i] > c {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = axis_split(&nodes[x.0].shape, *axis);
                Self::accum(grads, nodes, *x, |s| {
                    for o in 0..outer {
                        let grow = &g[o * inner..(o + 1) * inner];
                        for a in 0..len {
                            let srow = &mut s[(o * len + a) * inner..(o * len + a + 1) * inner];
                            for (si, gi) in srow.iter_mut().zip(grow) {
                                *si += gi;
                            }
                        }
                    }
                });
            }
            Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = axis_split(&nodes[x.0].shape, *axis);
                let inv = 1.0 / len as f64;
                Self::accum(grads, nodes, *x, |s| {
                    for o in 0..outer {
                        let grow = &g[o * inner..(o + 1) * inner];
                        for a in 0..len {
                            let srow = &mut s[(o * len + a) * inner..(o * len + a + 1) * inner];
                            for (si, gi) in srow.iter_mut().zip(grow) {
                                *si += inv * gi;
                            }
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let gv = g[0];
                Self::accum(grads, nodes, *x, |s| {
                    for si in s.iter_mut() {
                        *si += gv;
                    }
                });
            }
            Op::MeanAll(x) => {
                let gv = g[0] / nodes[x.0].data.len() as f64;
                Self::accum(grads, nodes, *x, |s| {
                    for si in s.iter_mut() {
                        *si += gv;
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let total_axis = node.shape[*axis];
                let (outer, _, inner) = axis_split(&node.shape, *axis);
                let mut offset = 0;
                for &x in xs {
                    let ax = nodes[x.0].shape[*axis];
                    Self::accum(grads, nodes, x, |s| {
                        for o in 0..outer {
                            let src_start = (o * total_axis + offset) * inner;
                            let grow = &g[src_start..src_start + ax * inner];
                            let srow = &mut s[o * ax * inner..(o + 1) * ax * inner];
                            for (si, gi) in srow.iter_mut().zip(grow) {
                                *si += gi;
                            }
                        }
                    });
                    offset += ax;
                }
            }
            Op::Slice { x, axis, start, end } => {
                let (outer, len, inner) = axis_split(&nodes[x.0].shape, *axis);
                let span = end - start;
                Self::accum(grads, nodes, *x, |s| {
                    for o in 0..outer {
                        let grow = &g[o * span * inner..(o + 1) * span * inner];
                        let dst = &mut s[(o * len + start) * inner..(o * len + end) * inner];
                        for (si, gi) in dst.iter_mut().zip(grow) {
                            *si += gi;
                        }
                    }
                });
            }
            Op::Cumsum { x, axis } => {
                // d/dx_i of sum over cumsum = suffix sums of the incoming grad.
                let (outer, len, inner) = axis_split(&nodes[x.0].shape, *axis);
                Self::accum(grads, nodes, *x, |s| {
                    for o in 0..outer {
                        let mut suffix = vec![0.0; inner];
                        for a in (0..len).rev() {
                            let base = (o * len + a) * inner;
                            for i in 0..inner {
                                suffix[i] += g[base + i];
                                s[base + i] += suffix[i];
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                Self::accum(grads, nodes, *x, |s| {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si += gi;
                    }
                });
            }
            Op::PosEnc { x, num_freqs, include_input, dim } => {
                let (num_freqs, include_input, dim) = (*num_freqs, *include_input, *dim);
                let block = usize::from(include_input) + 2 * num_freqs;
                let y = &node.data;
                let rows = nodes[x.0].shape[0];
                Self::accum(grads, nodes, *x, |s| {
                    for r in 0..rows {
                        for c in 0..dim {
                            let mut acc = 0.0;
                            let mut w = (r * dim + c) * block;
                            if include_input {
                                acc += g[w];
                                w += 1;
                            }
                            let mut freq = core::f64::consts::PI;
                            for _ in 0..num_freqs {
                                let (sv, cv) = (y[w], y[w + 1]);
                                acc += g[w] * freq * cv - g[w + 1] * freq * sv;
                                w += 2;
                                freq *= 2.0;
                            }
                            s[r * dim + c] += acc;
                        }
                    }
                });
            }
            Op::RepeatRows { x, n } => {
                let c = nodes[x.0].shape[1];
                let n = *n;
                Self::accum(grads, nodes, *x, |s| {
                    for r in 0..n {
                        let grow = &g[r * c..(r + 1) * c];
                        for (si, gi) in s.iter_mut().zip(grow) {
                            *si += gi;
                        }
                    }
                });
            }
            Op::ScaleRows { scale, x } => {
                let (sd, xd) = (&nodes[scale.0].data, &nodes[x.0].data);
                let c = nodes[x.0].shape[1];
                Self::accum(grads, nodes, *scale, |s| {
                    for i in 0..s.len() {
                        let mut acc = 0.0;
                        for j in 0..c {
                            acc += g[i * c + j] * xd[i * c + j];
                        }
                        s[i] += acc;
                    }
                });
                Self::accum(grads, nodes, *x, |s| {
                    for i in 0..sd.len() {
                        let si = sd[i];
                        for j in 0..c {
                            s[i * c + j] += si * g[i * c + j];
                        }
                    }
                });
            }
            Op::ScatterMean { x, map } => {
                let c = nodes[x.0].shape[1];
                Self::accum(grads, nodes, *x, |s| {
                    for gidx in 0..map.n_out {
                        let members =
                            &map.members[map.starts[gidx] as usize..map.starts[gidx + 1] as usize];
                        if members.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / members.len() as f64;
                        let grow = &g[gidx * c..(gidx + 1) * c];
                        for &m in members {
                            let srow = &mut s[m as usize * c..(m as usize + 1) * c];
                            for (si, gi) in srow.iter_mut().zip(grow) {
                                *si += inv * gi;
                            }
                        }
                    }
                });
            }
            Op::GatherWeighted { x, map } => {
                let c = nodes[x.0].shape[1];
                Self::accum(grads, nodes, *x, |s| {
                    for e in &map.entries {
                        let grow = &g[e.out as usize * c..(e.out as usize + 1) * c];
                        let srow = &mut s[e.src as usize * c..(e.src as usize + 1) * c];
                        for (si, gi) in srow.iter_mut().zip(grow) {
                            *si += e.weight * gi;
                        }
                    }
                });
            }
            Op::SparseConv { x, w, bias, map } => {
                let (xd, wd) = (&nodes[x.0].data, &nodes[w.0].data);
                let c_in = nodes[x.0].shape[1];
                let c_out = node.shape[1];
                if nodes[x.0].requires_grad {
                    // Transposed taps once: [taps][c_out, c_in].
                    let mut wt = Vec::with_capacity(map.n_taps);
                    for t in 0..map.n_taps {
                        wt.push(kernels::transpose(
                            &wd[t * c_in * c_out..(t + 1) * c_in * c_out],
                            c_in,
                            c_out,
                        ));
                    }
                    Self::accum(grads, nodes, *x, |s| {
                        for p in &map.pairs {
                            let grow = &g[p.out as usize * c_out..(p.out as usize + 1) * c_out];
                            let tap = &wt[p.tap as usize];
                            let srow = &mut s[p.src as usize * c_in..(p.src as usize + 1) * c_in];
                            for (co, &gv) in grow.iter().enumerate() {
                                if gv == 0.0 {
                                    continue;
                                }
                                let trow = &tap[co * c_in..(co + 1) * c_in];
                                for (si, tv) in srow.iter_mut().zip(trow) {
                                    *si += gv * tv;
                                }
                            }
                        }
                    });
                }
                if nodes[w.0].requires_grad {
                    Self::accum(grads, nodes, *w, |s| {
                        for p in &map.pairs {
                            let grow = &g[p.out as usize * c_out..(p.out as usize + 1) * c_out];
                            let x_row = &xd[p.src as usize * c_in..(p.src as usize + 1) * c_in];
                            let tap_base = p.tap as usize * c_in * c_out;
                            for (ci, &xv) in x_row.iter().enumerate() {
                                if xv == 0.0 {
                                    continue;
                                }
                                let srow = &mut s[tap_base + ci * c_out..tap_base + (ci + 1) * c_out];
                                for (si, gi) in srow.iter_mut().zip(grow) {
                                    *si += xv * gi;
                                }
                            }
                        }
                    });
                }
                if let Some(b) = bias {
                    if nodes[b.0].requires_grad {
                        let rows = node.shape[0];
                        let db = kernels::col_sums(g, rows, c_out);
                        Self::accum(grads, nodes, *b, |s| {
                            for (si, v) in s.iter_mut().zip(&db) {
                                *si += v;
                            }
                        });
                    }
                }
            }
        }
    }
}
