//! Recorded-operation reverse-mode differentiation.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and the inputs it was computed from. [`Graph::backward`] walks the
//! tape in reverse and accumulates gradients for every node that depends on a
//! trainable leaf. Values are always viewed as 2-D `[rows, cols]` matrices.
//!
//! Primitive operations panic on shape mismatch; the layer-level functions in
//! [`crate::nn::layers`] validate shapes first and surface
//! [`Error::Contract`](crate::Error::Contract) instead.

use std::collections::HashMap;
use std::sync::Arc;

use super::linalg::{gemm, Trans};
use super::{Module, Parameter, Tensor};
use crate::error::{contract, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a 3x3, zero-padded convolution on a channels-last image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height - 1) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - 1) / self.stride + 1
    }

    fn patch(&self) -> usize {
        9 * self.cin
    }
}

/// Sparse row operator: output row `r` is `Σ w · x[i]` over `rows[r]`.
pub type SparseRows = Vec<Vec<(usize, f32)>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Sqrt(Var),
    Abs(Var),
    Clamp { x: Var, lo: Arc<Vec<f32>>, hi: Arc<Vec<f32>> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    GatherRows { x: Var, idx: Arc<Vec<usize>> },
    ScatterRows { base: Var, idx: Arc<Vec<usize>>, values: Var },
    SegmentMax { x: Var, argmax: Vec<usize> },
    SegmentSum { x: Var, seg: Arc<Vec<usize>> },
    SegmentLogSoftmax { x: Var, offsets: Arc<Vec<usize>> },
    Sum(Var),
    Mean(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom, rows: Option<Arc<Vec<usize>>> },
    Sparse { x: Var, rows: Arc<SparseRows> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation tape with forward values and, after [`Graph::backward`], gradients.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    grads: Vec<Option<Vec<f32>>>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

const CONV_CHUNK: usize = 1024;

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph whose parameters are bound as constants (inference).
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by graph op");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    pub fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].value.item()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_matrix(&mut self, rows: usize, cols: usize, data: Vec<f32>) -> Var {
        let t = Tensor::matrix(rows, cols, data).expect("constant_matrix: bad length");
        self.constant(t)
    }

    pub fn constant_column(&mut self, data: Vec<f32>) -> Var {
        self.constant(Tensor::column(data))
    }

    /// Trainable leaf; binding the same parameter twice returns the same node.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if let Some(&v) = self.params.get(p.name()) {
            return v;
        }
        let v = self.push(p.value().clone(), Op::Leaf, self.grad_enabled);
        self.params.insert(p.name().to_string(), v);
        v
    }

    fn unary(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).unwrap();
        let ng = self.ng(x);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op, name: &str) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.dims2(),
            tb.dims2(),
            "{name}: shape {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(value, op, ng)
    }

    /// `[m,k]·[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), Trans::No, self.data(b), Trans::No, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::matrix(m, n, out).unwrap(), Op::MatMul(a, b), ng)
    }

    /// Adds row vector `b` (`[n]` or `[1,n]`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = self.dims(a);
        let (r, n2) = self.dims(b);
        assert!(r == 1 && n == n2, "add_row: {m}x{n} + {r}x{n2}");
        let bias = self.data(b).to_vec();
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            row.iter_mut().zip(&bias).for_each(|(o, b)| *o += b);
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::matrix(m, n, out).unwrap(), Op::AddRow(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b), "div")
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f32) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0) + (-v.abs()).exp().ln_1p(), Op::Softplus(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, f32::sin, Op::Sin(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, f32::cos, Op::Cos(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f32::exp, Op::Exp(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f32::sqrt, Op::Sqrt(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f32::abs, Op::Abs(x))
    }

    /// Elementwise clamp to per-element bounds. Gradient passes where the input
    /// lies within `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: Vec<f32>, hi: Vec<f32>) -> Var {
        let t = self.value(x);
        assert!(lo.len() == t.len() && hi.len() == t.len(), "clamp: bound length");
        let data = t
            .data()
            .iter()
            .zip(lo.iter().zip(&hi))
            .map(|(&v, (&l, &h))| v.max(l).min(h))
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data).unwrap();
        let ng = self.ng(x);
        self.push(
            value,
            Op::Clamp {
                x,
                lo: Arc::new(lo),
                hi: Arc::new(hi),
            },
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let m = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.dims(p);
                assert_eq!(r, m, "concat_cols: row counts {r} vs {m}");
                c
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.data(p);
            for r in 0..m {
                out[r * n + off..r * n + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::matrix(m, n, out).unwrap(), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.dims(x);
        assert!(start + len <= n, "slice_cols: {start}+{len} > {n}");
        let src = self.data(x);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let ng = self.ng(x);
        self.push(Tensor::matrix(m, len, out).unwrap(), Op::SliceCols { x, start }, ng)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.len(), rows * cols, "reshape: {} values into {rows}x{cols}", t.len());
        let value = Tensor::matrix(rows, cols, t.data().to_vec()).unwrap();
        let ng = self.ng(x);
        self.push(value, Op::Reshape(x), ng)
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let (m, n) = self.dims(x);
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            assert!(i < m, "gather_rows: index {i} out of {m}");
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let value = Tensor::matrix(idx.len(), n, out).unwrap();
        let ng = self.ng(x);
        self.push(
            value,
            Op::GatherRows {
                x,
                idx: Arc::new(idx),
            },
            ng,
        )
    }

    /// Copy of `base` with rows `idx` replaced by the rows of `values`.
    /// Indices must be unique.
    pub fn scatter_rows(&mut self, base: Var, idx: Vec<usize>, values: Var) -> Var {
        let (m, n) = self.dims(base);
        let (k, n2) = self.dims(values);
        assert!(n == n2 && k == idx.len(), "scatter_rows: shapes");
        let mut out = self.data(base).to_vec();
        let src = self.data(values);
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < m, "scatter_rows: index {i} out of {m}");
            out[i * n..(i + 1) * n].copy_from_slice(&src[r * n..(r + 1) * n]);
        }
        let ng = self.ng(base) || self.ng(values);
        self.push(
            Tensor::matrix(m, n, out).unwrap(),
            Op::ScatterRows {
                base,
                idx: Arc::new(idx),
                values,
            },
            ng,
        )
    }

    /// Per-segment column-wise max. `seg[r]` is the segment of row `r`; every
    /// segment in `0..nseg` must own at least one row.
    pub fn segment_max(&mut self, x: Var, seg: &[usize], nseg: usize) -> Var {
        let (m, n) = self.dims(x);
        assert_eq!(seg.len(), m, "segment_max: {} labels for {m} rows", seg.len());
        let src = self.data(x);
        let mut out = vec![f32::NEG_INFINITY; nseg * n];
        let mut argmax = vec![usize::MAX; nseg * n];
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..n {
                let v = src[r * n + c];
                let o = s * n + c;
                if argmax[o] == usize::MAX || v > out[o] {
                    out[o] = v;
                    argmax[o] = r;
                }
            }
        }
        assert!(
            n == 0 || argmax.iter().all(|&a| a != usize::MAX),
            "segment_max: empty segment"
        );
        let ng = self.ng(x);
        self.push(
            Tensor::matrix(nseg, n, out).unwrap(),
            Op::SegmentMax { x, argmax },
            ng,
        )
    }

    pub fn segment_sum(&mut self, x: Var, seg: Vec<usize>, nseg: usize) -> Var {
        let (m, n) = self.dims(x);
        assert_eq!(seg.len(), m, "segment_sum: labels");
        let src = self.data(x);
        let mut out = vec![0.0; nseg * n];
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..n {
                out[s * n + c] += src[r * n + c];
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::matrix(nseg, n, out).unwrap(),
            Op::SegmentSum {
                x,
                seg: Arc::new(seg),
            },
            ng,
        )
    }

    /// Log-softmax of a column vector within contiguous segments
    /// `offsets[s]..offsets[s+1]`.
    pub fn segment_log_softmax(&mut self, x: Var, offsets: Vec<usize>) -> Var {
        let (m, n) = self.dims(x);
        assert_eq!(n, 1, "segment_log_softmax: expects a column");
        assert_eq!(*offsets.last().unwrap_or(&0), m, "segment_log_softmax: offsets");
        let src = self.data(x);
        let mut out = vec![0.0; m];
        for w in offsets.windows(2) {
            let seg = &src[w[0]..w[1]];
            if seg.is_empty() {
                continue;
            }
            let mx = seg.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = mx + seg.iter().map(|v| (v - mx).exp()).sum::<f32>().ln();
            for (o, v) in out[w[0]..w[1]].iter_mut().zip(seg) {
                *o = v - lse;
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::column(out),
            Op::SegmentLogSoftmax {
                x,
                offsets: Arc::new(offsets),
            },
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().map(|&v| v as f64).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s as f32), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        assert!(!t.is_empty(), "mean of empty tensor");
        let s = (t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64) as f32;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// 3x3 zero-padded convolution. `x` is `[H*W, cin]` channels-last, `w` is
    /// `[9*cin, cout]` with row index `(ky*3 + kx)*cin + ci`.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Var {
        self.conv2d_impl(x, w, geom, None)
    }

    /// Convolution evaluated only at the output rows `rows`; every other output
    /// row is zero. Values at listed rows equal those of [`conv2d`](Self::conv2d).
    pub fn conv2d_rows(&mut self, x: Var, w: Var, geom: ConvGeom, rows: Arc<Vec<usize>>) -> Var {
        let n = geom.out_height() * geom.out_width();
        assert!(rows.iter().all(|&r| r < n), "conv2d_rows: row out of range");
        self.conv2d_impl(x, w, geom, Some(rows))
    }

    fn conv2d_impl(&mut self, x: Var, w: Var, geom: ConvGeom, rows: Option<Arc<Vec<usize>>>) -> Var {
        assert_eq!(
            self.dims(x),
            (geom.height * geom.width, geom.cin),
            "conv2d: input shape"
        );
        assert_eq!(self.dims(w), (geom.patch(), geom.cout), "conv2d: weight shape");
        let n_out = geom.out_height() * geom.out_width();
        let mut out = vec![0.0; n_out * geom.cout];
        let mut col = Vec::new();
        let mut buf = Vec::new();
        let (xs, ws) = (self.data(x), self.data(w));
        for_each_chunk(rows.as_deref().map(|r| r.as_slice()), n_out, |chunk| {
            im2col(xs, &geom, chunk, &mut col);
            buf.resize(chunk.len() * geom.cout, 0.0);
            gemm(chunk.len(), geom.patch(), geom.cout, &col, Trans::No, ws, Trans::No, &mut buf, false);
            for (&r, src) in chunk.iter().zip(buf.chunks(geom.cout)) {
                out[r * geom.cout..(r + 1) * geom.cout].copy_from_slice(src);
            }
        });
        let ng = self.ng(x) || self.ng(w);
        self.push(
            Tensor::matrix(n_out, geom.cout, out).unwrap(),
            Op::Conv2d { x, w, geom, rows },
            ng,
        )
    }

    /// Applies a fixed sparse row operator: `out[r] = Σ_(i,w) w·x[i]`.
    pub fn sparse_rows(&mut self, x: Var, rows: Arc<SparseRows>) -> Var {
        let (m, n) = self.dims(x);
        let src = self.data(x);
        let mut out = vec![0.0; rows.len() * n];
        for (r, taps) in rows.iter().enumerate() {
            let dst = &mut out[r * n..(r + 1) * n];
            for &(i, wt) in taps {
                assert!(i < m, "sparse_rows: index {i} out of {m}");
                dst.iter_mut()
                    .zip(&src[i * n..(i + 1) * n])
                    .for_each(|(d, s)| *d += wt * s);
            }
        }
        let ng = self.ng(x);
        let k = rows.len();
        self.push(Tensor::matrix(k, n, out).unwrap(), Op::Sparse { x, rows }, ng)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(contract("backward called before any forward pass"));
        }
        if self.value(loss).len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Adds the gradients of every bound parameter into `module`'s parameters.
    pub fn accumulate_into(&self, module: &mut dyn Module) {
        for p in module.params_mut() {
            if let Some(g) = self.param_var(p.name()).and_then(|v| self.grad(v)) {
                p.grad_mut()
                    .data_mut()
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.ng(*a) {
                    let da = slot(grads, &self.nodes, *a);
                    gemm(m, n, k, g, Trans::No, self.data(*b), Trans::Yes, da, true);
                }
                if self.ng(*b) {
                    let db = slot(grads, &self.nodes, *b);
                    gemm(k, m, n, self.data(*a), Trans::Yes, g, Trans::No, db, true);
                }
            }
            Op::AddRow(a, b) => {
                let n = self.dims(*a).1;
                if self.ng(*a) {
                    add_into(slot(grads, &self.nodes, *a), g);
                }
                if self.ng(*b) {
                    let db = slot(grads, &self.nodes, *b);
                    for row in g.chunks(n.max(1)) {
                        add_into(db, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    add_into(slot(grads, &self.nodes, *a), g);
                }
                if self.ng(*b) {
                    add_into(slot(grads, &self.nodes, *b), g);
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    add_into(slot(grads, &self.nodes, *a), g);
                }
                if self.ng(*b) {
                    let db = slot(grads, &self.nodes, *b);
                    db.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.data(*a), self.data(*b));
                if self.ng(*a) {
                    let da = slot(grads, &self.nodes, *a);
                    for ((d, g), b) in da.iter_mut().zip(g).zip(vb) {
                        *d += g * b;
                    }
                }
                if self.ng(*b) {
                    let db = slot(grads, &self.nodes, *b);
                    for ((d, g), a) in db.iter_mut().zip(g).zip(va) {
                        *d += g * a;
                    }
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.data(*a), self.data(*b));
                if self.ng(*a) {
                    let da = slot(grads, &self.nodes, *a);
                    for ((d, g), b) in da.iter_mut().zip(g).zip(vb) {
                        *d += g / b;
                    }
                }
                if self.ng(*b) {
                    let db = slot(grads, &self.nodes, *b);
                    for (((d, g), a), b) in db.iter_mut().zip(g).zip(va).zip(vb) {
                        *d -= g * a / (b * b);
                    }
                }
            }
            Op::Scale(x, s) => {
                let dx = slot(grads, &self.nodes, *x);
                dx.iter_mut().zip(g).for_each(|(d, g)| *d += g * s);
            }
            Op::AddScalar(x) | Op::Reshape(x) => add_into(slot(grads, &self.nodes, *x), g),
            Op::Relu(x) => {
                let dx = slot(grads, &self.nodes, *x);
                for ((d, g), y) in dx.iter_mut().zip(g).zip(y) {
                    if *y > 0.0 {
                        *d += g;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let dx = slot(grads, &self.nodes, *x);
                for ((d, g), y) in dx.iter_mut().zip(g).zip(y) {
                    *d += g * y * (1.0 - y);
                }
            }
            Op::Softplus(x) => {
                let xv = self.data(*x);
                let dx = slot(grads, &self.nodes, *x);
                for ((d, g), x) in dx.iter_mut().zip(g).zip(xv) {
                    *d += g / (1.0 + (-x).exp());
                }
            }
            Op::Sin(x) => {
                let xv = self.data(*x);
                let dx = slot(grads, &self.nodes, *x);
                for ((d, g), x) in dx.iter_mut().zip(g).zip(xv) {
                    *d += g * x.cos();
                }
            }
            Op::Cos(x) => {
                let xv = self.data(*x);
                let dx = slot(grads, &self.nodes, *x);
                for ((d, g), x) in dx.iter_mut().zip(g).zip(xv) {
                    *d -= g * x.sin();
                }
            }
            Op::Exp(x) => {
                let dx = slot(grads, &self.nodes, *x);
                for ((d, g), y) in dx.iter_mut().zip(g).zip(y) {
                    *d += g * y;
                }
            }
            Op::Sqrt(x) => {
                let dx = slot(grads, &self.nodes, *x);
                for ((d, g), y) in dx.iter_mut().zip(g).zip(y) {
                    *d += g * 0.5 / y;
                }
            }
            Op::Abs(x) => {
                let xv = self.data(*x);
                let dx = slot(grads, &self.nodes, *x);
                for ((d, g), x) in dx.iter_mut().zip(g).zip(xv) {
                    if *x > 0.0 {
                        *d += g;
                    } else if *x < 0.0 {
                        *d -= g;
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.data(*x);
                let dx = slot(grads, &self.nodes, *x);
                for (k, d) in dx.iter_mut().enumerate() {
                    if xv[k] >= lo[k] && xv[k] <= hi[k] {
                        *d += g[k];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = node.value.dims2();
                let mut off = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    if self.ng(p) {
                        let dp = slot(grads, &self.nodes, p);
                        for r in 0..m {
                            add_into(
                                &mut dp[r * w..(r + 1) * w],
                                &g[r * n + off..r * n + off + w],
                            );
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, len) = node.value.dims2();
                let n = self.dims(*x).1;
                let dx = slot(grads, &self.nodes, *x);
                for r in 0..m {
                    add_into(
                        &mut dx[r * n + start..r * n + start + len],
                        &g[r * len..(r + 1) * len],
                    );
                }
            }
            Op::GatherRows { x, idx } => {
                let n = self.dims(*x).1;
                let dx = slot(grads, &self.nodes, *x);
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut dx[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                }
            }
            Op::ScatterRows { base, idx, values } => {
                let n = self.dims(*base).1;
                if self.ng(*base) {
                    let mut gb = g.to_vec();
                    for &i in idx.iter() {
                        gb[i * n..(i + 1) * n].fill(0.0);
                    }
                    add_into(slot(grads, &self.nodes, *base), &gb);
                }
                if self.ng(*values) {
                    let dv = slot(grads, &self.nodes, *values);
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut dv[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::SegmentMax { x, argmax } => {
                let n = self.dims(*x).1;
                let dx = slot(grads, &self.nodes, *x);
                for (o, &r) in argmax.iter().enumerate() {
                    dx[r * n + o % n] += g[o];
                }
            }
            Op::SegmentSum { x, seg } => {
                let n = self.dims(*x).1;
                let dx = slot(grads, &self.nodes, *x);
                for (r, &s) in seg.iter().enumerate() {
                    add_into(&mut dx[r * n..(r + 1) * n], &g[s * n..(s + 1) * n]);
                }
            }
            Op::SegmentLogSoftmax { x, offsets } => {
                let dx = slot(grads, &self.nodes, *x);
                for w in offsets.windows(2) {
                    let gs: f32 = g[w[0]..w[1]].iter().sum();
                    for k in w[0]..w[1] {
                        dx[k] += g[k] - y[k].exp() * gs;
                    }
                }
            }
            Op::Sum(x) => {
                let dx = slot(grads, &self.nodes, *x);
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let dx = slot(grads, &self.nodes, *x);
                let s = g[0] / dx.len() as f32;
                dx.iter_mut().for_each(|d| *d += s);
            }
            Op::Conv2d { x, w, geom, rows } => {
                let n_out = geom.out_height() * geom.out_width();
                let mut col = Vec::new();
                let mut gch = Vec::new();
                let mut dcol = Vec::new();
                let xs = self.data(*x);
                let ws = self.data(*w);
                let (need_w, need_x) = (self.ng(*w), self.ng(*x));
                let mut dw = need_w.then(|| vec![0.0; ws.len()]);
                let mut dx = need_x.then(|| vec![0.0; xs.len()]);
                for_each_chunk(rows.as_deref().map(|r| r.as_slice()), n_out, |chunk| {
                    gch.clear();
                    for &r in chunk {
                        gch.extend_from_slice(&g[r * geom.cout..(r + 1) * geom.cout]);
                    }
                    if let Some(dw) = dw.as_mut() {
                        im2col(xs, geom, chunk, &mut col);
                        gemm(geom.patch(), chunk.len(), geom.cout, &col, Trans::Yes, &gch, Trans::No, dw, true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        dcol.resize(chunk.len() * geom.patch(), 0.0);
                        gemm(chunk.len(), geom.cout, geom.patch(), &gch, Trans::No, ws, Trans::Yes, &mut dcol, false);
                        col2im_add(&dcol, geom, chunk, dx);
                    }
                });
                if let Some(dw) = dw {
                    add_into(slot(grads, &self.nodes, *w), &dw);
                }
                if let Some(dx) = dx {
                    add_into(slot(grads, &self.nodes, *x), &dx);
                }
            }
            Op::Sparse { x, rows } => {
                let n = self.dims(*x).1;
                let dx = slot(grads, &self.nodes, *x);
                for (r, taps) in rows.iter().enumerate() {
                    let gr = &g[r * n..(r + 1) * n];
                    for &(i, wt) in taps {
                        dx[i * n..(i + 1) * n]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(d, g)| *d += wt * g);
                    }
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f32>>], nodes: &[Node], v: Var) -> &'a mut [f32] {
    grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Calls `f` on consecutive chunks of at most `CONV_CHUNK` output rows, taken
/// from `rows` or from `0..n` when no row list is given.
fn for_each_chunk(rows: Option<&[usize]>, n: usize, mut f: impl FnMut(&[usize])) {
    match rows {
        Some(rows) => rows.chunks(CONV_CHUNK).for_each(f),
        None => {
            let mut idx = Vec::with_capacity(CONV_CHUNK);
            for start in (0..n).step_by(CONV_CHUNK) {
                idx.clear();
                idx.extend(start..(start + CONV_CHUNK).min(n));
                f(&idx);
            }
        }
    }
}

fn im2col(x: &[f32], geom: &ConvGeom, rows: &[usize], col: &mut Vec<f32>) {
    let (cin, wo, s) = (geom.cin, geom.out_width(), geom.stride);
    let patch = geom.patch();
    col.clear();
    col.resize(rows.len() * patch, 0.0);
    for (&r, dst) in rows.iter().zip(col.chunks_mut(patch)) {
        let (oy, ox) = (r / wo, r % wo);
        for ky in 0..3 {
            let iy = (oy * s + ky) as isize - 1;
            if iy < 0 || iy >= geom.height as isize {
                continue;
            }
            for kx in 0..3 {
                let ix = (ox * s + kx) as isize - 1;
                if ix < 0 || ix >= geom.width as isize {
                    continue;
                }
                let src = (iy as usize * geom.width + ix as usize) * cin;
                let tap = (ky * 3 + kx) * cin;
                dst[tap..tap + cin].copy_from_slice(&x[src..src + cin]);
            }
        }
    }
}

fn col2im_add(dcol: &[f32], geom: &ConvGeom, rows: &[usize], dx: &mut [f32]) {
    let (cin, wo, s) = (geom.cin, geom.out_width(), geom.stride);
    let patch = geom.patch();
    for (&r, src) in rows.iter().zip(dcol.chunks(patch)) {
        let (oy, ox) = (r / wo, r % wo);
        for ky in 0..3 {
            let iy = (oy * s + ky) as isize - 1;
            if iy < 0 || iy >= geom.height as isize {
                continue;
            }
            for kx in 0..3 {
                let ix = (ox * s + kx) as isize - 1;
                if ix < 0 || ix >= geom.width as isize {
                    continue;
                }
                let dst = (iy as usize * geom.width + ix as usize) * cin;
                let tap = (ky * 3 + kx) * cin;
                add_into(&mut dx[dst..dst + cin], &src[tap..tap + cin]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let p = Parameter::new("w", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let w = g.param(&p);
        let loss = g.mul(w, w);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[6.0]);
    }

    #[test]
    fn unreachable_parameter_has_zero_gradient() {
        let mut p = Parameter::new("w", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let _w = g.param(&p);
        let c = g.constant(Tensor::scalar(2.0));
        let loss = g.mul(c, c);
        g.backward(loss).unwrap();
        struct One<'a>(&'a mut Parameter);
        impl Module for One<'_> {
            fn params(&self) -> Vec<&Parameter> {
                vec![self.0]
            }
            fn params_mut(&mut self) -> Vec<&mut Parameter> {
                vec![self.0]
            }
        }
        g.accumulate_into(&mut One(&mut p));
        assert_eq!(p.grad().data(), &[0.0]);
    }

    #[test]
    fn backward_without_forward_is_an_error() {
        let mut g = Graph::new();
        let mut other = Graph::new();
        let v = other.constant(Tensor::scalar(1.0));
        assert!(g.backward(v).is_err());
    }

    #[test]
    fn segment_log_softmax_normalizes() {
        let mut g = Graph::new();
        let x = g.constant_column(vec![0.0, 0.0, 1.0, 2.0, 3.0]);
        let y = g.segment_log_softmax(x, vec![0, 2, 5]);
        let v = g.data(y);
        assert!((v[0] + std::f32::consts::LN_2).abs() < 1e-6);
        let s: f32 = v[2..].iter().map(|x| x.exp()).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let geom = ConvGeom {
            height: 3,
            width: 4,
            cin: 1,
            cout: 1,
            stride: 1,
        };
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let mut g = Graph::new();
        let x = g.constant_matrix(12, 1, (0..12).map(|v| v as f32).collect());
        let k = g.constant_matrix(9, 1, w);
        let y = g.conv2d(x, k, geom);
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn conv_stride_two_shape() {
        let geom = ConvGeom {
            height: 5,
            width: 8,
            cin: 2,
            cout: 3,
            stride: 2,
        };
        let mut g = Graph::new();
        let x = g.constant_matrix(40, 2, vec![1.0; 80]);
        let k = g.constant_matrix(18, 3, vec![1.0; 54]);
        let y = g.conv2d(x, k, geom);
        assert_eq!(g.dims(y), (3 * 4, 3));
        // top-left output sees a 2x2 interior patch of ones for each of 2 channels
        assert_eq!(g.data(y)[0], 8.0);
    }
}
