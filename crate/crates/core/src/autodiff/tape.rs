//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! A [`Tape`] records one forward computation as an arena of nodes. Node ids
//! ([`VarId`]) are creation-ordered, and every op's parents precede it, so
//! walking the arena backwards is already a reverse topological order:
//! [`Tape::backward`] visits each node exactly once and accumulates adjoints
//! into parents with `+=`, which makes fan-out (one value consumed by several
//! ops) correct by construction.
//!
//! Contracts shared by every op:
//! - operands are 2-D [`Tensor`]s; scalars are 1x1
//! - shape mismatches fail fast with both shapes in the error
//! - the op's freshly computed output is checked for NaN/Inf and rejected
//!   with a numeric error naming the op, so poison never propagates silently

use crate::autodiff::tensor::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

#[derive(Debug)]
enum Op {
    Input,
    MatMul(VarId, VarId),
    Add(VarId, VarId),
    Mul(VarId, VarId),
    /// y = scale * x + offset; the offset is constant, so only the scale
    /// matters to the adjoint and only it is stored.
    ScaleAdd { x: VarId, scale: f64 },
    Concat { parts: Vec<VarId>, axis: usize },
    SliceRows { x: VarId, start: usize },
    SliceCols { x: VarId, start: usize },
    Sum(VarId),
    Mean(VarId),
    SumAxis { x: VarId, axis: usize },
    MeanAxis { x: VarId, axis: usize },
    Sigmoid(VarId),
    Tanh(VarId),
    LeakyRelu { x: VarId, slope: f64 },
    Elu(VarId),
    Exp(VarId),
    Log(VarId),
    Clamp { x: VarId, lo: f64, hi: f64 },
    /// out[i] = x[indices[i]]; backward scatter-adds rows.
    GatherRows { x: VarId, indices: Vec<usize> },
    /// out[s] = sum of x rows i with segments[i] == s.
    SegmentSum { x: VarId, segments: Vec<usize> },
    /// out[i][j] = mat[i][j] * col[i]; broadcast of a column over columns.
    ScaleRows { mat: VarId, col: VarId },
    /// Tile a 1 x d row `times` times.
    RepeatRows { x: VarId },
    /// Softmax over entries of an E x 1 column, independently per segment.
    SegmentSoftmax { x: VarId, segments: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`VarId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or zeros of the given shape when the value did not
    /// influence the loss (an unused parameter has gradient zero).
    pub fn take(&mut self, id: VarId, rows: usize, cols: usize) -> Tensor {
        self.grads
            .get_mut(id.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(rows, cols))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<VarId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { context: format!("autodiff op {op_name}") });
        }
        let id = VarId(self.nodes.len());
        self.nodes.push(Node { value, op });
        Ok(id)
    }

    // ------------------------------------------------------------------
    // forward ops
    // ------------------------------------------------------------------

    /// Record a leaf. Leaves are the only nodes that keep their gradient
    /// after [`Tape::backward`].
    pub fn input(&mut self, value: Tensor) -> Result<VarId> {
        self.push("input", value, Op::Input)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.cols() != vb.rows() {
            return Err(Error::Shape {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(va.rows(), vb.cols());
        matmul_acc(&mut out, va, vb);
        self.push("matmul", out, Op::MatMul(a, b))
    }

    fn elementwise_pair(&self, op: &'static str, a: VarId, b: VarId) -> Result<()> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::Shape { op, lhs: va.shape().to_vec(), rhs: vb.shape().to_vec() });
        }
        Ok(())
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.elementwise_pair("add", a, b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = va.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(vb.data()) {
            *o += x;
        }
        self.push("add", out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.elementwise_pair("mul", a, b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = va.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(vb.data()) {
            *o *= x;
        }
        self.push("mul", out, Op::Mul(a, b))
    }

    /// y = scale * x + offset, elementwise with constant coefficients.
    /// Covers negation (-1, 0) and complement (-1, 1) without extra nodes.
    pub fn scale_add(&mut self, x: VarId, scale: f64, offset: f64) -> Result<VarId> {
        let mut out = self.nodes[x.0].value.clone();
        for o in out.data_mut() {
            *o = scale * *o + offset;
        }
        self.push("scale_add", out, Op::ScaleAdd { x, scale })
    }

    /// Concatenate along `axis` (0 = stack rows, 1 = extend columns).
    pub fn concat(&mut self, parts: &[VarId], axis: usize) -> Result<VarId> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::Shape { op: "concat", lhs: vec![parts.len()], rhs: vec![axis] });
        }
        let first = self.nodes[parts[0].0].value.shape();
        for &p in parts {
            let s = self.nodes[p.0].value.shape();
            let compatible = if axis == 0 { s[1] == first[1] } else { s[0] == first[0] };
            if !compatible {
                return Err(Error::Shape { op: "concat", lhs: first.to_vec(), rhs: s.to_vec() });
            }
        }
        let value = if axis == 0 {
            let rows: usize = parts.iter().map(|&p| self.nodes[p.0].value.rows()).sum();
            let mut data = Vec::with_capacity(rows * first[1]);
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.data());
            }
            Tensor::from_vec(rows, first[1], data)?
        } else {
            let cols: usize = parts.iter().map(|&p| self.nodes[p.0].value.cols()).sum();
            let mut out = Tensor::zeros(first[0], cols);
            let mut at = 0;
            for &p in parts {
                let v = &self.nodes[p.0].value;
                for r in 0..first[0] {
                    let dst = r * cols + at;
                    out.data_mut()[dst..dst + v.cols()].copy_from_slice(v.row_slice(r));
                }
                at += v.cols();
            }
            out
        };
        self.push("concat", value, Op::Concat { parts: parts.to_vec(), axis })
    }

    pub fn slice_rows(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let v = &self.nodes[x.0].value;
        if len == 0 || start + len > v.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: v.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let data = v.data()[start * v.cols()..(start + len) * v.cols()].to_vec();
        let out = Tensor::from_vec(len, v.cols(), data)?;
        self.push("slice_rows", out, Op::SliceRows { x, start })
    }

    pub fn slice_cols(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let v = &self.nodes[x.0].value;
        if len == 0 || start + len > v.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: v.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut out = Tensor::zeros(v.rows(), len);
        for r in 0..v.rows() {
            let src = r * v.cols() + start;
            out.data_mut()[r * len..(r + 1) * len]
                .copy_from_slice(&v.data()[src..src + len]);
        }
        self.push("slice_cols", out, Op::SliceCols { x, start })
    }

    pub fn sum(&mut self, x: VarId) -> Result<VarId> {
        let total: f64 = self.nodes[x.0].value.data().iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(x))
    }

    pub fn mean(&mut self, x: VarId) -> Result<VarId> {
        let v = &self.nodes[x.0].value;
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(x))
    }

    /// Reduce along `axis`: 0 collapses rows (out 1 x c), 1 collapses
    /// columns (out r x 1).
    pub fn sum_axis(&mut self, x: VarId, axis: usize) -> Result<VarId> {
        let out = self.axis_reduce(x, axis, false)?;
        self.push("sum_axis", out, Op::SumAxis { x, axis })
    }

    pub fn mean_axis(&mut self, x: VarId, axis: usize) -> Result<VarId> {
        let out = self.axis_reduce(x, axis, true)?;
        self.push("mean_axis", out, Op::MeanAxis { x, axis })
    }

    fn axis_reduce(&self, x: VarId, axis: usize, mean: bool) -> Result<Tensor> {
        let v = &self.nodes[x.0].value;
        if axis > 1 {
            return Err(Error::Shape { op: "axis_reduce", lhs: v.shape().to_vec(), rhs: vec![axis] });
        }
        let (r, c) = (v.rows(), v.cols());
        Ok(if axis == 0 {
            let mut out = Tensor::zeros(1, c);
            for i in 0..r {
                for (o, &x) in out.data_mut().iter_mut().zip(v.row_slice(i)) {
                    *o += x;
                }
            }
            if mean {
                for o in out.data_mut() {
                    *o /= r as f64;
                }
            }
            out
        } else {
            let mut out = Tensor::zeros(r, 1);
            for i in 0..r {
                let s: f64 = v.row_slice(i).iter().sum();
                out.data_mut()[i] = if mean { s / c as f64 } else { s };
            }
            out
        })
    }

    fn unary(&mut self, op_name: &'static str, x: VarId, op: Op, f: impl Fn(f64) -> f64) -> Result<VarId> {
        let mut out = self.nodes[x.0].value.clone();
        for o in out.data_mut() {
            *o = f(*o);
        }
        self.push(op_name, out, op)
    }

    pub fn sigmoid(&mut self, x: VarId) -> Result<VarId> {
        // 1/(1+e^-x) evaluated branch-wise so neither tail overflows.
        self.unary("sigmoid", x, Op::Sigmoid(x), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn tanh(&mut self, x: VarId) -> Result<VarId> {
        self.unary("tanh", x, Op::Tanh(x), f64::tanh)
    }

    /// max(x, slope * x) for 0 < slope < 1; at x == 0 the derivative is
    /// taken from the negative branch.
    pub fn leaky_relu(&mut self, x: VarId, slope: f64) -> Result<VarId> {
        self.unary("leaky_relu", x, Op::LeakyRelu { x, slope }, |v| {
            if v > 0.0 { v } else { slope * v }
        })
    }

    /// x for x > 0, e^x - 1 otherwise; continuously differentiable at 0.
    pub fn elu(&mut self, x: VarId) -> Result<VarId> {
        self.unary("elu", x, Op::Elu(x), |v| if v > 0.0 { v } else { v.exp_m1() })
    }

    pub fn exp(&mut self, x: VarId) -> Result<VarId> {
        self.unary("exp", x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: VarId) -> Result<VarId> {
        self.unary("log", x, Op::Log(x), f64::ln)
    }

    pub fn clamp(&mut self, x: VarId, lo: f64, hi: f64) -> Result<VarId> {
        if !(lo <= hi) {
            return Err(Error::Config(format!("clamp bounds inverted: [{lo}, {hi}]")));
        }
        self.unary("clamp", x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    /// Select rows by index, with repetition allowed. Backward scatter-adds,
    /// so a row gathered twice accumulates both adjoints.
    pub fn gather_rows(&mut self, x: VarId, indices: &[usize]) -> Result<VarId> {
        let v = &self.nodes[x.0].value;
        if indices.is_empty() || indices.iter().any(|&i| i >= v.rows()) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: v.shape().to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let mut data = Vec::with_capacity(indices.len() * v.cols());
        for &i in indices {
            data.extend_from_slice(v.row_slice(i));
        }
        let out = Tensor::from_vec(indices.len(), v.cols(), data)?;
        self.push("gather_rows", out, Op::GatherRows { x, indices: indices.to_vec() })
    }

    /// Sum rows of `x` into `n_segments` buckets keyed by `segments[i]`.
    /// Buckets with no members stay zero.
    pub fn segment_sum(&mut self, x: VarId, segments: &[usize], n_segments: usize) -> Result<VarId> {
        let v = &self.nodes[x.0].value;
        if segments.len() != v.rows() || n_segments == 0 || segments.iter().any(|&s| s >= n_segments)
        {
            return Err(Error::Shape {
                op: "segment_sum",
                lhs: v.shape().to_vec(),
                rhs: vec![segments.len(), n_segments],
            });
        }
        let mut out = Tensor::zeros(n_segments, v.cols());
        for (i, &s) in segments.iter().enumerate() {
            let dst = s * v.cols();
            for (j, &val) in v.row_slice(i).iter().enumerate() {
                out.data_mut()[dst + j] += val;
            }
        }
        self.push("segment_sum", out, Op::SegmentSum { x, segments: segments.to_vec() })
    }

    /// Multiply row i of `mat` by `col[i]` (col is rows x 1).
    pub fn scale_rows(&mut self, mat: VarId, col: VarId) -> Result<VarId> {
        let (vm, vc) = (&self.nodes[mat.0].value, &self.nodes[col.0].value);
        if vc.cols() != 1 || vc.rows() != vm.rows() {
            return Err(Error::Shape {
                op: "scale_rows",
                lhs: vm.shape().to_vec(),
                rhs: vc.shape().to_vec(),
            });
        }
        let mut out = vm.clone();
        for r in 0..vm.rows() {
            let s = vc.data()[r];
            for o in &mut out.data_mut()[r * vm.cols()..(r + 1) * vm.cols()] {
                *o *= s;
            }
        }
        self.push("scale_rows", out, Op::ScaleRows { mat, col })
    }

    /// Tile a 1 x d row into times x d.
    pub fn repeat_rows(&mut self, x: VarId, times: usize) -> Result<VarId> {
        let v = &self.nodes[x.0].value;
        if v.rows() != 1 || times == 0 {
            return Err(Error::Shape {
                op: "repeat_rows",
                lhs: v.shape().to_vec(),
                rhs: vec![times],
            });
        }
        let mut data = Vec::with_capacity(times * v.cols());
        for _ in 0..times {
            data.extend_from_slice(v.row_slice(0));
        }
        let out = Tensor::from_vec(times, v.cols(), data)?;
        self.push("repeat_rows", out, Op::RepeatRows { x })
    }

    /// Softmax over the entries of an E x 1 column, computed independently
    /// within each segment. The per-segment max is subtracted before
    /// exponentiation, so arbitrary score magnitudes stay finite. Entries of
    /// one segment need not be contiguous.
    pub fn segment_softmax(&mut self, x: VarId, segments: &[usize]) -> Result<VarId> {
        let v = &self.nodes[x.0].value;
        if v.cols() != 1 || segments.len() != v.rows() {
            return Err(Error::Shape {
                op: "segment_softmax",
                lhs: v.shape().to_vec(),
                rhs: vec![segments.len()],
            });
        }
        let n_seg = segments.iter().copied().max().map_or(0, |m| m + 1);
        let mut seg_max = vec![f64::NEG_INFINITY; n_seg];
        for (i, &s) in segments.iter().enumerate() {
            seg_max[s] = seg_max[s].max(v.data()[i]);
        }
        let mut out = v.clone();
        let mut seg_sum = vec![0.0; n_seg];
        for (i, &s) in segments.iter().enumerate() {
            let e = (v.data()[i] - seg_max[s]).exp();
            out.data_mut()[i] = e;
            seg_sum[s] += e;
        }
        for (i, &s) in segments.iter().enumerate() {
            out.data_mut()[i] /= seg_sum[s];
        }
        self.push("segment_softmax", out, Op::SegmentSoftmax { x, segments: segments.to_vec() })
    }

    // ------------------------------------------------------------------
    // backward
    // ------------------------------------------------------------------

    /// Reverse sweep from `loss` (which must be 1x1). Consumes the tape.
    /// Interior adjoints are dropped as soon as their node is processed;
    /// leaf adjoints remain in the returned [`Gradients`].
    pub fn backward(self, loss: VarId) -> Result<Gradients> {
        let loss_val = &self.nodes[loss.0].value;
        if loss_val.shape() != [1, 1] {
            return Err(Error::Shape {
                op: "backward",
                lhs: loss_val.shape().to_vec(),
                rhs: vec![1, 1],
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if matches!(self.nodes[id].op, Op::Input) {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_parents(id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate_parents(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Input => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                matmul_a_bt_acc(slot(grads, *a, va), g, vb);
                matmul_at_b_acc(slot(grads, *b, vb), va, g);
            }
            Op::Add(a, b) => {
                add_into(slot(grads, *a, &self.nodes[a.0].value), g.data(), 1.0);
                add_into(slot(grads, *b, &self.nodes[b.0].value), g.data(), 1.0);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                mul_add_into(slot(grads, *a, va), g.data(), vb.data());
                mul_add_into(slot(grads, *b, vb), g.data(), va.data());
            }
            Op::ScaleAdd { x, scale } => {
                add_into(slot(grads, *x, &self.nodes[x.0].value), g.data(), *scale);
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut row = 0;
                    for &p in parts {
                        let v = &self.nodes[p.0].value;
                        let gp = slot(grads, p, v);
                        let src = &g.data()[row * v.cols()..(row + v.rows()) * v.cols()];
                        add_into(gp, src, 1.0);
                        row += v.rows();
                    }
                } else {
                    let mut col = 0;
                    for &p in parts {
                        let v = &self.nodes[p.0].value;
                        let gp = slot(grads, p, v);
                        for r in 0..v.rows() {
                            let src = r * g.cols() + col;
                            let dst = &mut gp.data_mut()[r * v.cols()..(r + 1) * v.cols()];
                            for (o, &x) in dst.iter_mut().zip(&g.data()[src..src + v.cols()]) {
                                *o += x;
                            }
                        }
                        col += v.cols();
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let v = &self.nodes[x.0].value;
                let gx = slot(grads, *x, v);
                let dst = &mut gx.data_mut()[start * v.cols()..(start + g.rows()) * v.cols()];
                for (o, &d) in dst.iter_mut().zip(g.data()) {
                    *o += d;
                }
            }
            Op::SliceCols { x, start } => {
                let v = &self.nodes[x.0].value;
                let gx = slot(grads, *x, v);
                for r in 0..g.rows() {
                    let dst = r * v.cols() + start;
                    for (j, &d) in g.row_slice(r).iter().enumerate() {
                        gx.data_mut()[dst + j] += d;
                    }
                }
            }
            Op::Sum(x) => {
                let d = g.data()[0];
                for o in slot(grads, *x, &self.nodes[x.0].value).data_mut() {
                    *o += d;
                }
            }
            Op::Mean(x) => {
                let v = &self.nodes[x.0].value;
                let d = g.data()[0] / v.len() as f64;
                for o in slot(grads, *x, v).data_mut() {
                    *o += d;
                }
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let v = &self.nodes[x.0].value;
                let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                    1.0 / (if *axis == 0 { v.rows() } else { v.cols() }) as f64
                } else {
                    1.0
                };
                let gx = slot(grads, *x, v);
                for r in 0..v.rows() {
                    for c in 0..v.cols() {
                        let d = if *axis == 0 { g.get(0, c) } else { g.get(r, 0) };
                        gx.data_mut()[r * v.cols() + c] += d * scale;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let gx = slot(grads, *x, y);
                for ((o, &yi), &d) in gx.data_mut().iter_mut().zip(y.data()).zip(g.data()) {
                    *o += d * yi * (1.0 - yi);
                }
            }
            Op::Tanh(x) => {
                let y = &node.value;
                let gx = slot(grads, *x, y);
                for ((o, &yi), &d) in gx.data_mut().iter_mut().zip(y.data()).zip(g.data()) {
                    *o += d * (1.0 - yi * yi);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let vx = &self.nodes[x.0].value;
                let gx = slot(grads, *x, vx);
                for ((o, &xi), &d) in gx.data_mut().iter_mut().zip(vx.data()).zip(g.data()) {
                    *o += d * if xi > 0.0 { 1.0 } else { *slope };
                }
            }
            Op::Elu(x) => {
                // derivative is 1 above zero and y + 1 (= e^x) below
                let vx = &self.nodes[x.0].value;
                let y = &node.value;
                let gx = slot(grads, *x, vx);
                for (((o, &xi), &yi), &d) in
                    gx.data_mut().iter_mut().zip(vx.data()).zip(y.data()).zip(g.data())
                {
                    *o += d * if xi > 0.0 { 1.0 } else { yi + 1.0 };
                }
            }
            Op::Exp(x) => {
                let y = &node.value;
                let gx = slot(grads, *x, y);
                for ((o, &yi), &d) in gx.data_mut().iter_mut().zip(y.data()).zip(g.data()) {
                    *o += d * yi;
                }
            }
            Op::Log(x) => {
                let vx = &self.nodes[x.0].value;
                let gx = slot(grads, *x, vx);
                for ((o, &xi), &d) in gx.data_mut().iter_mut().zip(vx.data()).zip(g.data()) {
                    *o += d / xi;
                }
            }
            Op::Clamp { x, lo, hi } => {
                // Subgradient 0 on and beyond the bounds.
                let vx = &self.nodes[x.0].value;
                let gx = slot(grads, *x, vx);
                for ((o, &xi), &d) in gx.data_mut().iter_mut().zip(vx.data()).zip(g.data()) {
                    if xi > *lo && xi < *hi {
                        *o += d;
                    }
                }
            }
            Op::GatherRows { x, indices } => {
                let v = &self.nodes[x.0].value;
                let gx = slot(grads, *x, v);
                for (i, &src_row) in indices.iter().enumerate() {
                    let dst = src_row * v.cols();
                    for (j, &d) in g.row_slice(i).iter().enumerate() {
                        gx.data_mut()[dst + j] += d;
                    }
                }
            }
            Op::SegmentSum { x, segments } => {
                let v = &self.nodes[x.0].value;
                let gx = slot(grads, *x, v);
                for (i, &s) in segments.iter().enumerate() {
                    let dst = i * v.cols();
                    for (j, &d) in g.row_slice(s).iter().enumerate() {
                        gx.data_mut()[dst + j] += d;
                    }
                }
            }
            Op::ScaleRows { mat, col } => {
                let (vm, vc) = (&self.nodes[mat.0].value, &self.nodes[col.0].value);
                {
                    let gm = slot(grads, *mat, vm);
                    for r in 0..vm.rows() {
                        let s = vc.data()[r];
                        for (j, &d) in g.row_slice(r).iter().enumerate() {
                            gm.data_mut()[r * vm.cols() + j] += d * s;
                        }
                    }
                }
                let gc = slot(grads, *col, vc);
                for r in 0..vm.rows() {
                    let dot: f64 =
                        g.row_slice(r).iter().zip(vm.row_slice(r)).map(|(&d, &m)| d * m).sum();
                    gc.data_mut()[r] += dot;
                }
            }
            Op::RepeatRows { x } => {
                let v = &self.nodes[x.0].value;
                let gx = slot(grads, *x, v);
                for r in 0..g.rows() {
                    for (j, &d) in g.row_slice(r).iter().enumerate() {
                        gx.data_mut()[j] += d;
                    }
                }
            }
            Op::SegmentSoftmax { x, segments } => {
                // dx_i = y_i * (g_i - sum over i's segment of g_j * y_j)
                let y = &node.value;
                let n_seg = segments.iter().copied().max().map_or(0, |m| m + 1);
                let mut seg_dot = vec![0.0; n_seg];
                for (i, &s) in segments.iter().enumerate() {
                    seg_dot[s] += g.data()[i] * y.data()[i];
                }
                let gx = slot(grads, *x, y);
                for (i, &s) in segments.iter().enumerate() {
                    gx.data_mut()[i] += y.data()[i] * (g.data()[i] - seg_dot[s]);
                }
            }
        }
    }
}

/// Adjoint buffer for `id`, created as zeros the first time it is touched.
fn slot<'a>(grads: &'a mut [Option<Tensor>], id: VarId, like: &Tensor) -> &'a mut Tensor {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(like.rows(), like.cols()))
}

fn add_into(dst: &mut Tensor, src: &[f64], scale: f64) {
    for (o, &x) in dst.data_mut().iter_mut().zip(src) {
        *o += scale * x;
    }
}

fn mul_add_into(dst: &mut Tensor, g: &[f64], other: &[f64]) {
    for ((o, &gi), &vi) in dst.data_mut().iter_mut().zip(g).zip(other) {
        *o += gi * vi;
    }
}
