//! Reverse-mode automatic differentiation over dense f64 arrays.
//!
//! Operations are recorded eagerly onto a [`Tape`]; `backward` walks the
//! recording in reverse and emits each vector-Jacobian product *as tape
//! operations*. Gradients are therefore ordinary nodes and can be
//! differentiated again, which is how a scalar built from parameter
//! gradients (the gradient-matching objective) is optimized with respect
//! to image pixels.
//!
//! Non-finite values abort the recording operation with a diagnostic
//! naming the node; silent NaN propagation would poison whole experiments.

pub mod gradcheck;
pub(crate) mod kernels;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::ConvDims;
pub use kernels::ResampleSpec;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f64),
    AddConst(f64),
    Sqrt,
    Recip,
    Sum,
    Dot,
    /// Tensor times a one-element node.
    MulScalar,
    MatMul {
        ta: bool,
        tb: bool,
    },
    AddRowBias,
    ColSum,
    BroadcastRows {
        rows: usize,
    },
    RowSumBroadcast,
    Conv {
        pad: usize,
    },
    ConvInputGrad {
        pad: usize,
        in_shape: Vec<usize>,
    },
    ConvWeightGrad {
        pad: usize,
        k: usize,
    },
    AddChanBias,
    ChanSum,
    BroadcastChan {
        batch: usize,
        h: usize,
        w: usize,
    },
    Relu,
    MaxPool {
        size: usize,
        indices: Arc<Vec<usize>>,
    },
    PoolScatter {
        indices: Arc<Vec<usize>>,
        in_shape: Vec<usize>,
    },
    PoolGather {
        indices: Arc<Vec<usize>>,
        out_shape: Vec<usize>,
    },
    Resample {
        params: Arc<Vec<ResampleSpec>>,
    },
    ResampleT {
        params: Arc<Vec<ResampleSpec>>,
    },
    Reshape,
    SoftmaxRows,
    CrossEntropy {
        labels: Arc<Vec<usize>>,
        mean: bool,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddConst(_) => "add_const",
            Op::Sqrt => "sqrt",
            Op::Recip => "recip",
            Op::Sum => "sum",
            Op::Dot => "dot",
            Op::MulScalar => "mul_scalar",
            Op::MatMul { .. } => "matmul",
            Op::AddRowBias => "add_row_bias",
            Op::ColSum => "col_sum",
            Op::BroadcastRows { .. } => "broadcast_rows",
            Op::RowSumBroadcast => "row_sum_broadcast",
            Op::Conv { .. } => "conv2d",
            Op::ConvInputGrad { .. } => "conv2d_input_grad",
            Op::ConvWeightGrad { .. } => "conv2d_weight_grad",
            Op::AddChanBias => "add_chan_bias",
            Op::ChanSum => "chan_sum",
            Op::BroadcastChan { .. } => "broadcast_chan",
            Op::Relu => "relu",
            Op::MaxPool { .. } => "maxpool",
            Op::PoolScatter { .. } => "pool_scatter",
            Op::PoolGather { .. } => "pool_gather",
            Op::Resample { .. } => "resample",
            Op::ResampleT { .. } => "resample_t",
            Op::Reshape => "reshape",
            Op::SoftmaxRows => "softmax_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only recording of a computation. Nodes are topologically ordered
/// by construction: every node's inputs precede it.
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

    /// Differentiable input node. Leaves must be finite.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Leaf, vec![], value, true)
    }

    /// Non-differentiable input node (data, masks, captured constants).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Leaf, vec![], value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor, requires_grad: bool) -> Result<Var> {
        let id = self.nodes.len();
        if !value.all_finite() {
            return Err(Error::NonFinite { node: id, op: op.name() });
        }
        self.nodes.push(Node { op, inputs, value, requires_grad });
        Ok(Var(id))
    }

    fn push_auto(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Result<Var> {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(op, inputs, value, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        Ok(())
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push_auto(Op::Add, vec![a, b], data)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push_auto(Op::Sub, vec![a, b], data)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push_auto(Op::Mul, vec![a, b], data)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let data = map(self.value(a), |x| -x);
        self.push_auto(Op::Neg, vec![a], data)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = map(self.value(a), |x| c * x);
        self.push_auto(Op::Scale(c), vec![a], data)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = map(self.value(a), |x| x + c);
        self.push_auto(Op::AddConst(c), vec![a], data)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let data = map(self.value(a), f64::sqrt);
        self.push_auto(Op::Sqrt, vec![a], data)
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let data = map(self.value(a), f64::recip);
        self.push_auto(Op::Recip, vec![a], data)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = map(self.value(a), |x| x.max(0.0));
        self.push_auto(Op::Relu, vec![a], data)
    }

    // ---- reductions and broadcasts --------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.value(a).data().iter().sum();
        self.push_auto(Op::Sum, vec![a], Tensor::scalar(total))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let total = crate::tensor::dot(self.value(a).data(), self.value(b).data());
        self.push_auto(Op::Dot, vec![a, b], Tensor::scalar(total))
    }

    /// Multiply every element of `a` by the one-element node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "mul_scalar",
                detail: format!("scalar side has shape {:?}", self.value(s).shape()),
            });
        }
        let c = self.value(s).item();
        let data = map(self.value(a), |x| c * x);
        self.push_auto(Op::MulScalar, vec![a, s], data)
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?} (need rank 2)"),
            });
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?} with ta={ta} tb={tb}"),
            });
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, ka, n, ta, tb);
        let value = Tensor::new(vec![m, n], data)?;
        self.push_auto(Op::MatMul { ta, tb }, vec![a, b], value)
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = rank2(self.value(x), "add_row_bias")?;
        if self.value(b).shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                detail: format!("bias {:?} for rows of width {}", self.value(b).shape(), n),
            });
        }
        let mut data = self.value(x).data().to_vec();
        let bias = self.value(b).data();
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        self.push_auto(Op::AddRowBias, vec![x, b], value)
    }

    pub fn col_sum(&mut self, x: Var) -> Result<Var> {
        let (_, n) = rank2(self.value(x), "col_sum")?;
        let mut out = vec![0.0; n];
        for row in self.value(x).data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let value = Tensor::new(vec![n], out)?;
        self.push_auto(Op::ColSum, vec![x], value)
    }

    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let n = self.value(x).len();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(self.value(x).data());
        }
        let value = Tensor::new(vec![rows, n], out)?;
        self.push_auto(Op::BroadcastRows { rows }, vec![x], value)
    }

    /// Replace each row by its total, keeping the shape.
    pub fn row_sum_broadcast(&mut self, x: Var) -> Result<Var> {
        let (m, n) = rank2(self.value(x), "row_sum_broadcast")?;
        let mut out = vec![0.0; m * n];
        for (i, row) in self.value(x).data().chunks(n).enumerate() {
            let s: f64 = row.iter().sum();
            out[i * n..(i + 1) * n].fill(s);
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push_auto(Op::RowSumBroadcast, vec![x], value)
    }

    // ---- convolution stack ------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let d = conv_dims(self.value(x), self.value(w), pad)?;
        let data = kernels::conv2d_fwd(self.value(x).data(), self.value(w).data(), &d);
        let value = Tensor::new(vec![d.batch, d.cout, d.oh(), d.ow()], data)?;
        self.push_auto(Op::Conv { pad }, vec![x, w], value)
    }

    fn conv2d_input_grad(&mut self, g: Var, w: Var, pad: usize, in_shape: &[usize]) -> Result<Var> {
        let ws = self.value(w).shape().to_vec();
        let d = ConvDims {
            batch: in_shape[0],
            cin: in_shape[1],
            h: in_shape[2],
            w: in_shape[3],
            cout: ws[0],
            k: ws[2],
            pad,
        };
        let data = kernels::conv2d_igrad(self.value(g).data(), self.value(w).data(), &d);
        let value = Tensor::new(in_shape.to_vec(), data)?;
        self.push_auto(Op::ConvInputGrad { pad, in_shape: in_shape.to_vec() }, vec![g, w], value)
    }

    fn conv2d_weight_grad(&mut self, x: Var, g: Var, pad: usize, k: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let gs = self.value(g).shape().to_vec();
        let d = ConvDims { batch: xs[0], cin: xs[1], h: xs[2], w: xs[3], cout: gs[1], k, pad };
        let data = kernels::conv2d_wgrad(self.value(x).data(), self.value(g).data(), &d);
        let value = Tensor::new(vec![d.cout, d.cin, k, k], data)?;
        self.push_auto(Op::ConvWeightGrad { pad, k }, vec![x, g], value)
    }

    pub fn add_chan_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || self.value(b).shape() != [xs[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_chan_bias",
                detail: format!("{:?} + {:?}", xs, self.value(b).shape()),
            });
        }
        let (bn, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let mut data = self.value(x).data().to_vec();
        let bias = self.value(b).data();
        for bi in 0..bn {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let bv = bias[ci];
                for v in &mut data[base..base + hw] {
                    *v += bv;
                }
            }
        }
        let value = Tensor::new(xs, data)?;
        self.push_auto(Op::AddChanBias, vec![x, b], value)
    }

    fn chan_sum(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (bn, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let mut out = vec![0.0; c];
        let data = self.value(x).data();
        for bi in 0..bn {
            for (ci, o) in out.iter_mut().enumerate() {
                let base = (bi * c + ci) * hw;
                *o += data[base..base + hw].iter().sum::<f64>();
            }
        }
        let value = Tensor::new(vec![c], out)?;
        self.push_auto(Op::ChanSum, vec![x], value)
    }

    fn broadcast_chan(&mut self, x: Var, batch: usize, h: usize, w: usize) -> Result<Var> {
        let c = self.value(x).len();
        let src = self.value(x).data().to_vec();
        let mut out = vec![0.0; batch * c * h * w];
        for bi in 0..batch {
            for (ci, &v) in src.iter().enumerate() {
                let base = (bi * c + ci) * h * w;
                out[base..base + h * w].fill(v);
            }
        }
        let value = Tensor::new(vec![batch, c, h, w], out)?;
        self.push_auto(Op::BroadcastChan { batch, h, w }, vec![x], value)
    }

    pub fn maxpool(&mut self, x: Var, size: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || xs[2] < size || xs[3] < size {
            return Err(Error::ShapeMismatch {
                op: "maxpool",
                detail: format!("{xs:?} with window {size}"),
            });
        }
        let (out, idx) = kernels::maxpool_fwd(self.value(x).data(), xs[0] * xs[1], xs[2], xs[3], size);
        let value = Tensor::new(vec![xs[0], xs[1], xs[2] / size, xs[3] / size], out)?;
        self.push_auto(Op::MaxPool { size, indices: Arc::new(idx) }, vec![x], value)
    }

    fn pool_scatter(&mut self, g: Var, indices: Arc<Vec<usize>>, in_shape: Vec<usize>) -> Result<Var> {
        let in_len = in_shape.iter().product();
        let data = kernels::pool_scatter(self.value(g).data(), &indices, in_len);
        let value = Tensor::new(in_shape.clone(), data)?;
        self.push_auto(Op::PoolScatter { indices, in_shape }, vec![g], value)
    }

    fn pool_gather(&mut self, u: Var, indices: Arc<Vec<usize>>, out_shape: Vec<usize>) -> Result<Var> {
        let data = kernels::pool_gather(self.value(u).data(), &indices);
        let value = Tensor::new(out_shape.clone(), data)?;
        self.push_auto(Op::PoolGather { indices, out_shape }, vec![u], value)
    }

    /// Differentiable flip/translate augmentation of `x [b, c, h, w]`.
    pub fn resample(&mut self, x: Var, params: Arc<Vec<ResampleSpec>>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || xs[0] != params.len() {
            return Err(Error::ShapeMismatch {
                op: "resample",
                detail: format!("{:?} with {} parameter sets", xs, params.len()),
            });
        }
        let data = kernels::resample_fwd(self.value(x).data(), &params, xs[1], xs[2], xs[3]);
        let value = Tensor::new(xs, data)?;
        self.push_auto(Op::Resample { params }, vec![x], value)
    }

    fn resample_t(&mut self, g: Var, params: Arc<Vec<ResampleSpec>>) -> Result<Var> {
        let gs = self.value(g).shape().to_vec();
        let data = kernels::resample_transpose(self.value(g).data(), &params, gs[1], gs[2], gs[3]);
        let value = Tensor::new(gs, data)?;
        self.push_auto(Op::ResampleT { params }, vec![g], value)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let count: usize = shape.iter().product();
        if count != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.value(x).shape(), shape),
            });
        }
        let value = Tensor::new(shape, self.value(x).data().to_vec())?;
        self.push_auto(Op::Reshape, vec![x], value)
    }

    // ---- classification loss ---------------------------------------------

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = rank2(self.value(x), "softmax_rows")?;
        let data = kernels::softmax_rows(self.value(x).data(), m, n);
        let value = Tensor::new(vec![m, n], data)?;
        self.push_auto(Op::SoftmaxRows, vec![x], value)
    }

    /// Fused softmax cross-entropy over rows of `logits`, reduced by mean
    /// (`mean = true`) or sum.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], mean: bool) -> Result<Var> {
        let (m, n) = rank2(self.value(logits), "cross_entropy")?;
        if labels.len() != m {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{m} rows, {} labels", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("label {bad} out of range for {n} classes"),
            });
        }
        let mut total = kernels::cross_entropy_sum(self.value(logits).data(), labels, n);
        if mean {
            total /= m as f64;
        }
        self.push_auto(
            Op::CrossEntropy { labels: Arc::new(labels.to_vec()), mean },
            vec![logits],
            Tensor::scalar(total),
        )
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from the scalar `out`, emitting every vector-Jacobian
    /// product as new tape operations. Returns one gradient node per `wrt`
    /// entry (`None` when no gradient flows there).
    pub fn backward(&mut self, out: Var, wrt: &[Var]) -> Result<Vec<Option<Var>>> {
        if !self.value(out).is_scalar() {
            return Err(Error::NonScalarOutput { shape: self.value(out).shape().to_vec() });
        }
        let frontier = out.0 + 1;
        let mut grads: Vec<Option<Var>> = vec![None; frontier];
        grads[out.0] = Some(self.constant(Tensor::scalar(1.0))?);

        for id in (0..frontier).rev() {
            let Some(g) = grads[id] else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            let inputs = self.nodes[id].inputs.clone();
            let contributions = self.vjp(&op, &inputs, Var(id), g)?;
            for (input, contrib) in inputs.iter().zip(contributions) {
                let Some(c) = contrib else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                grads[input.0] = Some(match grads[input.0] {
                    Some(existing) => self.add(existing, c)?,
                    None => c,
                });
            }
        }

        Ok(wrt
            .iter()
            .map(|v| if v.0 < frontier { grads[v.0] } else { None })
            .collect())
    }

    /// Materialize a backward result: zeros of `wrt`'s shape when no
    /// gradient flowed.
    pub fn grad_tensor(&self, wrt: Var, grad: Option<Var>) -> Tensor {
        match grad {
            Some(g) => self.value(g).clone(),
            None => Tensor::zeros(self.value(wrt).shape().to_vec()),
        }
    }

    /// Per-input gradient contributions for one node, emitted as tape ops.
    fn vjp(&mut self, op: &Op, inputs: &[Var], y: Var, g: Var) -> Result<Vec<Option<Var>>> {
        let need = |t: &Tape, i: usize| t.nodes[inputs[i].0].requires_grad;
        Ok(match op {
            Op::Leaf => vec![],
            Op::Add => vec![Some(g), Some(g)],
            Op::Sub => {
                let db = if need(self, 1) { Some(self.neg(g)?) } else { None };
                vec![Some(g), db]
            }
            Op::Mul => {
                let da = if need(self, 0) { Some(self.mul(g, inputs[1])?) } else { None };
                let db = if need(self, 1) { Some(self.mul(g, inputs[0])?) } else { None };
                vec![da, db]
            }
            Op::Neg => vec![Some(self.neg(g)?)],
            Op::Scale(c) => vec![Some(self.scale(g, *c)?)],
            Op::AddConst(_) => vec![Some(g)],
            Op::Sqrt => {
                // d sqrt(x) = g / (2 sqrt(x))
                let r = self.recip(y)?;
                let gr = self.mul(g, r)?;
                vec![Some(self.scale(gr, 0.5)?)]
            }
            Op::Recip => {
                // d (1/x) = -g y^2
                let y2 = self.mul(y, y)?;
                let gy2 = self.mul(g, y2)?;
                vec![Some(self.neg(gy2)?)]
            }
            Op::Sum => {
                let ones = self.constant(Tensor::full(self.value(inputs[0]).shape().to_vec(), 1.0))?;
                vec![Some(self.mul_scalar(ones, g)?)]
            }
            Op::Dot => {
                let da = if need(self, 0) { Some(self.mul_scalar(inputs[1], g)?) } else { None };
                let db = if need(self, 1) { Some(self.mul_scalar(inputs[0], g)?) } else { None };
                vec![da, db]
            }
            Op::MulScalar => {
                let da = if need(self, 0) { Some(self.mul_scalar(g, inputs[1])?) } else { None };
                let ds = if need(self, 1) { Some(self.dot(g, inputs[0])?) } else { None };
                vec![da, ds]
            }
            Op::MatMul { ta, tb } => {
                let (a, b) = (inputs[0], inputs[1]);
                let (da, db) = match (ta, tb) {
                    (false, false) => (
                        if need(self, 0) { Some(self.matmul(g, b, false, true)?) } else { None },
                        if need(self, 1) { Some(self.matmul(a, g, true, false)?) } else { None },
                    ),
                    (false, true) => (
                        if need(self, 0) { Some(self.matmul(g, b, false, false)?) } else { None },
                        if need(self, 1) { Some(self.matmul(g, a, true, false)?) } else { None },
                    ),
                    (true, false) => (
                        if need(self, 0) { Some(self.matmul(b, g, false, true)?) } else { None },
                        if need(self, 1) { Some(self.matmul(a, g, false, false)?) } else { None },
                    ),
                    (true, true) => unreachable!("tt matmul is never recorded"),
                };
                vec![da, db]
            }
            Op::AddRowBias => {
                let db = if need(self, 1) { Some(self.col_sum(g)?) } else { None };
                vec![Some(g), db]
            }
            Op::ColSum => {
                let rows = self.value(inputs[0]).shape()[0];
                vec![Some(self.broadcast_rows(g, rows)?)]
            }
            Op::BroadcastRows { .. } => vec![Some(self.col_sum(g)?)],
            Op::RowSumBroadcast => vec![Some(self.row_sum_broadcast(g)?)],
            Op::Conv { pad } => {
                let (x, w) = (inputs[0], inputs[1]);
                let in_shape = self.value(x).shape().to_vec();
                let k = self.value(w).shape()[2];
                let da = if need(self, 0) {
                    Some(self.conv2d_input_grad(g, w, *pad, &in_shape)?)
                } else {
                    None
                };
                let dw = if need(self, 1) {
                    Some(self.conv2d_weight_grad(x, g, *pad, k)?)
                } else {
                    None
                };
                vec![da, dw]
            }
            Op::ConvInputGrad { pad, .. } => {
                // y = Gx(g0, w); <u, Gx(g0, w)> = <C(u, w), g0>
                let (g0, w) = (inputs[0], inputs[1]);
                let k = self.value(w).shape()[2];
                let dg0 = if need(self, 0) { Some(self.conv2d(g, w, *pad)?) } else { None };
                let dw = if need(self, 1) {
                    Some(self.conv2d_weight_grad(g, g0, *pad, k)?)
                } else {
                    None
                };
                vec![dg0, dw]
            }
            Op::ConvWeightGrad { pad, .. } => {
                // y = Gw(x, g0); <u, Gw(x, g0)> = <C(x, u), g0>
                let (x, g0) = (inputs[0], inputs[1]);
                let in_shape = self.value(x).shape().to_vec();
                let dx = if need(self, 0) {
                    Some(self.conv2d_input_grad(g0, g, *pad, &in_shape)?)
                } else {
                    None
                };
                let dg0 = if need(self, 1) { Some(self.conv2d(x, g, *pad)?) } else { None };
                vec![dx, dg0]
            }
            Op::AddChanBias => {
                let db = if need(self, 1) { Some(self.chan_sum(g)?) } else { None };
                vec![Some(g), db]
            }
            Op::ChanSum => {
                let xs = self.value(inputs[0]).shape().to_vec();
                vec![Some(self.broadcast_chan(g, xs[0], xs[2], xs[3])?)]
            }
            Op::BroadcastChan { .. } => vec![Some(self.chan_sum(g)?)],
            Op::Relu => {
                // Subgradient 0 at exactly 0; the mask is constant, so the
                // second derivative through it is 0 almost everywhere.
                let mask = map(self.value(inputs[0]), |x| if x > 0.0 { 1.0 } else { 0.0 });
                let mask = self.constant(mask)?;
                vec![Some(self.mul(g, mask)?)]
            }
            Op::MaxPool { indices, .. } => {
                let in_shape = self.value(inputs[0]).shape().to_vec();
                vec![Some(self.pool_scatter(g, indices.clone(), in_shape)?)]
            }
            Op::PoolScatter { indices, .. } => {
                let out_shape = self.value(inputs[0]).shape().to_vec();
                vec![Some(self.pool_gather(g, indices.clone(), out_shape)?)]
            }
            Op::PoolGather { indices, .. } => {
                let in_shape = self.value(inputs[0]).shape().to_vec();
                vec![Some(self.pool_scatter(g, indices.clone(), in_shape)?)]
            }
            Op::Resample { params } => vec![Some(self.resample_t(g, params.clone())?)],
            Op::ResampleT { params } => vec![Some(self.resample(g, params.clone())?)],
            Op::Reshape => {
                let in_shape = self.value(inputs[0]).shape().to_vec();
                vec![Some(self.reshape(g, in_shape)?)]
            }
            Op::SoftmaxRows => {
                // dx = y * (g - rowsum(g * y))
                let gy = self.mul(g, y)?;
                let rs = self.row_sum_broadcast(gy)?;
                let centered = self.sub(g, rs)?;
                vec![Some(self.mul(y, centered)?)]
            }
            Op::CrossEntropy { labels, mean } => {
                let logits = inputs[0];
                let (m, n) = rank2(self.value(logits), "cross_entropy")?;
                let sm = self.softmax_rows(logits)?;
                let mut onehot = vec![0.0; m * n];
                for (i, &yl) in labels.iter().enumerate() {
                    onehot[i * n + yl] = 1.0;
                }
                let onehot = self.constant(Tensor::new(vec![m, n], onehot)?)?;
                let diff = self.sub(sm, onehot)?;
                let coeff = if *mean { self.scale(g, 1.0 / m as f64)? } else { g };
                vec![Some(self.mul_scalar(diff, coeff)?)]
            }
        })
    }

    /// Recompute every non-leaf node from the recorded leaves and verify the
    /// stored values are reproduced bit-exactly.
    pub fn replay(&self) -> Result<bool> {
        let mut scratch = Tape::new();
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        scratch.leaf(node.value.clone())?
                    } else {
                        scratch.constant(node.value.clone())?
                    }
                }
                Op::Reshape => scratch.reshape(node.inputs[0], node.value.shape().to_vec())?,
                op => scratch.reapply(op, &node.inputs)?,
            };
            if !scratch.value(v).bit_eq(&node.value) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn reapply(&mut self, op: &Op, ins: &[Var]) -> Result<Var> {
        match op {
            Op::Leaf => unreachable!(),
            Op::Add => self.add(ins[0], ins[1]),
            Op::Sub => self.sub(ins[0], ins[1]),
            Op::Mul => self.mul(ins[0], ins[1]),
            Op::Neg => self.neg(ins[0]),
            Op::Scale(c) => self.scale(ins[0], *c),
            Op::AddConst(c) => self.add_const(ins[0], *c),
            Op::Sqrt => self.sqrt(ins[0]),
            Op::Recip => self.recip(ins[0]),
            Op::Sum => self.sum(ins[0]),
            Op::Dot => self.dot(ins[0], ins[1]),
            Op::MulScalar => self.mul_scalar(ins[0], ins[1]),
            Op::MatMul { ta, tb } => self.matmul(ins[0], ins[1], *ta, *tb),
            Op::AddRowBias => self.add_row_bias(ins[0], ins[1]),
            Op::ColSum => self.col_sum(ins[0]),
            Op::BroadcastRows { rows } => self.broadcast_rows(ins[0], *rows),
            Op::RowSumBroadcast => self.row_sum_broadcast(ins[0]),
            Op::Conv { pad } => self.conv2d(ins[0], ins[1], *pad),
            Op::ConvInputGrad { pad, in_shape } => {
                self.conv2d_input_grad(ins[0], ins[1], *pad, in_shape)
            }
            Op::ConvWeightGrad { pad, k } => self.conv2d_weight_grad(ins[0], ins[1], *pad, *k),
            Op::AddChanBias => self.add_chan_bias(ins[0], ins[1]),
            Op::ChanSum => self.chan_sum(ins[0]),
            Op::BroadcastChan { batch, h, w } => self.broadcast_chan(ins[0], *batch, *h, *w),
            Op::Relu => self.relu(ins[0]),
            Op::MaxPool { size, .. } => self.maxpool(ins[0], *size),
            Op::PoolScatter { indices, in_shape } => {
                self.pool_scatter(ins[0], indices.clone(), in_shape.clone())
            }
            Op::PoolGather { indices, out_shape } => {
                self.pool_gather(ins[0], indices.clone(), out_shape.clone())
            }
            Op::Resample { params } => self.resample(ins[0], params.clone()),
            Op::ResampleT { params } => self.resample_t(ins[0], params.clone()),
            Op::Reshape => unreachable!("handled by replay"),
            Op::SoftmaxRows => self.softmax_rows(ins[0]),
            Op::CrossEntropy { labels, mean } => self.cross_entropy(ins[0], labels, *mean),
        }
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
        .expect("shape preserved")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("shape preserved")
}

fn rank2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(Error::ShapeMismatch { op, detail: format!("need rank 2, got {s:?}") });
    }
    Ok((s[0], s[1]))
}

fn conv_dims(x: &Tensor, w: &Tensor, pad: usize) -> Result<ConvDims> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("input {xs:?}, weight {ws:?}"),
        });
    }
    let d = ConvDims { batch: xs[0], cin: xs[1], h: xs[2], w: xs[3], cout: ws[0], k: ws[2], pad };
    if d.oh() == 0 || d.ow() == 0 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("kernel {} with pad {pad} empties input {xs:?}", d.k),
        });
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{finite_diff_check, FD_STEP};
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_leaf(tape: &mut Tape, v: f64) -> Var {
        tape.leaf(Tensor::scalar(v)).unwrap()
    }

    #[test]
    fn square_forward_and_gradient() {
        // f(x) = x^2 at x = 3 -> 9, df/dx -> 6
        let mut t = Tape::new();
        let x = scalar_leaf(&mut t, 3.0);
        let y = t.mul(x, x).unwrap();
        assert_eq!(t.value(y).item(), 9.0);
        let g = t.backward(y, &[x]).unwrap()[0].unwrap();
        assert_eq!(t.value(g).item(), 6.0);
    }

    #[test]
    fn double_backprop_of_cube() {
        // f(x) = x^3, g(x) = 3x^2, dg/dx at x = 2 -> 12
        let mut t = Tape::new();
        let x = scalar_leaf(&mut t, 2.0);
        let x2 = t.mul(x, x).unwrap();
        let x3 = t.mul(x2, x).unwrap();
        let g = t.backward(x3, &[x]).unwrap()[0].unwrap();
        assert_eq!(t.value(g).item(), 12.0);
        let gg = t.backward(g, &[x]).unwrap()[0].unwrap();
        assert_eq!(t.value(gg).item(), 12.0);
    }

    #[test]
    fn identity_network_is_bit_exact() {
        let input = Tensor::new(vec![2, 3], vec![0.1, -0.7, 3.3, 0.0, 5.5, -0.2]).unwrap();
        let mut t = Tape::new();
        let x = t.leaf(input.clone()).unwrap();
        let eye = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let eye = t.constant(eye).unwrap();
        let y = t.matmul(x, eye, false, false).unwrap();
        let y = t.reshape(y, vec![6]).unwrap();
        let y = t.reshape(y, vec![2, 3]).unwrap();
        assert!(t.value(y).bit_eq(&input));
    }

    #[test]
    fn mlp_gradient_matches_finite_differences_tightly() {
        // 2-layer MLP loss vs central differences, relative error < 1e-6.
        let w1 = Tensor::new(vec![4, 2], (0..8).map(|i| 0.3 * (i as f64) - 1.1).collect()).unwrap();
        let w2 = Tensor::new(vec![2, 4], (0..8).map(|i| 0.21 * (i as f64) - 0.8).collect()).unwrap();
        let x = Tensor::new(vec![3, 2], vec![0.3, -0.6, 1.2, 0.8, -0.4, 0.9]).unwrap();
        let labels = [0usize, 1, 1];
        let build = |t: &mut Tape, w1v: Var, w2v: Var, xv: Var| -> Result<Var> {
            let h = t.matmul(xv, w1v, false, true)?;
            let h = t.relu(h)?;
            let logits = t.matmul(h, w2v, false, true)?;
            t.cross_entropy(logits, &labels, true)
        };
        let mut t = Tape::new();
        let w1v = t.leaf(w1.clone()).unwrap();
        let w2v = t.leaf(w2.clone()).unwrap();
        let xv = t.constant(x.clone()).unwrap();
        let loss = build(&mut t, w1v, w2v, xv).unwrap();
        let grads = t.backward(loss, &[w1v, w2v]).unwrap();
        for (wrt, tensor) in [(0usize, &w1), (1, &w2)] {
            let analytic = t.grad_tensor(if wrt == 0 { w1v } else { w2v }, grads[wrt]);
            let mut f = |p: &[f64]| -> Result<f64> {
                let mut s = Tape::new();
                let pw = Tensor::new(tensor.shape().to_vec(), p.to_vec())?;
                let (a, b) = if wrt == 0 {
                    (s.leaf(pw)?, s.constant(w2.clone())?)
                } else {
                    (s.leaf(w1.clone())?, s.leaf(pw)?)
                };
                let xv = s.constant(x.clone())?;
                let out = build(&mut s, a, b, xv)?;
                Ok(s.value(out).item())
            };
            let coords: Vec<usize> = (0..tensor.len()).collect();
            let rep =
                finite_diff_check(&mut f, tensor.data(), analytic.data(), FD_STEP, &coords).unwrap();
            assert!(rep.checked > 0);
            assert!(rep.max_rel_err < 1e-6, "rel err {}", rep.max_rel_err);
        }
    }

    #[test]
    fn gradient_of_gradient_matches_hand_derived_bilinear_form() {
        // L(w; x) = 0.5 (w.x - y)^2, s = <dL/dw, c> = (w.x - y)(x.c)
        // ds/dx = (w.x - y) c + (x.c) w, worked by hand.
        let w = vec![0.7, -1.3, 0.4];
        let xv = vec![0.2, 0.9, -0.5];
        let c = vec![1.1, -0.3, 0.8];
        let y = 0.35;

        let mut t = Tape::new();
        let wl = t.leaf(Tensor::new(vec![3], w.clone()).unwrap()).unwrap();
        let xl = t.leaf(Tensor::new(vec![3], xv.clone()).unwrap()).unwrap();
        let yl = t.constant(Tensor::scalar(y)).unwrap();
        let wx = t.dot(wl, xl).unwrap();
        let r = t.sub(wx, yl).unwrap();
        let r2 = t.mul(r, r).unwrap();
        let loss = t.scale(r2, 0.5).unwrap();
        let gw = t.backward(loss, &[wl]).unwrap()[0].unwrap();
        let cl = t.constant(Tensor::new(vec![3], c.clone()).unwrap()).unwrap();
        let s = t.dot(gw, cl).unwrap();
        let gx = t.backward(s, &[xl]).unwrap()[0].unwrap();

        let resid: f64 = w.iter().zip(&xv).map(|(a, b)| a * b).sum::<f64>() - y;
        let xc: f64 = xv.iter().zip(&c).map(|(a, b)| a * b).sum();
        let expected: Vec<f64> = (0..3).map(|i| resid * c[i] + xc * w[i]).collect();
        for (got, want) in t.value(gx).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
        }
    }

    #[test]
    fn dead_relu_region_has_zero_gradient() {
        // A perturbation that cannot affect the loss gets a zero gradient.
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![4], vec![-2.0, -3.0, -1.5, -2.5]).unwrap()).unwrap();
        let delta = t.leaf(Tensor::new(vec![4], vec![0.01, -0.02, 0.0, 0.03]).unwrap()).unwrap();
        let shifted = t.add(x, delta).unwrap();
        let dead = t.relu(shifted).unwrap();
        let loss = t.sum(dead).unwrap();
        let g = t.backward(loss, &[delta]).unwrap()[0];
        let g = t.grad_tensor(delta, g);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_is_linear_in_the_output() {
        // backward(a f + b g) == a backward(f) + b backward(g), within 1e-12.
        let x0 = Tensor::new(vec![5], vec![0.4, -0.8, 1.3, 0.2, -1.1]).unwrap();
        let a0 = Tensor::new(vec![5], vec![0.9, 0.1, -0.4, 0.7, 0.5]).unwrap();
        let (alpha, beta) = (1.7, -0.6);

        let grad_of = |combine: &dyn Fn(&mut Tape, Var, Var) -> Result<Var>| -> Vec<f64> {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone()).unwrap();
            let a = t.constant(a0.clone()).unwrap();
            let out = combine(&mut t, x, a).unwrap();
            let g = t.backward(out, &[x]).unwrap()[0].unwrap();
            t.value(g).data().to_vec()
        };

        let f_only = grad_of(&|t, x, a| t.dot(x, a));
        let g_only = grad_of(&|t, x, _| {
            let sq = t.mul(x, x)?;
            t.sum(sq)
        });
        let combined = grad_of(&|t, x, a| {
            let f = t.dot(x, a)?;
            let sq = t.mul(x, x)?;
            let g = t.sum(sq)?;
            let af = t.scale(f, alpha)?;
            let bg = t.scale(g, beta)?;
            t.add(af, bg)
        });
        for i in 0..5 {
            let want = alpha * f_only[i] + beta * g_only[i];
            assert!((combined[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_are_bit_deterministic() {
        let run = || -> Vec<u64> {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::new(vec![2, 2, 6, 6], (0..144).map(|i| (i as f64) * 0.01 - 0.7).collect()).unwrap()).unwrap();
            let w = t.leaf(Tensor::new(vec![3, 2, 3, 3], (0..54).map(|i| (i as f64) * 0.03 - 0.8).collect()).unwrap()).unwrap();
            let c = t.conv2d(x, w, 1).unwrap();
            let r = t.relu(c).unwrap();
            let p = t.maxpool(r, 2).unwrap();
            let flat = t.reshape(p, vec![2, 27]).unwrap();
            let loss = t.cross_entropy(flat, &[3, 7], true).unwrap();
            let g = t.backward(loss, &[w]).unwrap()[0].unwrap();
            t.value(g).data().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn replay_reproduces_recorded_values_bit_exactly() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.9, 1.4, -0.8, 0.05]).unwrap()).unwrap();
        let w = t.leaf(Tensor::new(vec![2, 3], (0..6).map(|i| 0.1 * i as f64 - 0.2).collect()).unwrap()).unwrap();
        let h = t.matmul(x, w, false, true).unwrap();
        let h = t.relu(h).unwrap();
        let loss = t.cross_entropy(h, &[0, 1], true).unwrap();
        let _ = t.backward(loss, &[w]).unwrap();
        assert!(t.replay().unwrap());
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let y = t.relu(x).unwrap();
        assert!(matches!(
            t.backward(y, &[x]),
            Err(crate::error::Error::NonScalarOutput { .. })
        ));
    }

    #[test]
    fn non_finite_values_abort_with_node_diagnostic() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1], vec![0.0]).unwrap()).unwrap();
        let err = t.recip(x).unwrap_err();
        assert!(matches!(err, crate::error::Error::NonFinite { op: "recip", .. }));
        // Leaves are validated too.
        assert!(Tape::new().leaf(Tensor::new(vec![1], vec![f64::NAN]).unwrap()).is_err());
    }
}
