use std::collections::BTreeMap;
use std::rc::Rc;

use super::kernels as k;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SumAll(Var),
    Expand(Var),
    SumRows(Var),
    BroadcastRows(Var),
    SumLast(Var),
    BroadcastLast(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Powf(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, f64),
    Gather(Var, Rc<[usize]>),
    Scatter(Var, Rc<[usize]>),
    Slice(Var, usize),
    Pad(Var, usize),
    Concat(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::SumAll(..) => "sum",
            Op::Expand(..) => "expand",
            Op::SumRows(..) => "sum_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::SumLast(..) => "sum_last",
            Op::BroadcastLast(..) => "broadcast_last",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Powf(..) => "powf",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::Gather(..) => "embedding_lookup",
            Op::Scatter(..) => "scatter_rows",
            Op::Slice(..) => "slice",
            Op::Pad(..) => "pad",
            Op::Concat(..) => "concat",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so insertion
/// order is a topological order and the backward sweep is a reverse scan.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    consumed: bool,
}

/// Gradient map produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.by_name
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Named trainable leaf; `backward` reports a gradient for every one.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.push_unchecked(Op::Param, value, true);
        self.params.push((name.into(), v));
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(Op::Const, value, false)
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("forward of `{}`", op.name())));
        }
        let requires_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(op, value, requires_grad))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Param | Op::Const => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SumAll(a)
            | Op::Expand(a)
            | Op::SumRows(a)
            | Op::BroadcastRows(a)
            | Op::SumLast(a)
            | Op::BroadcastLast(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Powf(a, _)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::LayerNorm(a, _)
            | Op::Gather(a, _)
            | Op::Scatter(a, _)
            | Op::Slice(a, _)
            | Op::Pad(a, _) => vec![*a],
            Op::Concat(parts) => parts.clone(),
        }
    }

    // ---- primitives ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        k::same_shape("add", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        k::same_shape("sub", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        k::same_shape("mul", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).scaled(c);
        self.push(Op::Scale(a, c), out)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a), out)
    }

    /// Matrix product of two rank-2 tensors, or a batched product of two
    /// rank-3 tensors with equal batch extent.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::matmul(self.value(a), false, self.value(b), false)?;
        self.push(Op::MatMul(a, b), out)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() < 2 {
            return Err(Error::shape("transpose", self.shape(a), &[]));
        }
        let out = self.value(a).transposed();
        self.push(Op::Transpose(a), out)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        self.push(Op::Reshape(a), out)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::SumAll(a), out)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Repeats a one-element tensor to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.value(a).numel() != 1 {
            return Err(Error::shape("expand", self.shape(a), shape));
        }
        let out = Tensor::full(shape, self.value(a).data()[0]);
        self.push(Op::Expand(a), out)
    }

    /// `[n, m] -> [1, m]`
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let out = k::sum_rows(self.value(a))?;
        self.push(Op::SumRows(a), out)
    }

    /// `[1, m] -> [n, m]`
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let out = k::broadcast_rows(self.value(a), n)?;
        self.push(Op::BroadcastRows(a), out)
    }

    /// `[.., m] -> [.., 1]`
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let out = k::sum_last(self.value(a))?;
        self.push(Op::SumLast(a), out)
    }

    /// `[.., 1] -> [.., m]`
    pub fn broadcast_last(&mut self, a: Var, m: usize) -> Result<Var> {
        let out = k::broadcast_last(self.value(a), m)?;
        self.push(Op::BroadcastLast(a), out)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), out)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), out)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push(Op::Log(a), out)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.powf(p));
        self.push(Op::Powf(a, p), out)
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = k::softmax_last(self.value(a));
        self.push(Op::Softmax(a), out)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let out = k::log_softmax_last(self.value(a));
        self.push(Op::LogSoftmax(a), out)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (out, _) = k::layer_norm_last(self.value(a), eps);
        self.push(Op::LayerNorm(a, eps), out)
    }

    /// Rows of a `[V, d]` table selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = k::gather_rows(self.value(table), ids)?;
        self.push(Op::Gather(table, ids.into()), out)
    }

    /// Adjoint of `embedding_lookup`: row `i` of `a` is added into row `ids[i]`.
    pub fn scatter_rows(&mut self, a: Var, ids: &[usize], table_rows: usize) -> Result<Var> {
        let out = k::scatter_rows(self.value(a), ids, table_rows)?;
        self.push(Op::Scatter(a, ids.into()), out)
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = k::slice_last(self.value(a), start, len)?;
        self.push(Op::Slice(a, start), out)
    }

    /// Places `a` at column `start` of a zero tensor whose last axis is `total`.
    pub fn pad(&mut self, a: Var, start: usize, total: usize) -> Result<Var> {
        let out = k::pad_last(self.value(a), start, total)?;
        self.push(Op::Pad(a, start), out)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let out = k::concat_last(&values)?;
        self.push(Op::Concat(parts.to_vec()), out)
    }

    // ---- composites ----

    /// `x · w + b` for `x: [n, i]`, `w: [i, o]`, `b: [1, o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let n = self.shape(x)[0];
        let y = self.matmul(x, w)?;
        let bb = self.broadcast_rows(b, n)?;
        self.add(y, bb)
    }

    /// Row-wise affine layer normalization with `[1, m]` gain and bias.
    pub fn layer_norm_affine(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).rows();
        let y = self.layer_norm(x, eps)?;
        let g = self.broadcast_rows(gain, n)?;
        let b = self.broadcast_rows(bias, n)?;
        let y = self.mul(y, g)?;
        self.add(y, b)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar `loss`. Returns the gradient of every
    /// named parameter, with explicit zeros for parameters the loss does not
    /// depend on. A graph can be swept this way only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[]));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Param) {
                grads[i] = Some(g);
                continue;
            }
            for (input, gi) in self.vjp(i, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi)?,
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        let mut by_name = BTreeMap::new();
        for (name, v) in &self.params {
            let g = grads
                .get_mut(v.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(self.shape(*v)));
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
            by_name.insert(name.clone(), g);
        }
        Ok(Gradients { by_name })
    }

    fn vjp(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let val = |v: &Var| &self.nodes[v.0].value;
        Ok(match &node.op {
            Op::Param | Op::Const => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scaled(-1.0))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(b), |x, y| x * y)),
                (*b, g.zip_map(val(a), |x, y| x * y)),
            ],
            Op::Scale(a, c) => vec![(*a, g.scaled(*c))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if self.nodes[a.0].requires_grad {
                    out.push((*a, k::matmul(g, false, val(b), true)?));
                }
                if self.nodes[b.0].requires_grad {
                    out.push((*b, k::matmul(val(a), true, g, false)?));
                }
                out
            }
            Op::Transpose(a) => vec![(*a, g.transposed())],
            Op::Reshape(a) => vec![(*a, g.clone().reshaped(val(a).shape())?)],
            Op::SumAll(a) => vec![(*a, Tensor::full(val(a).shape(), g.item()))],
            Op::Expand(a) => vec![(*a, Tensor::full(val(a).shape(), g.sum()))],
            Op::SumRows(a) => vec![(*a, k::broadcast_rows(g, val(a).shape()[0])?)],
            Op::BroadcastRows(a) => vec![(*a, k::sum_rows(g)?)],
            Op::SumLast(a) => vec![(*a, k::broadcast_last(g, val(a).cols())?)],
            Op::BroadcastLast(a) => vec![(*a, k::sum_last(g)?)],
            Op::Relu(a) => vec![(*a, g.zip_map(val(a), |g, x| if x > 0.0 { g } else { 0.0 }))],
            Op::Exp(a) => vec![(*a, g.zip_map(&node.value, |g, y| g * y))],
            Op::Log(a) => vec![(*a, g.zip_map(val(a), |g, x| g / x))],
            Op::Powf(a, p) => {
                let p = *p;
                vec![(*a, g.zip_map(val(a), |g, x| g * p * x.powf(p - 1.0)))]
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut out = g.zip_map(y, |g, y| g * y);
                for r in 0..out.rows() {
                    let s: f64 = out.row(r).iter().sum();
                    for (o, yv) in out.row_mut(r).iter_mut().zip(y.row(r)) {
                        *o -= yv * s;
                    }
                }
                vec![(*a, out)]
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut out = g.clone();
                for r in 0..out.rows() {
                    let s: f64 = g.row(r).iter().sum();
                    for (o, yv) in out.row_mut(r).iter_mut().zip(y.row(r)) {
                        *o -= yv.exp() * s;
                    }
                }
                vec![(*a, out)]
            }
            Op::LayerNorm(a, eps) => {
                let (xhat, rstd) = k::layer_norm_last(val(a), *eps);
                let m = xhat.cols() as f64;
                let mut out = g.clone();
                for r in 0..out.rows() {
                    let gr = g.row(r);
                    let xr = xhat.row(r);
                    let mg = gr.iter().sum::<f64>() / m;
                    let mgx = gr.iter().zip(xr).map(|(g, x)| g * x).sum::<f64>() / m;
                    for ((o, gv), xv) in out.row_mut(r).iter_mut().zip(gr).zip(xr) {
                        *o = rstd[r] * (gv - mg - xv * mgx);
                    }
                }
                vec![(*a, out)]
            }
            Op::Gather(a, ids) => vec![(*a, k::scatter_rows(g, ids, val(a).shape()[0])?)],
            Op::Scatter(a, ids) => vec![(*a, k::gather_rows(g, ids)?)],
            Op::Slice(a, start) => vec![(*a, k::pad_last(g, *start, val(a).cols())?)],
            Op::Pad(a, start) => vec![(*a, k::slice_last(g, *start, val(a).cols())?)],
            Op::Concat(parts) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut start = 0;
                for p in parts {
                    let w = val(p).cols();
                    out.push((*p, k::slice_last(g, start, w)?));
                    start += w;
                }
                out
            }
        })
    }

    /// Gradients of `loss` with respect to `wrt`, recorded as new nodes of
    /// this graph so they can be differentiated again. Entries are `None`
    /// when `loss` does not depend on that variable.
    pub fn grad_graph(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Option<Var>>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("grad_graph", self.shape(loss), &[]));
        }
        let mut grads: Vec<Option<Var>> = vec![None; loss.0 + 1];
        let seed = self.constant(Tensor::full(self.shape(loss), 1.0));
        grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            if matches!(self.nodes[i].op, Op::Param) {
                continue;
            }
            for (input, gi) in self.vjp_graph(i, g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                grads[input.0] = Some(match grads[input.0] {
                    Some(acc) => self.add(acc, gi)?,
                    None => gi,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|v| grads.get(v.0).copied().flatten())
            .collect())
    }

    fn vjp_graph(&mut self, i: usize, g: Var) -> Result<Vec<(Var, Var)>> {
        let op = self.nodes[i].op.clone();
        let y = Var(i);
        Ok(match op {
            Op::Param | Op::Const => vec![],
            Op::Add(a, b) => vec![(a, g), (b, g)],
            Op::Sub(a, b) => {
                let nb = self.scale(g, -1.0)?;
                vec![(a, g), (b, nb)]
            }
            Op::Mul(a, b) => {
                let ga = self.mul(g, b)?;
                let gb = self.mul(g, a)?;
                vec![(a, ga), (b, gb)]
            }
            Op::Scale(a, c) => vec![(a, self.scale(g, c)?)],
            Op::AddScalar(a) => vec![(a, g)],
            Op::MatMul(a, b) => {
                let bt = self.transpose(b)?;
                let ga = self.matmul(g, bt)?;
                let at = self.transpose(a)?;
                let gb = self.matmul(at, g)?;
                vec![(a, ga), (b, gb)]
            }
            Op::Transpose(a) => vec![(a, self.transpose(g)?)],
            Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                vec![(a, self.reshape(g, &shape)?)]
            }
            Op::SumAll(a) => {
                let shape = self.shape(a).to_vec();
                vec![(a, self.expand(g, &shape)?)]
            }
            Op::Expand(a) => {
                let s = self.sum(g)?;
                let shape = self.shape(a).to_vec();
                vec![(a, self.reshape(s, &shape)?)]
            }
            Op::SumRows(a) => {
                let n = self.shape(a)[0];
                vec![(a, self.broadcast_rows(g, n)?)]
            }
            Op::BroadcastRows(a) => vec![(a, self.sum_rows(g)?)],
            Op::SumLast(a) => {
                let m = self.value(a).cols();
                vec![(a, self.broadcast_last(g, m)?)]
            }
            Op::BroadcastLast(a) => vec![(a, self.sum_last(g)?)],
            Op::Relu(a) => {
                let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let mask = self.constant(mask);
                vec![(a, self.mul(g, mask)?)]
            }
            Op::Exp(a) => vec![(a, self.mul(g, y)?)],
            Op::Log(a) => {
                let inv = self.powf(a, -1.0)?;
                vec![(a, self.mul(g, inv)?)]
            }
            Op::Powf(a, p) => {
                let d = self.powf(a, p - 1.0)?;
                let d = self.scale(d, p)?;
                vec![(a, self.mul(g, d)?)]
            }
            Op::Softmax(a) => {
                let m = self.value(a).cols();
                let gy = self.mul(g, y)?;
                let s = self.sum_last(gy)?;
                let s = self.broadcast_last(s, m)?;
                let t = self.sub(g, s)?;
                vec![(a, self.mul(y, t)?)]
            }
            Op::LogSoftmax(a) => {
                let m = self.value(a).cols();
                let p = self.exp(y)?;
                let s = self.sum_last(g)?;
                let s = self.broadcast_last(s, m)?;
                let ps = self.mul(p, s)?;
                vec![(a, self.sub(g, ps)?)]
            }
            Op::LayerNorm(a, eps) => {
                let m = self.value(a).cols();
                let inv_m = 1.0 / m as f64;
                // rstd recomputed from `a` so that it is differentiable
                let mu = self.sum_last(a)?;
                let mu = self.scale(mu, inv_m)?;
                let mu = self.broadcast_last(mu, m)?;
                let xc = self.sub(a, mu)?;
                let sq = self.mul(xc, xc)?;
                let var = self.sum_last(sq)?;
                let var = self.scale(var, inv_m)?;
                let var = self.add_scalar(var, eps)?;
                let rstd = self.powf(var, -0.5)?;
                let rstd = self.broadcast_last(rstd, m)?;
                let mg = self.sum_last(g)?;
                let mg = self.scale(mg, inv_m)?;
                let mg = self.broadcast_last(mg, m)?;
                let gy = self.mul(g, y)?;
                let mgy = self.sum_last(gy)?;
                let mgy = self.scale(mgy, inv_m)?;
                let mgy = self.broadcast_last(mgy, m)?;
                let ymgy = self.mul(y, mgy)?;
                let t = self.sub(g, mg)?;
                let t = self.sub(t, ymgy)?;
                vec![(a, self.mul(rstd, t)?)]
            }
            Op::Gather(a, ids) => {
                let rows = self.shape(a)[0];
                vec![(a, self.scatter_rows(g, &ids, rows)?)]
            }
            Op::Scatter(a, ids) => vec![(a, self.embedding_lookup(g, &ids)?)],
            Op::Slice(a, start) => {
                let total = self.value(a).cols();
                vec![(a, self.pad(g, start, total)?)]
            }
            Op::Pad(a, start) => {
                let len = self.value(a).cols();
                vec![(a, self.slice(g, start, len)?)]
            }
            Op::Concat(parts) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut start = 0;
                for p in parts {
                    let w = self.value(p).cols();
                    out.push((p, self.slice(g, start, w)?));
                    start += w;
                }
                out
            }
        })
    }
}
