//! Define-by-run tape. Every operation appends a node holding its value and
//! enough context to push gradients back to its inputs; nodes are only ever
//! appended, so parents always precede children.

use std::fmt;
use std::sync::Arc;

use super::kernels::{gelu, gelu_grad, matmul_nn, matmul_nt, matmul_tn, split_axis, transpose2};
use super::{Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation implemented outside the engine.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, TensorError>;

    /// Gradients for each input, `None` where the input is not differentiable.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &Tensor,
    ) -> Result<Vec<Option<Tensor>>, TensorError>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    Gather(Var, Arc<[usize]>),
    ScatterAdd(Var, Arc<[usize]>),
    Sum(Var, usize),
    Mean(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var, usize),
    LayerNorm(Var, usize, Vec<f64>),
    Sqrt(Var),
    Exp(Var),
    Abs(Var),
    SquaredNorm(Var, usize),
    Custom(Arc<dyn CustomOp>, Vec<Var>),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Narrow(..) => "narrow",
            Op::Gather(..) => "gather",
            Op::ScatterAdd(..) => "scatter_add",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::Sqrt(..) => "sqrt",
            Op::Exp(..) => "exp",
            Op::Abs(..) => "abs",
            Op::SquaredNorm(..) => "squared_norm",
            Op::Custom(op, _) => op.name(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Recording tape. Single-threaded by contract; use one graph per thread.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    checked: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    let nb: usize = b.iter().product();
    nb == 1 || (b.len() <= a.len() && a[a.len() - b.len()..] == *b)
}

/// Sums `g` (shaped like the larger operand) down to `nb` trailing elements.
fn reduce_broadcast(g: &[f64], nb: usize) -> Vec<f64> {
    if g.len() == nb {
        return g.to_vec();
    }
    let mut out = vec![0.0; nb];
    for chunk in g.chunks_exact(nb) {
        for (o, x) in out.iter_mut().zip(chunk) {
            *o += x;
        }
    }
    out
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], delta: Vec<f64>) {
    match slot {
        Some(t) => {
            for (a, b) in t.data.iter_mut().zip(&delta) {
                *a += b;
            }
        }
        None => {
            *slot = Some(Tensor {
                shape: shape.to_vec(),
                data: delta,
            })
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checked: true,
        }
    }

    /// Toggles the non-finite check applied to every op output (on by default).
    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var, TensorError> {
        if self.checked && !value.is_finite() {
            return Err(TensorError::NonFinite {
                op: op.name().to_string(),
            });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Custom(_, ins) | Op::Concat(ins, _) => {
                ins.iter().any(|v| self.nodes[v.0].requires_grad)
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => {
                self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
            }
            Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Narrow(a, ..)
            | Op::Gather(a, _)
            | Op::ScatterAdd(a, _)
            | Op::Sum(a, _)
            | Op::Mean(a, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Softmax(a, _)
            | Op::LayerNorm(a, ..)
            | Op::Sqrt(a)
            | Op::Exp(a)
            | Op::Abs(a)
            | Op::SquaredNorm(a, _) => self.nodes[a.0].requires_grad,
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Tracked leaf: gradients accumulate into it on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a tracked leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !broadcast_ok(&ta.shape, &tb.shape) {
            return Err(TensorError::Shape {
                op,
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let nb = tb.data.len();
        let data = if nb == ta.data.len() {
            ta.data
                .iter()
                .zip(&tb.data)
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            let mut out = Vec::with_capacity(ta.data.len());
            for c in ta.data.chunks_exact(nb) {
                out.extend(c.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)));
            }
            out
        };
        Ok(Tensor {
            shape: ta.shape.clone(),
            data,
        })
    }

    /// Elementwise `a + b`; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let ta = &self.nodes[a.0].value;
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|x| x * s).collect(),
        };
        self.push(t, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let ta = &self.nodes[a.0].value;
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|x| x + s).collect(),
        };
        self.push(t, Op::Shift(a))
    }

    /// `[n, k] × [k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let (n, k, m) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let t = Tensor {
            shape: vec![n, m],
            data: matmul_nn(&ta.data, &tb.data, n, k, m),
        };
        self.push(t, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = &self.nodes[a.0].value;
        if ta.rank() != 2 {
            return Err(TensorError::Shape {
                op: "transpose",
                lhs: ta.shape.clone(),
                rhs: vec![],
            });
        }
        let (n, m) = (ta.shape[0], ta.shape[1]);
        let t = Tensor {
            shape: vec![m, n],
            data: transpose2(&ta.data, n, m),
        };
        self.push(t, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.nodes[a.0].value.clone().reshaped(shape)?;
        self.push(t, Op::Reshape(a))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = &self.nodes[parts[0].0].value;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                rank,
            });
        }
        let mut shape = first.shape.clone();
        shape[axis] = 0;
        for p in parts {
            let s = &self.nodes[p.0].value.shape;
            let compatible =
                s.len() == rank && (0..rank).all(|k| k == axis || s[k] == first.shape[k]);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: s.clone(),
                });
            }
            shape[axis] += s[axis];
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let t = &self.nodes[p.0].value;
                let w = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * w..(o + 1) * w]);
            }
        }
        self.push(Tensor { shape, data }, Op::Concat(parts.to_vec(), axis))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(
        &mut self,
        a: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, TensorError> {
        let ta = &self.nodes[a.0].value;
        if axis >= ta.rank() {
            return Err(TensorError::Axis {
                op: "narrow",
                axis,
                rank: ta.rank(),
            });
        }
        if start + len > ta.shape[axis] {
            return Err(TensorError::Index {
                op: "narrow",
                index: start + len,
                extent: ta.shape[axis],
            });
        }
        let (outer, n, inner) = split_axis(&ta.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&ta.data[base..base + len * inner]);
        }
        let mut shape = ta.shape.clone();
        shape[axis] = len;
        self.push(Tensor { shape, data }, Op::Narrow(a, axis, start))
    }

    /// Selects rows (indices along axis 0), repetitions allowed.
    pub fn gather(&mut self, a: Var, index: Arc<[usize]>) -> Result<Var, TensorError> {
        let ta = &self.nodes[a.0].value;
        if ta.rank() == 0 {
            return Err(TensorError::Axis {
                op: "gather",
                axis: 0,
                rank: 0,
            });
        }
        let rows = ta.shape[0];
        let w = ta.data.len() / rows.max(1);
        let mut data = Vec::with_capacity(index.len() * w);
        for &i in index.iter() {
            if i >= rows {
                return Err(TensorError::Index {
                    op: "gather",
                    index: i,
                    extent: rows,
                });
            }
            data.extend_from_slice(&ta.data[i * w..(i + 1) * w]);
        }
        let mut shape = ta.shape.clone();
        shape[0] = index.len();
        self.push(Tensor { shape, data }, Op::Gather(a, index))
    }

    /// Adds row `r` of `a` into output row `index[r]`; output has `rows` rows.
    pub fn scatter_add(
        &mut self,
        a: Var,
        index: Arc<[usize]>,
        rows: usize,
    ) -> Result<Var, TensorError> {
        let ta = &self.nodes[a.0].value;
        if ta.rank() == 0 || ta.shape[0] != index.len() {
            return Err(TensorError::Shape {
                op: "scatter_add",
                lhs: ta.shape.clone(),
                rhs: vec![index.len()],
            });
        }
        let w = ta.data.len() / index.len().max(1);
        let mut data = vec![0.0; rows * w];
        for (r, &i) in index.iter().enumerate() {
            if i >= rows {
                return Err(TensorError::Index {
                    op: "scatter_add",
                    index: i,
                    extent: rows,
                });
            }
            for (o, x) in data[i * w..(i + 1) * w]
                .iter_mut()
                .zip(&ta.data[r * w..(r + 1) * w])
            {
                *o += x;
            }
        }
        let mut shape = ta.shape.clone();
        shape[0] = rows;
        self.push(Tensor { shape, data }, Op::ScatterAdd(a, index))
    }

    fn reduce_axis(
        &self,
        a: Var,
        axis: usize,
        op: &'static str,
    ) -> Result<(Tensor, usize), TensorError> {
        let ta = &self.nodes[a.0].value;
        if axis >= ta.rank() {
            return Err(TensorError::Axis {
                op,
                axis,
                rank: ta.rank(),
            });
        }
        let (outer, n, inner) = split_axis(&ta.shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &ta.data[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = ta.shape.clone();
        shape.remove(axis);
        Ok((Tensor { shape, data }, n))
    }

    /// Sum over `axis` (the axis is removed).
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let (t, _) = self.reduce_axis(a, axis, "sum")?;
        self.push(t, Op::Sum(a, axis))
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let (mut t, n) = self.reduce_axis(a, axis, "mean")?;
        t.data.iter_mut().for_each(|x| *x /= n as f64);
        self.push(t, Op::Mean(a, axis))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.nodes[a.0].value.data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = &self.nodes[a.0].value;
        let s = t.data.iter().sum::<f64>() / t.data.len() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(a))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = &self.nodes[a.0].value;
        Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.unary(a, |x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.unary(a, gelu);
        self.push(t, Op::Gelu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.unary(a, f64::sqrt);
        self.push(t, Op::Sqrt(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.unary(a, f64::exp);
        self.push(t, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.unary(a, f64::abs);
        self.push(t, Op::Abs(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let ta = &self.nodes[a.0].value;
        if axis >= ta.rank() {
            return Err(TensorError::Axis {
                op: "softmax",
                axis,
                rank: ta.rank(),
            });
        }
        let (outer, n, inner) = split_axis(&ta.shape, axis);
        let mut data = ta.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n)
                    .map(|j| data[at(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (data[at(j)] - max).exp();
                    data[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    data[at(j)] /= z;
                }
            }
        }
        let t = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        self.push(t, Op::Softmax(a, axis))
    }

    /// Normalizes to zero mean and unit variance along `axis` (no affine part).
    pub fn layer_norm(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let ta = &self.nodes[a.0].value;
        if axis >= ta.rank() {
            return Err(TensorError::Axis {
                op: "layer_norm",
                axis,
                rank: ta.rank(),
            });
        }
        let (outer, n, inner) = split_axis(&ta.shape, axis);
        let mut data = ta.data.clone();
        let mut inv_std = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mu = (0..n).map(|j| data[at(j)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|j| (data[at(j)] - mu).powi(2)).sum::<f64>() / n as f64;
                let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for j in 0..n {
                    data[at(j)] = (data[at(j)] - mu) * s;
                }
                inv_std[o * inner + i] = s;
            }
        }
        let t = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        self.push(t, Op::LayerNorm(a, axis, inv_std))
    }

    /// Sum of squares along `axis` (the axis is removed).
    pub fn squared_norm(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let ta = &self.nodes[a.0].value;
        if axis >= ta.rank() {
            return Err(TensorError::Axis {
                op: "squared_norm",
                axis,
                rank: ta.rank(),
            });
        }
        let (outer, n, inner) = split_axis(&ta.shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    let x = ta.data[(o * n + j) * inner + i];
                    data[o * inner + i] += x * x;
                }
            }
        }
        let mut shape = ta.shape.clone();
        shape.remove(axis);
        self.push(Tensor { shape, data }, Op::SquaredNorm(a, axis))
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[Var]) -> Result<Var, TensorError> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let t = op.forward(&values)?;
        self.push(t, Op::Custom(op, inputs.to_vec()))
    }

    /// Reverse sweep from a scalar. Gradients are added into tracked leaves,
    /// so calling twice without [`Graph::zero_grads`] doubles them.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape.clone()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor {
            shape: lt.shape.clone(),
            data: vec![1.0],
        });
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = &mut self.nodes[id].grad;
                let shape = g.shape.clone();
                accumulate(slot, &shape, g.data);
                continue;
            }
            self.push_back(id, &g, &mut grads)?;
        }
        Ok(())
    }

    fn push_back(
        &self,
        id: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), TensorError> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, delta: Vec<f64>| {
            if self.nodes[v.0].requires_grad {
                let shape = self.nodes[v.0].value.shape.clone();
                accumulate(&mut grads[v.0], &shape, delta);
            }
        };
        let gd = &g.data;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    send(*a, gd.clone());
                }
                if wants(*b) {
                    send(*b, reduce_broadcast(gd, val(*b).numel()));
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    send(*a, gd.clone());
                }
                if wants(*b) {
                    let r = reduce_broadcast(gd, val(*b).numel());
                    send(*b, r.into_iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let nb = tb.numel();
                if wants(*a) {
                    let mut d = Vec::with_capacity(gd.len());
                    for c in gd.chunks_exact(nb) {
                        d.extend(c.iter().zip(&tb.data).map(|(x, y)| x * y));
                    }
                    send(*a, d);
                }
                if wants(*b) {
                    let prod: Vec<f64> = gd.iter().zip(&ta.data).map(|(x, y)| x * y).collect();
                    send(
                        *b,
                        if prod.len() == nb {
                            prod
                        } else {
                            reduce_broadcast(&prod, nb)
                        },
                    );
                }
            }
            Op::Scale(a, s) => send(*a, gd.iter().map(|x| x * s).collect()),
            Op::Shift(a) => send(*a, gd.clone()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if wants(*a) {
                    send(*a, matmul_nt(gd, &tb.data, n, m, k));
                }
                if wants(*b) {
                    send(*b, matmul_tn(&ta.data, gd, n, k, m));
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (val(*a).shape[0], val(*a).shape[1]);
                send(*a, transpose2(gd, m, n));
            }
            Op::Reshape(a) => send(*a, gd.clone()),
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = split_axis(&g.shape, *axis);
                let total = g.shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).shape[*axis] * inner;
                    if wants(*p) {
                        let mut d = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            d.extend_from_slice(&gd[o * total + offset..o * total + offset + w]);
                        }
                        send(*p, d);
                    }
                    offset += w;
                }
            }
            Op::Narrow(a, axis, start) => {
                let ta = val(*a);
                let (outer, n, inner) = split_axis(&ta.shape, *axis);
                let len = g.shape[*axis];
                let mut d = vec![0.0; ta.numel()];
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                send(*a, d);
            }
            Op::Gather(a, index) => {
                let ta = val(*a);
                let w = ta.numel() / ta.shape[0].max(1);
                let mut d = vec![0.0; ta.numel()];
                for (r, &i) in index.iter().enumerate() {
                    for (o, x) in d[i * w..(i + 1) * w]
                        .iter_mut()
                        .zip(&gd[r * w..(r + 1) * w])
                    {
                        *o += x;
                    }
                }
                send(*a, d);
            }
            Op::ScatterAdd(a, index) => {
                let w = gd.len() / g.shape[0].max(1);
                let mut d = Vec::with_capacity(index.len() * w);
                for &i in index.iter() {
                    d.extend_from_slice(&gd[i * w..(i + 1) * w]);
                }
                send(*a, d);
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let ta = val(*a);
                let (outer, n, inner) = split_axis(&ta.shape, *axis);
                let s = if matches!(node.op, Op::Mean(..)) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                let mut d = Vec::with_capacity(ta.numel());
                for o in 0..outer {
                    for _ in 0..n {
                        d.extend(gd[o * inner..(o + 1) * inner].iter().map(|x| x * s));
                    }
                }
                send(*a, d);
            }
            Op::SumAll(a) => send(*a, vec![gd[0]; val(*a).numel()]),
            Op::MeanAll(a) => {
                let n = val(*a).numel();
                send(*a, vec![gd[0] / n as f64; n]);
            }
            Op::Relu(a) => {
                let d = gd
                    .iter()
                    .zip(&val(*a).data)
                    .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                    .collect();
                send(*a, d);
            }
            Op::Gelu(a) => {
                let d = gd
                    .iter()
                    .zip(&val(*a).data)
                    .map(|(x, &v)| x * gelu_grad(v))
                    .collect();
                send(*a, d);
            }
            Op::Sqrt(a) => {
                let d = gd
                    .iter()
                    .zip(&node.value.data)
                    .map(|(x, y)| 0.5 * x / y)
                    .collect();
                send(*a, d);
            }
            Op::Exp(a) => {
                let d = gd
                    .iter()
                    .zip(&node.value.data)
                    .map(|(x, y)| x * y)
                    .collect();
                send(*a, d);
            }
            Op::Abs(a) => {
                let d = gd
                    .iter()
                    .zip(&val(*a).data)
                    .map(|(x, &v)| x * sign(v))
                    .collect();
                send(*a, d);
            }
            Op::Softmax(a, axis) => {
                let y = &node.value;
                let (outer, n, inner) = split_axis(&y.shape, *axis);
                let mut d = vec![0.0; y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| gd[at(j)] * y.data[at(j)]).sum();
                        for j in 0..n {
                            d[at(j)] = y.data[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                send(*a, d);
            }
            Op::LayerNorm(a, axis, inv_std) => {
                let y = &node.value;
                let (outer, n, inner) = split_axis(&y.shape, *axis);
                let mut d = vec![0.0; y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let mg = (0..n).map(|j| gd[at(j)]).sum::<f64>() / n as f64;
                        let mgy = (0..n).map(|j| gd[at(j)] * y.data[at(j)]).sum::<f64>() / n as f64;
                        let s = inv_std[o * inner + i];
                        for j in 0..n {
                            d[at(j)] = s * (gd[at(j)] - mg - y.data[at(j)] * mgy);
                        }
                    }
                }
                send(*a, d);
            }
            Op::SquaredNorm(a, axis) => {
                let ta = val(*a);
                let (outer, n, inner) = split_axis(&ta.shape, *axis);
                let mut d = vec![0.0; ta.numel()];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            let k = (o * n + j) * inner + i;
                            d[k] = 2.0 * ta.data[k] * gd[o * inner + i];
                        }
                    }
                }
                send(*a, d);
            }
            Op::Custom(op, inputs) => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let gs = op.backward(&values, &node.value, g)?;
                for (v, gi) in inputs.iter().zip(gs) {
                    if let Some(t) = gi {
                        if t.numel() != val(*v).numel() {
                            return Err(TensorError::Shape {
                                op: "custom backward",
                                lhs: val(*v).shape.clone(),
                                rhs: t.shape,
                            });
                        }
                        send(*v, t.data);
                    }
                }
            }
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn forward_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[2, 3], 1.0));
        let b = g.constant(Tensor::full(&[3, 2], 1.0));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &Tensor::full(&[2, 2], 3.0));
        let z = g.constant(Tensor::zeros(&[3]));
        let s = g.softmax(z, 0).unwrap();
        assert!(g
            .value(s)
            .data()
            .iter()
            .all(|&x| (x - 1.0 / 3.0).abs() < 1e-16));
    }

    #[test]
    fn relu_gradient_matches_differences() {
        let x0 = t(&[2], &[-1.0, 2.0]);
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let r = g.relu(x).unwrap();
        let l = g.sum_all(r).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
        let f = |v: &[f64]| v.iter().map(|x| x.max(0.0)).sum::<f64>();
        let h = 1e-6;
        for i in 0..2 {
            let (mut up, mut down) = (x0.data().to_vec(), x0.data().to_vec());
            up[i] += h;
            down[i] -= h;
            let fd = (f(&up) - f(&down)) / (2.0 * h);
            assert!((fd - g.grad(x).unwrap().data()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn sum_gradient_is_ones_and_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.param(t(&[4], &[0.5, -1.0, 2.0, 3.0]));
        let l = g.sum_all(x).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &Tensor::full(&[4], 1.0));

        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.param(t(&[3], &[-1.0, 0.5, 4.0]));
        let p = g.mul(x, y).unwrap();
        let l = g.sum_all(p).unwrap();
        g.backward(l).unwrap();
        let once = (g.grad(x).unwrap().clone(), g.grad(y).unwrap().clone());
        g.backward(l).unwrap();
        for (a, b) in g.grad(x).unwrap().data().iter().zip(once.0.data()) {
            assert_eq!(*a, 2.0 * b);
        }
        for (a, b) in g.grad(y).unwrap().data().iter().zip(once.1.data()) {
            assert_eq!(*a, 2.0 * b);
        }
        g.zero_grads();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(TensorError::Shape { .. })));
        let c = g.constant(Tensor::zeros(&[4]));
        assert!(matches!(g.add(a, c), Err(TensorError::Shape { .. })));
        assert!(matches!(
            g.gather(a, vec![0, 2].into()),
            Err(TensorError::Index { .. })
        ));
        assert!(matches!(g.softmax(a, 2), Err(TensorError::Axis { .. })));
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
        let neg = g.constant(t(&[1], &[-1.0]));
        assert!(matches!(g.sqrt(neg), Err(TensorError::NonFinite { .. })));
        g.set_checked(false);
        let s = g.sqrt(neg).unwrap();
        assert!(g.value(s).data()[0].is_nan());
    }

    #[test]
    fn topological_tape() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.exp(x).unwrap();
        let z = g.mul(y, x).unwrap();
        assert!(x.index() < y.index() && y.index() < z.index());
        assert!(g.requires_grad(z));
        let c = g.constant(Tensor::zeros(&[2]));
        let d = g.add(c, c).unwrap();
        assert!(!g.requires_grad(d));
    }
}
