//! Reverse-mode differentiation over a closed set of dense primitives.
//!
//! A [`Tape`] records every primitive in creation order, which is already a
//! topological order, so the reverse pass simply walks the record backwards.
//! Values are owned by the tape; [`Var`] is an index into it.
//!
//! Binary elementwise primitives (`add`, `sub`, `mul`) broadcast: each
//! operand dimension must equal the output dimension or be 1.

use std::collections::HashMap;
use std::sync::Arc;

use super::tensor::Tensor2;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Elu(Var, f64),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Powf(Var, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    ScatterSym {
        src: Var,
        pairs: Arc<[(usize, usize)]>,
    },
}

struct Node {
    value: Tensor2,
    op: Op,
    needs_grad: bool,
    is_param: bool,
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor2>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor2> {
        self.grads.get(&v)
    }

    /// Removes and returns the gradient for `v`.
    pub fn take(&mut self, v: Var) -> Option<Tensor2> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn broadcast_shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::Shape { op, lhs: a, rhs: b }),
    }
}

fn broadcast_zip(a: &Tensor2, b: &Tensor2, shape: (usize, usize), f: impl Fn(f64, f64) -> f64) -> Tensor2 {
    if a.shape() == shape && b.shape() == shape {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor2::from_vec(shape.0, shape.1, data).expect("shape checked");
    }
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut data = Vec::with_capacity(shape.0 * shape.1);
    for i in 0..shape.0 {
        let ia = if ar == 1 { 0 } else { i };
        let ib = if br == 1 { 0 } else { i };
        for j in 0..shape.1 {
            let ja = if ac == 1 { 0 } else { j };
            let jb = if bc == 1 { 0 } else { j };
            data.push(f(a.get(ia, ja), b.get(ib, jb)));
        }
    }
    Tensor2::from_vec(shape.0, shape.1, data).expect("shape checked")
}

/// Sums `grad` over broadcast dimensions so it matches `shape`.
fn reduce_to(grad: Tensor2, shape: (usize, usize)) -> Tensor2 {
    if grad.shape() == shape {
        return grad;
    }
    let mut out = Tensor2::zeros(shape.0, shape.1);
    for i in 0..grad.rows() {
        let oi = if shape.0 == 1 { 0 } else { i };
        for j in 0..grad.cols() {
            let oj = if shape.1 == 1 { 0 } else { j };
            let v = out.get(oi, oj) + grad.get(i, j);
            out.set(oi, oj, v);
        }
    }
    out
}

fn accumulate(slot: &mut Option<Tensor2>, g: Tensor2) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
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

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Records a leaf; its gradient is reported iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor2) -> Var {
        let is_param = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: is_param,
            is_param,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor2) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor2) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    fn push(&mut self, value: Tensor2, op: Op, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        let needs_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            is_param: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Elu(a, _)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Powf(a, _)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::GatherRows(a, _)
            | Op::Transpose(a) => vec![*a],
            Op::ScatterSym { src, .. } => vec![*src],
            Op::ConcatCols(vs) => vs.clone(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape("add", self.shape(a), self.shape(b))?;
        let out = broadcast_zip(self.value(a), self.value(b), shape, |x, y| x + y);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape("sub", self.shape(a), self.shape(b))?;
        let out = broadcast_zip(self.value(a), self.value(b), shape, |x, y| x - y);
        self.push(out, Op::Sub(a, b), "sub")
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape("mul", self.shape(a), self.shape(b))?;
        let out = broadcast_zip(self.value(a), self.value(b), shape, |x, y| x * y);
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), "relu")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(out, Op::LeakyRelu(a, slope), "leaky_relu")
    }

    pub fn elu(&mut self, a: Var, alpha: f64) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { alpha * x.exp_m1() });
        self.push(out, Op::Elu(a, alpha), "elu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a), "log")
    }

    /// Elementwise power with a constant exponent.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.powf(p));
        self.push(out, Op::Powf(a, p), "powf")
    }

    /// Row-wise softmax. With a mask (row-major, same shape), entries whose
    /// mask is `false` are excluded and come out exactly 0.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<Arc<[bool]>>) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.shape();
        if let Some(m) = &mask {
            if m.len() != r * c {
                return Err(Error::Shape {
                    op: "softmax_rows mask",
                    lhs: (r, c),
                    rhs: (m.len(), 1),
                });
            }
        }
        let keep = |idx: usize| mask.as_ref().is_none_or(|m| m[idx]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = x.row(i);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if keep(i * c + j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if keep(i * c + j) {
                    let e = (v - max).exp();
                    out[i * c + j] = e;
                    z += e;
                }
            }
            for o in &mut out[i * c..(i + 1) * c] {
                *o /= z;
            }
        }
        let out = Tensor2::from_vec(r, c, out)?;
        self.push(out, Op::SoftmaxRows(a), "softmax_rows")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.shape();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = x.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let out = Tensor2::from_vec(r, c, out)?;
        self.push(out, Op::LogSoftmaxRows(a), "log_softmax_rows")
    }

    /// Sum of all entries, as a `1×1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor2::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let out = Tensor2::scalar(x.sum() / x.len() as f64);
        self.push(out, Op::Mean(a), "mean")
    }

    /// Column-wise mean over rows: `r×c → 1×c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.shape();
        if r == 0 {
            return Err(Error::Contract("mean over zero rows".into()));
        }
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let out = Tensor2::from_vec(1, c, out)?;
        self.push(out, Op::MeanRows(a), "mean_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let rows = self.shape(*first).0;
        for p in parts {
            if self.shape(*p).0 != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(*first),
                    rhs: self.shape(*p),
                });
            }
        }
        let cols: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let out = Tensor2::from_vec(rows, cols, data)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let mut data = Vec::with_capacity(indices.len() * x.cols());
        for &i in indices {
            if i >= x.rows() {
                return Err(Error::Contract(format!(
                    "gather_rows index {i} out of range for {} rows",
                    x.rows()
                )));
            }
            data.extend_from_slice(x.row(i));
        }
        let out = Tensor2::from_vec(indices.len(), x.cols(), data)?;
        self.push(out, Op::GatherRows(a, indices.to_vec()), "gather_rows")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), "transpose")
    }

    /// Scatters an `E×1` column into a symmetric `n×n` matrix: entry `(i, j)`
    /// and `(j, i)` receive `src[e]` for `pairs[e] = (i, j)`; all other
    /// entries are 0.
    pub fn scatter_sym(&mut self, src: Var, pairs: Arc<[(usize, usize)]>, n: usize) -> Result<Var> {
        let x = self.value(src);
        if x.shape() != (pairs.len(), 1) {
            return Err(Error::Shape {
                op: "scatter_sym",
                lhs: x.shape(),
                rhs: (pairs.len(), 1),
            });
        }
        let mut out = Tensor2::zeros(n, n);
        for (e, &(i, j)) in pairs.iter().enumerate() {
            if i >= n || j >= n {
                return Err(Error::Contract(format!("scatter_sym pair ({i}, {j}) outside {n} nodes")));
            }
            let v = x.data()[e];
            out.set(i, j, v);
            out.set(j, i, v);
        }
        self.push(out, Op::ScatterSym { src, pairs }, "scatter_sym")
    }

    /// Runs the reverse pass from a `1×1` loss, returns gradients for every
    /// `requires_grad` leaf and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Tensor2>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor2::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if node.is_param {
                grads[idx] = Some(g);
                continue;
            }
            let wants = |v: &Var| nodes[v.0].needs_grad;
            let val = |v: &Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if wants(a) {
                        accumulate(&mut grads[a.0], g.matmul_nt(val(b)));
                    }
                    if wants(b) {
                        accumulate(&mut grads[b.0], val(a).matmul_tn(&g));
                    }
                }
                Op::Add(a, b) => {
                    if wants(a) {
                        accumulate(&mut grads[a.0], reduce_to(g.clone(), val(a).shape()));
                    }
                    if wants(b) {
                        accumulate(&mut grads[b.0], reduce_to(g, val(b).shape()));
                    }
                }
                Op::Sub(a, b) => {
                    if wants(a) {
                        accumulate(&mut grads[a.0], reduce_to(g.clone(), val(a).shape()));
                    }
                    if wants(b) {
                        accumulate(&mut grads[b.0], reduce_to(g.map(|x| -x), val(b).shape()));
                    }
                }
                Op::Mul(a, b) => {
                    let shape = g.shape();
                    if wants(a) {
                        let ga = broadcast_zip(&g, val(b), shape, |x, y| x * y);
                        accumulate(&mut grads[a.0], reduce_to(ga, val(a).shape()));
                    }
                    if wants(b) {
                        let gb = broadcast_zip(&g, val(a), shape, |x, y| x * y);
                        accumulate(&mut grads[b.0], reduce_to(gb, val(b).shape()));
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads[a.0], g.map(|x| x * c)),
                Op::Relu(a) => {
                    let ga = g.zip_map(val(a), |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::LeakyRelu(a, slope) => {
                    let ga = g.zip_map(val(a), |gv, x| if x > 0.0 { gv } else { slope * gv })?;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Elu(a, alpha) => {
                    let y = &node.value;
                    let d = val(a).zip_map(y, |x, yv| if x > 0.0 { 1.0 } else { yv + alpha })?;
                    accumulate(&mut grads[a.0], g.zip_map(&d, |gv, dv| gv * dv)?);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y))?;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip_map(&node.value, |gv, y| gv * y)?;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Log(a) => {
                    let ga = g.zip_map(val(a), |gv, x| gv / x)?;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Powf(a, p) => {
                    let ga = g.zip_map(val(a), |gv, x| gv * p * x.powf(p - 1.0))?;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let (r, c) = y.shape();
                    let mut out = vec![0.0; r * c];
                    for i in 0..r {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            out[i * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], Tensor2::from_vec(r, c, out)?);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let (r, c) = y.shape();
                    let mut out = vec![0.0; r * c];
                    for i in 0..r {
                        let gr = g.row(i);
                        let gsum: f64 = gr.iter().sum();
                        for (j, &yv) in y.row(i).iter().enumerate() {
                            out[i * c + j] = gr[j] - yv.exp() * gsum;
                        }
                    }
                    accumulate(&mut grads[a.0], Tensor2::from_vec(r, c, out)?);
                }
                Op::Sum(a) => {
                    let (r, c) = val(a).shape();
                    accumulate(&mut grads[a.0], Tensor2::full(r, c, g.data()[0]));
                }
                Op::Mean(a) => {
                    let (r, c) = val(a).shape();
                    let v = g.data()[0] / (r * c) as f64;
                    accumulate(&mut grads[a.0], Tensor2::full(r, c, v));
                }
                Op::MeanRows(a) => {
                    let (r, c) = val(a).shape();
                    let scale = 1.0 / r as f64;
                    let ga = Tensor2::from_fn(r, c, |_, j| g.data()[j] * scale);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (r, c) = val(p).shape();
                        if wants(p) {
                            let gp = Tensor2::from_fn(r, c, |i, j| g.get(i, offset + j));
                            accumulate(&mut grads[p.0], gp);
                        }
                        offset += c;
                    }
                }
                Op::GatherRows(a, indices) => {
                    let (r, c) = val(a).shape();
                    let mut ga = Tensor2::zeros(r, c);
                    for (k, &i) in indices.iter().enumerate() {
                        for j in 0..c {
                            let v = ga.get(i, j) + g.get(k, j);
                            ga.set(i, j, v);
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Transpose(a) => accumulate(&mut grads[a.0], g.transpose()),
                Op::ScatterSym { src, pairs } => {
                    let data = pairs.iter().map(|&(i, j)| g.get(i, j) + g.get(j, i)).collect();
                    accumulate(&mut grads[src.0], Tensor2::from_vec(pairs.len(), 1, data)?);
                }
            }
        }

        let mut out = Gradients::default();
        for (idx, node) in nodes.iter().enumerate() {
            if node.is_param {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| Tensor2::zeros(node.value.rows(), node.value.cols()));
                out.grads.insert(Var(idx), g);
            }
        }
        Ok(out)
    }
}
