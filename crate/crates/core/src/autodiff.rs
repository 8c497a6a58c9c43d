//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records primitive operations during the forward pass; [`Tape::backward`]
//! replays the chain rule in reverse topological order and returns gradients for
//! every leaf tensor. Everything is 64-bit: the GP likelihoods downstream are too
//! ill-conditioned for single precision.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};
use std::collections::HashMap;
use std::sync::Arc;

pub type NodeId = usize;

/// Hand-written forward/backward pair for operations that are cheaper fused
/// than expressed as many fine-grained primitives (Vecchia prior, batched
/// conditional densities, implicit-reparameterization sampling).
pub trait CustomOp: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &'static str;
    /// Returns the output tensor and any saved intermediates the backward pass needs.
    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Vec<Tensor>)>;
    /// Returns one gradient tensor per input, shape-matched.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        saved: &[Tensor],
        grad: &Tensor,
    ) -> Result<Vec<Tensor>>;
}

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    SumReduce(NodeId),
    LnGamma(NodeId),
    Cholesky(NodeId),
    /// Solve L x = b with L lower triangular; node value is x.
    SolveLowerTri(NodeId, NodeId),
    Sqrt(NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, f64),
    ClampMax(NodeId, f64),
    Diag(NodeId),
    Slice { input: NodeId, start: usize, len: usize },
    Gather { input: NodeId, indices: Arc<Vec<usize>> },
    /// Concatenate scalar nodes into one vector.
    Stack(Vec<NodeId>),
    LogSumExp(NodeId),
    Custom { op: Arc<dyn CustomOp>, inputs: Vec<NodeId> },
}

struct Node {
    op: Op,
    value: Tensor,
    saved: Vec<Tensor>,
    requires_grad: bool,
}

/// Per-leaf gradients produced by a backward pass.
#[derive(Debug)]
pub struct GradientMap {
    grads: HashMap<NodeId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.grads.get(&leaf)
    }

    /// Gradient of `leaf`, zero-filled if the leaf never influenced the output.
    pub fn get_or_zeros(&self, tape: &Tape, leaf: NodeId) -> Tensor {
        match self.grads.get(&leaf) {
            Some(g) => g.clone(),
            None => Tensor::zeros_like(tape.value(leaf)),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn softplus_f(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Numerically stable log-sum-exp of a slice; shared with non-tape callers.
pub fn logsumexp_slice(values: &[f64]) -> f64 {
    log_sum_exp(values)
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, vec![], true)
    }

    /// A non-differentiable input (data, noise draws, precomputed distances).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value, vec![], false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    fn push(&mut self, op: Op, value: Tensor, saved: Vec<Tensor>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, saved, requires_grad });
        self.nodes.len() - 1
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ---- elementwise helpers ------------------------------------------------

    /// Elementwise shapes must match exactly, except a length-one operand
    /// broadcasts against anything. General broadcasting is out of scope.
    fn ew_shape<'a>(&'a self, a: NodeId, b: NodeId, what: &str) -> Result<&'a [usize]> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.is_scalar() {
            Ok(&tb.shape)
        } else if tb.is_scalar() {
            Ok(&ta.shape)
        } else if ta.shape == tb.shape {
            Ok(&ta.shape)
        } else {
            Err(Error::ShapeMismatch(format!(
                "{}: {:?} vs {:?}",
                what, ta.shape, tb.shape
            )))
        }
    }

    fn ew_binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let shape = self.ew_shape(a, b, what)?.to_vec();
        let ta = self.value(a);
        let tb = self.value(b);
        let n: usize = shape.iter().product::<usize>().max(1);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let av = if ta.is_scalar() { ta.values[0] } else { ta.values[i] };
            let bv = if tb.is_scalar() { tb.values[0] } else { tb.values[i] };
            out.push(f(av, bv));
        }
        let value = Tensor { shape, values: out };
        let req = self.requires(&[a, b]);
        Ok(self.push(op, value, vec![], req))
    }

    fn ew_unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let ta = self.value(a);
        let value = Tensor {
            shape: ta.shape.clone(),
            values: ta.values.iter().map(|&v| f(v)).collect(),
        };
        let req = self.nodes[a].requires_grad;
        self.push(op, value, vec![], req)
    }

    // ---- primitives ---------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ew_binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ew_binary(a, b, "subtract", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ew_binary(a, b, "multiply", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ew_binary(a, b, "divide", |x, y| x / y, Op::Div(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        let req = self.requires(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), value, vec![], req))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.ew_unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.ew_unary(a, f64::ln, Op::Ln(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.ew_unary(a, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.ew_unary(a, softplus_f, Op::Softplus(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).values.iter().sum();
        let req = self.nodes[a].requires_grad;
        self.push(Op::SumReduce(a), Tensor::scalar(s), vec![], req)
    }

    pub fn ln_gamma(&mut self, a: NodeId) -> NodeId {
        self.ew_unary(a, ln_gamma, Op::LnGamma(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.ew_unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.ew_unary(a, |v| -v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.ew_unary(a, |v| c * v, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        self.ew_unary(a, |v| v + c, Op::AddConst(a, c))
    }

    pub fn clamp_max(&mut self, a: NodeId, cap: f64) -> NodeId {
        self.ew_unary(a, |v| v.min(cap), Op::ClampMax(a, cap))
    }

    /// Lower Cholesky factor; the node value is the factor itself, which is
    /// all the backward pass needs.
    pub fn cholesky(&mut self, a: NodeId) -> Result<NodeId> {
        let l = tensor::cholesky(self.value(a))?;
        let req = self.nodes[a].requires_grad;
        Ok(self.push(Op::Cholesky(a), l, vec![], req))
    }

    /// Solve L x = b for lower-triangular L; saves nothing beyond the solution.
    pub fn solve_lower(&mut self, l: NodeId, b: NodeId) -> Result<NodeId> {
        let tl = self.value(l);
        if !tl.is_matrix() || tl.rows() != tl.cols() {
            return Err(Error::ShapeMismatch("solve_lower: factor must be square".into()));
        }
        let x = tensor::solve_lower(tl, &self.value(b).values)?;
        let req = self.requires(&[l, b]);
        Ok(self.push(Op::SolveLowerTri(l, b), Tensor::vector(x), vec![], req))
    }

    pub fn diag(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        if !ta.is_matrix() || ta.rows() != ta.cols() {
            return Err(Error::ShapeMismatch("diag needs a square matrix".into()));
        }
        let n = ta.rows();
        let v: Vec<f64> = (0..n).map(|i| ta.values[i * n + i]).collect();
        let req = self.nodes[a].requires_grad;
        Ok(self.push(Op::Diag(a), Tensor::vector(v), vec![], req))
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let ta = self.value(a);
        if start + len > ta.len() {
            return Err(Error::ShapeMismatch(format!(
                "slice {}..{} out of range for length {}",
                start,
                start + len,
                ta.len()
            )));
        }
        let v = ta.values[start..start + len].to_vec();
        let req = self.nodes[a].requires_grad;
        Ok(self.push(Op::Slice { input: a, start, len }, Tensor::vector(v), vec![], req))
    }

    /// Vector gather: out[i] = a[indices[i]].
    pub fn gather(&mut self, a: NodeId, indices: Arc<Vec<usize>>) -> Result<NodeId> {
        let ta = self.value(a);
        let mut v = Vec::with_capacity(indices.len());
        for &ix in indices.iter() {
            if ix >= ta.len() {
                return Err(Error::ShapeMismatch(format!(
                    "gather index {} out of range for length {}",
                    ix,
                    ta.len()
                )));
            }
            v.push(ta.values[ix]);
        }
        let req = self.nodes[a].requires_grad;
        Ok(self.push(Op::Gather { input: a, indices }, Tensor::vector(v), vec![], req))
    }

    /// Concatenate scalar nodes into a vector node.
    pub fn stack(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut v = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if !t.is_scalar() {
                return Err(Error::ShapeMismatch("stack needs scalar inputs".into()));
            }
            v.push(t.values[0]);
        }
        let req = self.requires(parts);
        Ok(self.push(Op::Stack(parts.to_vec()), Tensor::vector(v), vec![], req))
    }

    pub fn logsumexp(&mut self, a: NodeId) -> NodeId {
        let s = log_sum_exp(&self.value(a).values);
        let req = self.nodes[a].requires_grad;
        self.push(Op::LogSumExp(a), Tensor::scalar(s), vec![], req)
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: Vec<NodeId>) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
        let (value, saved) = op.forward(&tensors)?;
        let req = self.requires(&inputs);
        Ok(self.push(Op::Custom { op, inputs }, value, saved, req))
    }

    // ---- composite conveniences (recorded as primitives) --------------------

    /// x squared, as x*x on the tape.
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.mul(a, a)
    }

    /// Dot product of two vectors.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse pass from a scalar seed output; returns gradients for all leaves.
    pub fn backward(&self, seed: NodeId) -> Result<GradientMap> {
        if !self.value(seed).is_scalar() {
            return Err(Error::ShapeMismatch("backward seed must be scalar".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[seed] = Some(Tensor {
            shape: self.value(seed).shape.clone(),
            values: vec![1.0],
        });

        for id in (0..self.nodes.len()).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.backprop_node(id, &g, &mut grads)?;
            // keep the seed/leaf gradients; interior gradients can be dropped
            if matches!(self.nodes[id].op, Op::Leaf) || id == seed {
                grads[id] = Some(g);
            }
        }

        let mut out = HashMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                if let Some(g) = grads[id].take() {
                    out.insert(id, g);
                }
            }
        }
        Ok(GradientMap { grads: out })
    }

    fn accumulate(&self, grads: &mut Vec<Option<Tensor>>, target: NodeId, contrib: Tensor) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let tv = self.value(target);
        // reduce a broadcasted contribution back to a scalar slot
        let contrib = if tv.is_scalar() && contrib.len() > 1 {
            Tensor {
                shape: tv.shape.clone(),
                values: vec![contrib.values.iter().sum()],
            }
        } else {
            contrib
        };
        match &mut grads[target] {
            Some(existing) => {
                for (e, c) in existing.values.iter_mut().zip(contrib.values.iter()) {
                    *e += c;
                }
            }
            slot @ None => {
                let mut t = contrib;
                t.shape = tv.shape.clone();
                *slot = Some(t);
            }
        }
    }

    fn backprop_node(
        &self,
        id: NodeId,
        g: &Tensor,
        grads: &mut Vec<Option<Tensor>>,
    ) -> Result<()> {
        use Op::*;
        let node = &self.nodes[id];
        match &node.op {
            Leaf | Constant => {}
            Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let neg = Tensor {
                    shape: g.shape.clone(),
                    values: g.values.iter().map(|v| -v).collect(),
                };
                self.accumulate(grads, *b, neg);
            }
            Mul(a, b) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                self.accumulate(grads, *a, ew_scaled(g, tb));
                self.accumulate(grads, *b, ew_scaled(g, ta));
            }
            Div(a, b) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let ga = ew_map2(g, tb, |gv, bv| gv / bv);
                self.accumulate(grads, *a, ga);
                let n = g.len();
                let mut gb = Vec::with_capacity(n);
                for i in 0..n {
                    let av = if ta.is_scalar() { ta.values[0] } else { ta.values[i] };
                    let bv = if tb.is_scalar() { tb.values[0] } else { tb.values[i] };
                    gb.push(-g.values[i] * av / (bv * bv));
                }
                self.accumulate(grads, *b, Tensor { shape: g.shape.clone(), values: gb });
            }
            MatMul(a, b) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let (m, k) = (ta.rows(), ta.cols());
                if tb.shape.len() == 1 {
                    // C = A v : dA = g v^T, dv = A^T g
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for l in 0..k {
                            da[i * k + l] = g.values[i] * tb.values[l];
                        }
                    }
                    self.accumulate(grads, *a, Tensor { shape: vec![m, k], values: da });
                    let mut db = vec![0.0; k];
                    for i in 0..m {
                        let gv = g.values[i];
                        for l in 0..k {
                            db[l] += ta.values[i * k + l] * gv;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::vector(db));
                } else {
                    let n = tb.cols();
                    // dA = g B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for l in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g.values[i * n + j] * tb.values[l * n + j];
                            }
                            da[i * k + l] = s;
                        }
                    }
                    self.accumulate(grads, *a, Tensor { shape: vec![m, k], values: da });
                    // dB = A^T g
                    let mut db = vec![0.0; k * n];
                    for l in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += ta.values[i * k + l] * g.values[i * n + j];
                            }
                            db[l * n + j] = s;
                        }
                    }
                    self.accumulate(grads, *b, Tensor { shape: vec![k, n], values: db });
                }
            }
            Exp(a) => {
                let contrib = ew_scaled(g, &node.value);
                self.accumulate(grads, *a, contrib);
            }
            Ln(a) => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, ew_map2(g, ta, |gv, x| gv / x));
            }
            Relu(a) => {
                let ta = self.value(*a);
                // subgradient 0 at exactly 0
                self.accumulate(
                    grads,
                    *a,
                    ew_map2(g, ta, |gv, x| if x > 0.0 { gv } else { 0.0 }),
                );
            }
            Softplus(a) => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, ew_map2(g, ta, |gv, x| gv * sigmoid_f(x)));
            }
            SumReduce(a) => {
                let ta = self.value(*a);
                let contrib = Tensor {
                    shape: ta.shape.clone(),
                    values: vec![g.values[0]; ta.len()],
                };
                self.accumulate(grads, *a, contrib);
            }
            LnGamma(a) => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, ew_map2(g, ta, |gv, x| gv * digamma(x)));
            }
            Cholesky(a) => {
                let contrib = cholesky_adjoint(&node.value, g)?;
                self.accumulate(grads, *a, contrib);
            }
            SolveLowerTri(l, b) => {
                let tl = self.value(*l);
                let x = &node.value;
                let bbar = tensor::solve_lower_transpose(tl, &g.values)?;
                let n = tl.rows();
                let mut gl = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..=i {
                        gl[i * n + j] = -bbar[i] * x.values[j];
                    }
                }
                self.accumulate(grads, *l, Tensor { shape: vec![n, n], values: gl });
                self.accumulate(grads, *b, Tensor::vector(bbar));
            }
            Sqrt(a) => {
                let contrib = ew_map2(g, &node.value, |gv, s| gv / (2.0 * s));
                self.accumulate(grads, *a, contrib);
            }
            Neg(a) => {
                let contrib = Tensor {
                    shape: g.shape.clone(),
                    values: g.values.iter().map(|v| -v).collect(),
                };
                self.accumulate(grads, *a, contrib);
            }
            Scale(a, c) => {
                let contrib = Tensor {
                    shape: g.shape.clone(),
                    values: g.values.iter().map(|v| c * v).collect(),
                };
                self.accumulate(grads, *a, contrib);
            }
            AddConst(a, _) => {
                self.accumulate(grads, *a, g.clone());
            }
            ClampMax(a, cap) => {
                let ta = self.value(*a);
                self.accumulate(
                    grads,
                    *a,
                    ew_map2(g, ta, |gv, x| if x < *cap { gv } else { 0.0 }),
                );
            }
            Diag(a) => {
                let n = g.len();
                let mut da = vec![0.0; n * n];
                for i in 0..n {
                    da[i * n + i] = g.values[i];
                }
                self.accumulate(grads, *a, Tensor { shape: vec![n, n], values: da });
            }
            Slice { input, start, len } => {
                let ta = self.value(*input);
                let mut da = vec![0.0; ta.len()];
                da[*start..*start + *len].copy_from_slice(&g.values);
                self.accumulate(grads, *input, Tensor { shape: ta.shape.clone(), values: da });
            }
            Gather { input, indices } => {
                let ta = self.value(*input);
                let mut da = vec![0.0; ta.len()];
                for (&ix, gv) in indices.iter().zip(g.values.iter()) {
                    da[ix] += gv;
                }
                self.accumulate(grads, *input, Tensor { shape: ta.shape.clone(), values: da });
            }
            Stack(parts) => {
                for (i, &p) in parts.iter().enumerate() {
                    self.accumulate(grads, p, Tensor::scalar(g.values[i]));
                }
            }
            LogSumExp(a) => {
                let ta = self.value(*a);
                let s = node.value.values[0];
                let gv = g.values[0];
                let contrib = Tensor {
                    shape: ta.shape.clone(),
                    values: ta.values.iter().map(|&x| gv * (x - s).exp()).collect(),
                };
                self.accumulate(grads, *a, contrib);
            }
            Custom { op, inputs } => {
                let tensors: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
                let input_grads = op.backward(&tensors, &node.value, &node.saved, g)?;
                if input_grads.len() != inputs.len() {
                    return Err(Error::Other(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        input_grads.len(),
                        inputs.len()
                    )));
                }
                for (&inp, ig) in inputs.iter().zip(input_grads) {
                    self.accumulate(grads, inp, ig);
                }
            }
        }
        Ok(())
    }

    /// Recompute all node values from the recorded op sequence and current
    /// leaf/constant values. Returns the recomputed values so callers can check
    /// bit-identical replay.
    pub fn replay_values(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf | Op::Constant => node.value.clone(),
                op => self.recompute(op, &values)?,
            };
            values.push(v);
        }
        Ok(values)
    }

    fn recompute(&self, op: &Op, values: &[Tensor]) -> Result<Tensor> {
        use Op::*;
        let ew2 = |a: &Tensor, b: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
            let shape = if a.is_scalar() { b.shape.clone() } else { a.shape.clone() };
            let n: usize = shape.iter().product::<usize>().max(1);
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let av = if a.is_scalar() { a.values[0] } else { a.values[i] };
                let bv = if b.is_scalar() { b.values[0] } else { b.values[i] };
                out.push(f(av, bv));
            }
            Tensor { shape, values: out }
        };
        let u = |a: &Tensor, f: &dyn Fn(f64) -> f64| Tensor {
            shape: a.shape.clone(),
            values: a.values.iter().map(|&v| f(v)).collect(),
        };
        Ok(match op {
            Leaf | Constant => unreachable!(),
            Add(a, b) => ew2(&values[*a], &values[*b], &|x, y| x + y),
            Sub(a, b) => ew2(&values[*a], &values[*b], &|x, y| x - y),
            Mul(a, b) => ew2(&values[*a], &values[*b], &|x, y| x * y),
            Div(a, b) => ew2(&values[*a], &values[*b], &|x, y| x / y),
            MatMul(a, b) => tensor::matmul(&values[*a], &values[*b])?,
            Exp(a) => u(&values[*a], &f64::exp),
            Ln(a) => u(&values[*a], &f64::ln),
            Relu(a) => u(&values[*a], &|v| if v > 0.0 { v } else { 0.0 }),
            Softplus(a) => u(&values[*a], &softplus_f),
            SumReduce(a) => Tensor::scalar(values[*a].values.iter().sum()),
            LnGamma(a) => u(&values[*a], &ln_gamma),
            Cholesky(a) => tensor::cholesky(&values[*a])?,
            SolveLowerTri(l, b) => {
                Tensor::vector(tensor::solve_lower(&values[*l], &values[*b].values)?)
            }
            Sqrt(a) => u(&values[*a], &f64::sqrt),
            Neg(a) => u(&values[*a], &|v| -v),
            Scale(a, c) => u(&values[*a], &|v| c * v),
            AddConst(a, c) => u(&values[*a], &|v| v + c),
            ClampMax(a, cap) => u(&values[*a], &|v| v.min(*cap)),
            Diag(a) => {
                let t = &values[*a];
                let n = t.rows();
                Tensor::vector((0..n).map(|i| t.values[i * n + i]).collect())
            }
            Slice { input, start, len } => {
                Tensor::vector(values[*input].values[*start..*start + *len].to_vec())
            }
            Gather { input, indices } => Tensor::vector(
                indices.iter().map(|&ix| values[*input].values[ix]).collect(),
            ),
            Stack(parts) => Tensor::vector(parts.iter().map(|&p| values[p].values[0]).collect()),
            LogSumExp(a) => Tensor::scalar(log_sum_exp(&values[*a].values)),
            Custom { op, inputs } => {
                let tensors: Vec<&Tensor> = inputs.iter().map(|&i| &values[i]).collect();
                op.forward(&tensors)?.0
            }
        })
    }
}

fn ew_scaled(g: &Tensor, other: &Tensor) -> Tensor {
    ew_map2(g, other, |gv, ov| gv * ov)
}

fn ew_map2(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n = g.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let ov = if other.is_scalar() { other.values[0] } else { other.values[i] };
        out.push(f(g.values[i], ov));
    }
    Tensor { shape: g.shape.clone(), values: out }
}

/// Standard factor-adjoint recurrence: given L and dL/dL-bar, return dA.
/// A-bar = 1/2 (S + S^T) with S = L^{-T} Phi(L^T L-bar) L^{-1},
/// Phi taking the lower triangle with halved diagonal.
fn cholesky_adjoint(l: &Tensor, lbar: &Tensor) -> Result<Tensor> {
    let n = l.rows();
    // P = L^T Lbar, using only the lower triangle of Lbar
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in i.max(j)..n {
                s += l.values[k * n + i] * lbar.values[k * n + j];
            }
            p[i * n + j] = s;
        }
    }
    // Phi: lower triangle, halved diagonal
    let mut phi = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..i {
            phi[i * n + j] = p[i * n + j];
        }
        phi[i * n + i] = 0.5 * p[i * n + i];
    }
    // S1 = L^{-T} Phi  (solve column by column)
    let mut s1 = vec![0.0; n * n];
    for col in 0..n {
        let b: Vec<f64> = (0..n).map(|r| phi[r * n + col]).collect();
        let x = tensor::solve_lower_transpose(l, &b)?;
        for r in 0..n {
            s1[r * n + col] = x[r];
        }
    }
    // S = S1 L^{-1}  =>  S^T = L^{-T} S1^T, solve per column of S1^T (rows of S1)
    let mut s = vec![0.0; n * n];
    for row in 0..n {
        let b: Vec<f64> = (0..n).map(|c| s1[row * n + c]).collect();
        let x = tensor::solve_lower_transpose(l, &b)?;
        for c in 0..n {
            s[row * n + c] = x[c];
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = 0.5 * (s[i * n + j] + s[j * n + i]);
        }
    }
    Tensor::matrix(n, n, out)
}

// ---- Adam ------------------------------------------------------------------

/// First/second-moment state for Adam, one pair per parameter tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: usize,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(Tensor::zeros_like).collect(),
            v: params.iter().map(Tensor::zeros_like).collect(),
            step: 0,
        }
    }
}

/// One Adam ascent step (the objective is maximized). Bias-corrected moments,
/// standard defaults beta1=0.9, beta2=0.999, eps=1e-8.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step;
    for g in grads {
        if !g.all_finite() {
            return Err(Error::Diverged { iteration: t });
        }
    }
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        debug_assert_eq!(p.len(), g.len());
        for i in 0..p.len() {
            let gi = g.values[i];
            m.values[i] = beta1 * m.values[i] + (1.0 - beta1) * gi;
            v.values[i] = beta2 * v.values[i] + (1.0 - beta2) * gi * gi;
            let mhat = m.values[i] / bc1;
            let vhat = v.values[i] / bc2;
            p.values[i] += learning_rate * mhat / (vhat.sqrt() + epsilon);
        }
    }
    Ok(())
}

/// Plain gradient ascent, selectable instead of Adam.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], learning_rate: f64) -> Result<()> {
    for g in grads {
        if !g.all_finite() {
            return Err(Error::Diverged { iteration: 0 });
        }
    }
    for (p, g) in params.iter_mut().zip(grads.iter()) {
        for i in 0..p.len() {
            p.values[i] += learning_rate * g.values[i];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::central_difference_gradient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn exp_of_zero_is_one() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let y = t.exp(x);
        assert_eq!(t.value(y).scalar_value(), 1.0);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().values[0], 1.0);
    }

    #[test]
    fn relu_subgradient_convention() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![-1.0, 2.0]));
        let r = t.relu(x);
        let s = t.sum(r);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().values, vec![0.0, 1.0]);
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut t = Tape::new();
        let i3 = t.constant(Tensor::identity(3));
        let a = t.leaf(Tensor::matrix(3, 3, (1..=9).map(|v| v as f64).collect()).unwrap());
        let c = t.matmul(i3, a).unwrap();
        assert_eq!(t.value(c).values, t.value(a).values);
    }

    #[test]
    fn logdet_gradient_is_symmetrized_inverse() {
        // L = logdet via 2 * sum(log(diag(chol(A)))), A = [[4,2],[2,3]]
        let a_vals = vec![4.0, 2.0, 2.0, 3.0];
        let f = |v: &[f64]| -> f64 {
            let mut t = Tape::new();
            let a = t.leaf(Tensor::matrix(2, 2, v.to_vec()).unwrap());
            let l = t.cholesky(a).unwrap();
            let d = t.diag(l).unwrap();
            let ld = t.ln(d);
            let s = t.sum(ld);
            let out = t.scale(s, 2.0);
            t.value(out).scalar_value()
        };
        let mut t = Tape::new();
        let a = t.leaf(Tensor::matrix(2, 2, a_vals.clone()).unwrap());
        let l = t.cholesky(a).unwrap();
        let d = t.diag(l).unwrap();
        let ld = t.ln(d);
        let s = t.sum(ld);
        let out = t.scale(s, 2.0);
        let g = t.backward(out).unwrap();
        let analytic = g.get(a).unwrap();
        let fd = central_difference_gradient(&f, &a_vals, 1e-5);
        for i in 0..4 {
            let rel = (analytic.values[i] - fd[i]).abs() / fd[i].abs().max(1e-12);
            assert!(rel < 1e-5, "entry {}: analytic {} fd {}", i, analytic.values[i], fd[i]);
        }
        // and equals the symmetrized inverse: inv([[4,2],[2,3]]) = 1/8 [[3,-2],[-2,4]]
        let inv = [3.0 / 8.0, -2.0 / 8.0, -2.0 / 8.0, 4.0 / 8.0];
        for i in 0..4 {
            assert!((analytic.values[i] - inv[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn duplicated_subexpression_accumulates() {
        // y = x*x + x  =>  dy/dx = 2x + 1
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let sq = t.mul(x, x).unwrap();
        let y = t.add(sq, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().values[0], 7.0);
    }

    #[test]
    fn cholesky_adjoint_of_diagonal_matrix() {
        // For diagonal A, L = sqrt(A); dA_ii = 1/2 * Lbar_ii / sqrt(a_ii)
        let diag = [4.0, 9.0, 16.0];
        let lbar = [0.5, -1.0, 2.0];
        let n = 3;
        let mut a = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            a.values[i * n + i] = diag[i];
        }
        let l = tensor::cholesky(&a).unwrap();
        let mut lb = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            lb.values[i * n + i] = lbar[i];
        }
        let abar = cholesky_adjoint(&l, &lb).unwrap();
        for i in 0..n {
            let expect = 0.5 * lbar[i] / diag[i].sqrt();
            assert!((abar.values[i * n + i] - expect).abs() < 1e-12);
            for j in 0..n {
                if i != j {
                    assert!(abar.values[i * n + j].abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.3, -1.2, 2.5]));
        let e = t.exp(x);
        let sp = t.softplus(x);
        let m = t.mul(e, sp).unwrap();
        let lse = t.logsumexp(m);
        let _ = lse;
        let replayed = t.replay_values().unwrap();
        for (id, v) in replayed.iter().enumerate() {
            assert_eq!(v.values, t.value(id).values, "node {}", id);
        }
    }

    /// Finite-difference sweep over every elementwise primitive plus the
    /// linear-algebra ops, on random well-conditioned inputs.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for trial in 0..20 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(0.2..2.0)).collect();
            let y: Vec<f64> = (0..4).map(|_| rng.gen_range(0.2..2.0)).collect();
            type Builder = fn(&mut Tape, NodeId, NodeId) -> NodeId;
            let cases: Vec<(&str, Builder)> = vec![
                ("add", |t, a, b| t.add(a, b).unwrap()),
                ("sub", |t, a, b| t.sub(a, b).unwrap()),
                ("mul", |t, a, b| t.mul(a, b).unwrap()),
                ("div", |t, a, b| t.div(a, b).unwrap()),
                ("exp", |t, a, _| t.exp(a)),
                ("ln", |t, a, _| t.ln(a)),
                ("softplus", |t, a, _| t.softplus(a)),
                ("sqrt", |t, a, _| t.sqrt(a)),
                ("lngamma", |t, a, _| t.ln_gamma(a)),
                ("neg", |t, a, _| t.neg(a)),
                ("scale", |t, a, _| t.scale(a, 1.7)),
                ("lse", |t, a, _| t.logsumexp(a)),
            ];
            for (name, build) in &cases {
                let f = |v: &[f64]| {
                    let mut t = Tape::new();
                    let a = t.leaf(Tensor::vector(v.to_vec()));
                    let b = t.constant(Tensor::vector(y.clone()));
                    let o = build(&mut t, a, b);
                    let s = t.sum(o);
                    t.value(s).scalar_value()
                };
                let mut t = Tape::new();
                let a = t.leaf(Tensor::vector(x.clone()));
                let b = t.constant(Tensor::vector(y.clone()));
                let o = build(&mut t, a, b);
                let s = t.sum(o);
                let g = t.backward(s).unwrap();
                let analytic = g.get_or_zeros(&t, a);
                let fd = central_difference_gradient(&f, &x, 1e-5);
                for i in 0..x.len() {
                    let rel = (analytic.values[i] - fd[i]).abs() / fd[i].abs().max(1e-8);
                    assert!(
                        rel < 1e-4,
                        "{} trial {} entry {}: analytic {} fd {}",
                        name,
                        trial,
                        i,
                        analytic.values[i],
                        fd[i]
                    );
                }
            }
        }
    }

    #[test]
    fn triangular_solve_gradient_matches_fd() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = 3;
            // well-conditioned SPD from A = B B^T + n I
            let b: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut a = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        a[i * n + j] += b[i * n + k] * b[j * n + k];
                    }
                }
                a[i * n + i] += n as f64;
            }
            let rhs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f = |v: &[f64]| {
                let mut t = Tape::new();
                let am = t.leaf(Tensor::matrix(n, n, v.to_vec()).unwrap());
                let l = t.cholesky(am).unwrap();
                let r = t.constant(Tensor::vector(rhs.clone()));
                let x = t.solve_lower(l, r).unwrap();
                let sq = t.mul(x, x).unwrap();
                let s = t.sum(sq);
                t.value(s).scalar_value()
            };
            let mut t = Tape::new();
            let am = t.leaf(Tensor::matrix(n, n, a.clone()).unwrap());
            let l = t.cholesky(am).unwrap();
            let r = t.constant(Tensor::vector(rhs.clone()));
            let x = t.solve_lower(l, r).unwrap();
            let sq = t.mul(x, x).unwrap();
            let s = t.sum(sq);
            let g = t.backward(s).unwrap();
            let analytic = g.get_or_zeros(&t, am);
            let fd = central_difference_gradient(&f, &a, 1e-5);
            for i in 0..n * n {
                let rel = (analytic.values[i] - fd[i]).abs() / fd[i].abs().max(1e-6);
                assert!(rel < 1e-4, "entry {}: {} vs {}", i, analytic.values[i], fd[i]);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0])];
        let grads = vec![Tensor::vector(vec![0.0, 0.0])];
        let mut state = AdamState::new(&params);
        state.m[0].values = vec![0.5, 0.5];
        state.v[0].values = vec![0.25, 0.25];
        adam_step(&mut params, &grads, &mut state, 1e-3, 0.9, 0.999, 0.0).unwrap();
        // moments decay, params move only by the decayed momentum direction
        assert!((state.m[0].values[0] - 0.45).abs() < 1e-15);
        assert!((state.v[0].values[0] - 0.25 * 0.999).abs() < 1e-15);

        // fresh state: zero gradient means zero update
        let mut params2 = vec![Tensor::vector(vec![1.0, -2.0])];
        let mut state2 = AdamState::new(&params2);
        adam_step(&mut params2, &grads, &mut state2, 1e-3, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(params2[0].values, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        // bias correction makes the first update lr * g / (|g| + eps) ~ lr * sign(g)
        let mut params = vec![Tensor::vector(vec![0.0, 0.0])];
        let grads = vec![Tensor::vector(vec![3.0, -0.007])];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 1e-2, 0.9, 0.999, 1e-8).unwrap();
        assert!((params[0].values[0] - 1e-2).abs() < 1e-6);
        assert!((params[0].values[1] + 1e-2).abs() < 1e-6);
    }

    #[test]
    fn adam_matches_direct_formula_over_steps() {
        // independent evaluation of the update recursion
        let (b1, b2, lr, eps) = (0.9, 0.999, 5e-3, 1e-8);
        let gs = [0.7, -1.3, 0.2];
        let mut params = vec![Tensor::scalar(1.0)];
        let mut state = AdamState::new(&params);
        let (mut m, mut v, mut p) = (0.0f64, 0.0f64, 1.0f64);
        for (t, &g) in gs.iter().enumerate() {
            adam_step(
                &mut params,
                &[Tensor::scalar(g)],
                &mut state,
                lr,
                b1,
                b2,
                eps,
            )
            .unwrap();
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t as i32 + 1));
            let vhat = v / (1.0 - b2.powi(t as i32 + 1));
            p += lr * mhat / (vhat.sqrt() + eps);
            assert!((params[0].values[0] - p).abs() < 1e-15, "step {}", t);
        }
    }

    #[test]
    fn adam_rejects_nonfinite_gradients() {
        let mut params = vec![Tensor::scalar(0.0)];
        let grads = vec![Tensor::scalar(f64::NAN)];
        let mut state = AdamState::new(&params);
        assert!(matches!(
            adam_step(&mut params, &grads, &mut state, 1e-3, 0.9, 0.999, 1e-8),
            Err(Error::Diverged { .. })
        ));
    }
}
