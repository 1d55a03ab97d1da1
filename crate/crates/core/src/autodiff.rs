//! Static computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is built once from a small closed set of primitives and is
//! then evaluated any number of times against different [`Bindings`]. Nodes
//! are appended in topological order, so the backward pass is a single
//! reverse sweep that visits each reachable node once.
//!
//! Broadcasting is limited to scalar-with-tensor ([`Graph::scale`],
//! [`Graph::add_scalar`]) plus the row-broadcast bias of [`Graph::affine`].

use alloc::borrow::Cow;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    /// Non-trainable data leaf.
    Input(String),
    /// Trainable leaf; receives a gradient from [`Evaluation::backward`].
    Param(String),
    Constant(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    /// `x · w + b` with `x: [m, k]`, `w: [k, n]`, `b: [n]` broadcast over rows.
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Tanh(NodeId),
    Gelu(NodeId),
    Square(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    /// Column-wise concatenation of rank-2 nodes with equal row counts.
    ConcatCols(Vec<NodeId>),
    /// Identity forward, zero gradient backward.
    StopGrad(NodeId),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Affine { .. } => "affine",
            Op::Tanh(_) => "tanh",
            Op::Gelu(_) => "gelu",
            Op::Square(_) => "square",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::ConcatCols(_) => "concat",
            Op::StopGrad(_) => "stop_grad",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    // True when some trainable leaf is upstream of this node.
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        expected: a.to_vec(),
        found: b.to_vec(),
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let rg = |id: &NodeId| self.nodes[id.0].requires_grad;
        let requires_grad = match &op {
            Op::Param(_) => true,
            Op::Input(_) | Op::Constant(_) | Op::StopGrad(_) => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => rg(a) || rg(b),
            Op::Affine { x, w, b } => rg(x) || rg(w) || rg(b),
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Tanh(a)
            | Op::Gelu(a)
            | Op::Square(a)
            | Op::Mean(a)
            | Op::Sum(a) => rg(a),
            Op::ConcatCols(parts) => parts.iter().any(rg),
        };
        self.nodes.push(Node {
            op,
            shape,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, name: &str, shape: &[usize], trainable: bool) -> Result<NodeId> {
        if self.leaves.contains_key(name) {
            return Err(Error::DuplicateLeaf(name.to_string()));
        }
        let op = if trainable {
            Op::Param(name.to_string())
        } else {
            Op::Input(name.to_string())
        };
        let id = self.push(op, shape.to_vec());
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.leaf(name, shape, false)
    }

    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.leaf(name, shape, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), shape)
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    /// Names of trainable leaves in sorted order.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.leaves
            .iter()
            .filter(|(_, id)| matches!(self.nodes[id.0].op, Op::Param(_)))
            .map(|(n, _)| n.as_str())
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    pub fn output_id(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    fn elementwise(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op.name(), sa, sb));
        }
        let shape = sa.to_vec();
        Ok(self.push(op, shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(Op::Add(a, b), a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(Op::Sub(a, b), a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(Op::Mul(a, b), a, b)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a, c), shape)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::AddScalar(a, c), shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul(a, b), shape))
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(mismatch("affine", sx, sw));
        }
        if sb != [sw[1]] {
            return Err(mismatch("affine", &[sw[1]], sb));
        }
        let shape = vec![sx[0], sw[1]];
        Ok(self.push(Op::Affine { x, w, b }, shape))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Tanh(a), shape)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Gelu(a), shape)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Square(a), shape)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a), Vec::new())
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), Vec::new())
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or_else(|| invalid("concat of zero nodes"))?;
        let rows = match self.shape(*first) {
            [r, _] => *r,
            s => return Err(mismatch("concat", &[0, 0], s)),
        };
        let mut cols = 0;
        for &p in parts {
            match self.shape(p) {
                [r, c] if *r == rows => cols += c,
                s => return Err(mismatch("concat", &[rows, 0], s)),
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), vec![rows, cols]))
    }

    pub fn stop_grad(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::StopGrad(a), shape)
    }

    /// Evaluate every node against `bindings`.
    pub fn forward<'g, 'a>(&'g self, bindings: &Bindings<'a>) -> Result<Evaluation<'g, 'a>> {
        let mut values: Vec<Cow<'a, Tensor>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let v: Cow<'a, Tensor> = match &node.op {
                Op::Input(name) | Op::Param(name) => {
                    let t = bindings.get(name).ok_or_else(|| Error::UnboundInput(name.clone()))?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(mismatch("bind", &node.shape, t.shape()));
                    }
                    Cow::Borrowed(t)
                }
                op => Cow::Owned(eval_op(op, &node.shape, &values)?),
            };
            if !v.is_finite() {
                return Err(Error::NonFiniteNode {
                    node: idx,
                    op: node.op.name(),
                });
            }
            values.push(v);
        }
        Ok(Evaluation { graph: self, values })
    }
}

fn eval_op(op: &Op, shape: &[usize], values: &[Cow<'_, Tensor>]) -> Result<Tensor> {
    let v = |id: &NodeId| -> &Tensor { &values[id.0] };
    let out = match op {
        Op::Input(_) | Op::Param(_) => unreachable!("leaves are bound, not evaluated"),
        Op::Constant(t) => t.clone(),
        Op::Add(a, b) => v(a).add(v(b))?,
        Op::Sub(a, b) => v(a).sub(v(b))?,
        Op::Mul(a, b) => v(a).mul(v(b))?,
        Op::Scale(a, c) => v(a).scale(*c),
        Op::AddScalar(a, c) => v(a).map(|x| x + c),
        Op::MatMul(a, b) => v(a).matmul(v(b))?,
        Op::Affine { x, w, b } => {
            let (xv, wv, bv) = (v(x), v(w), v(b));
            let (m, k, n) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
            let mut out = Vec::with_capacity(m * n);
            for _ in 0..m {
                out.extend_from_slice(bv.data());
            }
            gemm(m, k, n, xv.data(), false, wv.data(), false, &mut out, 1.0);
            Tensor::from_raw(vec![m, n], out)
        }
        Op::Tanh(a) => v(a).map(libm::tanh),
        Op::Gelu(a) => v(a).map(gelu),
        Op::Square(a) => v(a).map(|x| x * x),
        Op::Mean(a) => Tensor::scalar(v(a).mean()),
        Op::Sum(a) => Tensor::scalar(v(a).sum()),
        Op::ConcatCols(parts) => {
            let (rows, cols) = (shape[0], shape[1]);
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in parts {
                    out.extend_from_slice(v(p).row(r));
                }
            }
            Tensor::from_raw(vec![rows, cols], out)
        }
        Op::StopGrad(a) => v(a).clone(),
    };
    Ok(out)
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
}

/// Name-to-tensor bindings for graph leaves.
#[derive(Clone, Debug, Default)]
pub struct Bindings<'a> {
    map: BTreeMap<String, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: impl Into<String>, value: &'a Tensor) -> &mut Self {
        self.map.insert(name.into(), value);
        self
    }

    pub fn with(mut self, name: impl Into<String>, value: &'a Tensor) -> Self {
        self.map.insert(name.into(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.map.get(name).copied()
    }
}

/// Node values from one forward pass.
pub struct Evaluation<'g, 'a> {
    graph: &'g Graph,
    values: Vec<Cow<'a, Tensor>>,
}

/// Gradients of a scalar node with respect to every trainable leaf.
pub type Gradients = BTreeMap<String, Tensor>;

impl<'g, 'a> Evaluation<'g, 'a> {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn output(&self, name: &str) -> Option<&Tensor> {
        self.graph.output_id(name).map(|id| self.value(id))
    }

    /// Reverse sweep from the scalar `seed` node.
    pub fn backward(&self, seed: NodeId) -> Result<Gradients> {
        let g = self.graph;
        let seed_shape = g.shape(seed);
        if seed_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarSeed {
                node: seed.0,
                shape: seed_shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; seed.0 + 1];
        grads[seed.0] = Some(Tensor::full(seed_shape, 1.0));
        let mut out = Gradients::new();

        for idx in (0..=seed.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &g.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Param(name) => {
                    out.insert(name.clone(), upstream);
                }
                Op::Input(_) | Op::Constant(_) | Op::StopGrad(_) => {}
                op => self.propagate(idx, op, &upstream, &mut grads)?,
            }
        }
        for name in g.param_names() {
            if !out.contains_key(name) {
                let id = g.leaves[name];
                out.insert(name.to_string(), Tensor::zeros(g.shape(id)));
            }
        }
        Ok(out)
    }

    fn propagate(&self, idx: usize, op: &Op, up: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let v = |id: &NodeId| -> &Tensor { &self.values[id.0] };
        match op {
            Op::Add(a, b) => {
                accumulate(grads, *a, up.clone())?;
                accumulate(grads, *b, up.clone())?;
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, up.clone())?;
                accumulate(grads, *b, up.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, up.mul(v(b))?)?;
                accumulate(grads, *b, up.mul(v(a))?)?;
            }
            Op::Scale(a, c) => accumulate(grads, *a, up.scale(*c))?,
            Op::AddScalar(a, _) => accumulate(grads, *a, up.clone())?,
            Op::MatMul(a, b) => {
                let (av, bv) = (v(a), v(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.graph.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, up.data(), false, bv.data(), true, &mut ga, 0.0);
                    accumulate(grads, *a, Tensor::from_raw(vec![m, k], ga))?;
                }
                if self.graph.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, up.data(), false, &mut gb, 0.0);
                    accumulate(grads, *b, Tensor::from_raw(vec![k, n], gb))?;
                }
            }
            Op::Affine { x, w, b } => {
                let (xv, wv) = (v(x), v(w));
                let (m, k, n) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
                if self.graph.requires_grad(*x) {
                    let mut gx = vec![0.0; m * k];
                    gemm(m, n, k, up.data(), false, wv.data(), true, &mut gx, 0.0);
                    accumulate(grads, *x, Tensor::from_raw(vec![m, k], gx))?;
                }
                if self.graph.requires_grad(*w) {
                    let mut gw = vec![0.0; k * n];
                    gemm(k, m, n, xv.data(), true, up.data(), false, &mut gw, 0.0);
                    accumulate(grads, *w, Tensor::from_raw(vec![k, n], gw))?;
                }
                if self.graph.requires_grad(*b) {
                    let mut gb = vec![0.0; n];
                    for r in 0..m {
                        for (acc, &u) in gb.iter_mut().zip(up.row(r)) {
                            *acc += u;
                        }
                    }
                    accumulate(grads, *b, Tensor::from_raw(vec![n], gb))?;
                }
            }
            Op::Tanh(a) => {
                // d tanh = 1 - tanh^2, using the stored output.
                let y = &self.values[idx];
                accumulate(grads, *a, up.zip_map(y, "tanh'", |u, y| u * (1.0 - y * y))?)?;
            }
            Op::Gelu(a) => accumulate(grads, *a, up.zip_map(v(a), "gelu'", |u, x| u * gelu_grad(x))?)?,
            Op::Square(a) => accumulate(grads, *a, up.zip_map(v(a), "square'", |u, x| 2.0 * u * x)?)?,
            Op::Mean(a) => {
                let n = v(a).len() as f64;
                accumulate(grads, *a, Tensor::full(v(a).shape(), up.data()[0] / n))?;
            }
            Op::Sum(a) => accumulate(grads, *a, Tensor::full(v(a).shape(), up.data()[0]))?,
            Op::ConcatCols(parts) => {
                let rows = up.shape()[0];
                let mut offset = 0;
                for p in parts {
                    let cols = v(p).shape()[1];
                    let mut gp = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        gp.extend_from_slice(&up.row(r)[offset..offset + cols]);
                    }
                    offset += cols;
                    if self.graph.requires_grad(*p) {
                        accumulate(grads, *p, Tensor::from_raw(vec![rows, cols], gp))?;
                    }
                }
            }
            Op::Input(_) | Op::Param(_) | Op::Constant(_) | Op::StopGrad(_) => {}
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Evaluate `graph` and return the values of its named outputs.
pub fn forward_eval(graph: &Graph, bindings: &Bindings<'_>) -> Result<BTreeMap<String, Tensor>> {
    let eval = graph.forward(bindings)?;
    Ok(graph
        .outputs
        .iter()
        .map(|(name, id)| (name.clone(), eval.value(*id).clone()))
        .collect())
}

/// Gradients of the named scalar output with respect to all trainable leaves.
pub fn backward_grads(graph: &Graph, bindings: &Bindings<'_>, seed_output: &str) -> Result<Gradients> {
    let seed = graph
        .output_id(seed_output)
        .ok_or_else(|| invalid(format!("unknown output `{seed_output}`")))?;
    graph.forward(bindings)?.backward(seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Maximum relative error per trainable leaf.
    pub per_leaf: BTreeMap<String, f64>,
    pub max_rel_err: f64,
}

/// Compare reverse-mode gradients of scalar `output` against central finite
/// differences on every coordinate of every trainable leaf. The relative
/// error is `|ad - fd| / max(1, |ad|, |fd|)`.
pub fn grad_check(graph: &Graph, bindings: &Bindings<'_>, output: NodeId, eps: f64) -> Result<GradCheckReport> {
    if !(1e-8..=1e-3).contains(&eps) {
        return Err(invalid(format!("grad_check eps {eps} outside [1e-8, 1e-3]")));
    }
    let analytic = graph.forward(bindings)?.backward(output)?;
    let mut per_leaf = BTreeMap::new();
    let mut max_rel_err: f64 = 0.0;
    for (name, ad) in &analytic {
        let base = bindings.get(name).ok_or_else(|| Error::UnboundInput(name.clone()))?;
        let mut worst: f64 = 0.0;
        for i in 0..base.len() {
            let eval_at = |delta: f64| -> Result<f64> {
                let mut moved = base.clone();
                moved.data_mut()[i] += delta;
                let b = bindings.clone().with(name.clone(), &moved);
                graph.forward(&b)?.value(output).item()
            };
            let fd = (eval_at(eps)? - eval_at(-eps)?) / (2.0 * eps);
            let a = ad.data()[i];
            let rel = (a - fd).abs() / 1f64.max(a.abs()).max(fd.abs());
            worst = worst.max(rel);
        }
        max_rel_err = max_rel_err.max(worst);
        per_leaf.insert(name.clone(), worst);
    }
    Ok(GradCheckReport { per_leaf, max_rel_err })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_forward_and_backward() {
        let mut g = Graph::new();
        let x = g.param("x", &[]).unwrap();
        let y = g.mul(x, x).unwrap();
        g.mark_output("y", y);
        let xv = Tensor::scalar(3.0);
        let b = Bindings::new().with("x", &xv);
        assert_eq!(forward_eval(&g, &b).unwrap()["y"].item().unwrap(), 9.0);
        assert_eq!(backward_grads(&g, &b, "y").unwrap()["x"].item().unwrap(), 6.0);
        let report = grad_check(&g, &b, y, 1e-6).unwrap();
        assert!(report.max_rel_err <= 1e-7, "{report:?}");
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.input("i", &[2, 2]).unwrap();
        let v = g.input("v", &[2, 1]).unwrap();
        let out = g.matmul(i, v).unwrap();
        g.mark_output("out", out);
        let (iv, vv) = (t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), t(&[2, 1], &[1.0, 2.0]));
        let b = Bindings::new().with("i", &iv).with("v", &vv);
        assert_eq!(forward_eval(&g, &b).unwrap()["out"].data(), &[1.0, 2.0]);
    }

    #[test]
    fn mse_of_unit_offsets_and_zero_gradient_at_minimum() {
        let mut g = Graph::new();
        let a = g.param("a", &[2]).unwrap();
        let bn = g.input("b", &[2]).unwrap();
        let d = g.sub(a, bn).unwrap();
        let sq = g.square(d);
        let m = g.mean(sq);
        g.mark_output("mse", m);
        let (av, bv) = (t(&[2], &[0.0, 0.0]), t(&[2], &[1.0, 1.0]));
        let b = Bindings::new().with("a", &av).with("b", &bv);
        assert_eq!(forward_eval(&g, &b).unwrap()["mse"].item().unwrap(), 1.0);
        let b2 = Bindings::new().with("a", &bv).with("b", &bv);
        assert_eq!(backward_grads(&g, &b2, "mse").unwrap()["a"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_weight_gradient_is_outer_product() {
        // f = u^T (W v)  =>  df/dW = u v^T
        let mut rng = seeded(7);
        let mut g = Graph::new();
        let w = g.param("w", &[3, 2]).unwrap();
        let v = g.input("v", &[2, 1]).unwrap();
        let u = g.input("u", &[3, 1]).unwrap();
        let wv = g.matmul(w, v).unwrap();
        let prod = g.mul(wv, u).unwrap();
        let f = g.sum(prod);
        let mut r = |n| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (wt, vt, ut) = (t(&[3, 2], &r(6)), t(&[2, 1], &r(2)), t(&[3, 1], &r(3)));
        let b = Bindings::new().with("w", &wt).with("v", &vt).with("u", &ut);
        let grads = g.forward(&b).unwrap().backward(f).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let expected = ut.data()[i] * vt.data()[j];
                assert!((grads["w"].data()[i * 2 + j] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn constant_graph_has_zero_gradients() {
        let mut g = Graph::new();
        let p = g.param("p", &[2]).unwrap();
        let c = g.constant(Tensor::scalar(4.0));
        let _unused = g.scale(p, 2.0);
        let out = g.add_scalar(c, 1.0);
        let pv = t(&[2], &[0.3, -0.2]);
        let b = Bindings::new().with("p", &pv);
        let report = grad_check(&g, &b, out, 1e-6).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
        let grads = g.forward(&b).unwrap().backward(out).unwrap();
        assert_eq!(grads["p"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn tanh_mlp_passes_grad_check() {
        let mut rng = seeded(11);
        let mut r = |n| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let mut g = Graph::new();
        let x = g.input("x", &[4, 8]).unwrap();
        let w1 = g.param("w1", &[8, 8]).unwrap();
        let b1 = g.param("b1", &[8]).unwrap();
        let w2 = g.param("w2", &[8, 8]).unwrap();
        let b2 = g.param("b2", &[8]).unwrap();
        let h = g.affine(x, w1, b1).unwrap();
        let h = g.tanh(h);
        let o = g.affine(h, w2, b2).unwrap();
        let o = g.gelu(o);
        let sq = g.square(o);
        let loss = g.mean(sq);
        let (xv, w1v, b1v, w2v, b2v) = (
            t(&[4, 8], &r(32)),
            t(&[8, 8], &r(64)),
            t(&[8], &r(8)),
            t(&[8, 8], &r(64)),
            t(&[8], &r(8)),
        );
        let b = Bindings::new()
            .with("x", &xv)
            .with("w1", &w1v)
            .with("b1", &b1v)
            .with("w2", &w2v)
            .with("b2", &b2v);
        let report = grad_check(&g, &b, loss, 1e-6).unwrap();
        assert!(report.max_rel_err <= 1e-5, "{report:?}");
    }

    #[test]
    fn stop_grad_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", &[]).unwrap();
        let s = g.stop_grad(x);
        let y = g.mul(x, s).unwrap();
        let xv = Tensor::scalar(3.0);
        let b = Bindings::new().with("x", &xv);
        let grads = g.forward(&b).unwrap().backward(y).unwrap();
        assert_eq!(grads["x"].item().unwrap(), 3.0);
    }

    #[test]
    fn errors_are_reported() {
        let mut g = Graph::new();
        let a = g.input("a", &[2]).unwrap();
        let b = g.input("b", &[3]).unwrap();
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(g.input("a", &[2]), Err(Error::DuplicateLeaf(_))));
        // Unbound leaf.
        assert!(matches!(g.forward(&Bindings::new()), Err(Error::UnboundInput(_))));
        // Non-scalar seed.
        let (av, bv) = (t(&[2], &[1.0, 2.0]), t(&[3], &[1.0, 2.0, 3.0]));
        let bind = Bindings::new().with("a", &av).with("b", &bv);
        let e = g.forward(&bind).unwrap();
        assert!(matches!(e.backward(a), Err(Error::NonScalarSeed { .. })));
        // Wrong bound shape.
        let bind = Bindings::new().with("a", &bv).with("b", &bv);
        assert!(matches!(g.forward(&bind), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn overflow_is_reported_with_node_id() {
        let mut g = Graph::new();
        let a = g.input("a", &[1]).unwrap();
        let big = g.scale(a, 1e300);
        let sq = g.square(big);
        let av = t(&[1], &[10.0]);
        match g.forward(&Bindings::new().with("a", &av)) {
            Err(Error::NonFiniteNode { node, op }) => {
                assert_eq!(node, sq.index());
                assert_eq!(op, "square");
            }
            other => panic!("expected non-finite error, got {:?}", other.err()),
        }
    }

    #[test]
    fn grad_check_rejects_eps_out_of_range() {
        let mut g = Graph::new();
        let x = g.param("x", &[]).unwrap();
        let xv = Tensor::scalar(1.0);
        let b = Bindings::new().with("x", &xv);
        assert!(grad_check(&g, &b, x, 1e-2).is_err());
        assert!(grad_check(&g, &b, x, 1e-9).is_err());
    }
}
