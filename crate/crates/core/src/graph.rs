//! Define-by-run reverse-mode tape over [`Tensor`]s.
//!
//! Builder methods evaluate eagerly and append a node; nodes are therefore
//! stored in topological order and [`Graph::backward`] walks them in exact
//! reverse. [`Graph::forward_eval`] rebinds named leaves and recomputes
//! every derived node in declaration order.
//!
//! Nodes backed by a [`CustomOp`] supply their own backward rule; the
//! straight-through quantizer is one of them.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::any::Any;

use crate::math;
use crate::tensor::{self, same_shape, Tensor};
use crate::{Error, Result};

/// Variance floor added before the square root in layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

/// A node whose backward rule overrides the default chain rule.
pub trait CustomOp: Any {
    fn name(&self) -> &'static str;

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Gradients with respect to each input, `None` where the input does
    /// not need one.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;

    fn as_any(&self) -> &dyn Any;
}

enum Op {
    Leaf { name: Option<String> },
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Transpose(NodeId),
    Tanh(NodeId),
    Softmax(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Gelu(NodeId),
    Clip { x: NodeId, lo: f64, hi: f64 },
    Sum(NodeId),
    SquaredNorm(NodeId),
    Broadcast { x: NodeId, shape: Vec<usize> },
    Scale { x: NodeId, factor: f64 },
    SliceCols { x: NodeId, start: usize, end: usize },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Custom { inputs: Vec<NodeId>, op: Box<dyn CustomOp> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Matmul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "subtract",
            Op::Mul(..) => "multiply",
            Op::Transpose(..) => "transpose",
            Op::Tanh(..) => "tanh",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Clip { .. } => "clip",
            Op::Sum(..) => "reduce_sum",
            Op::SquaredNorm(..) => "squared_norm",
            Op::Broadcast { .. } => "broadcast",
            Op::Scale { .. } => "scale",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } => Vec::new(),
            Op::Matmul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(a) | Op::Tanh(a) | Op::Softmax(a) | Op::Gelu(a) | Op::Sum(a) | Op::SquaredNorm(a) => vec![*a],
            Op::LayerNorm { x, gain, bias } => vec![*x, *gain, *bias],
            Op::Clip { x, .. } | Op::Broadcast { x, .. } | Op::Scale { x, .. } | Op::SliceCols { x, .. } => {
                vec![*x]
            }
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    outputs: Vec<(String, NodeId)>,
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

    /// Unnamed constant.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(None, value, false)
    }

    /// Named input, rebindable through [`Graph::forward_eval`].
    pub fn input(&mut self, name: &str, value: Tensor) -> NodeId {
        self.push_leaf(Some(name.to_string()), value, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        self.push_leaf(Some(name.to_string()), value, true)
    }

    fn push_leaf(&mut self, name: Option<String>, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf { name }, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    /// Downcasts a custom node to its concrete type.
    pub fn custom<T: CustomOp>(&self, id: NodeId) -> Option<&T> {
        match &self.nodes[id.0].op {
            Op::Custom { op, .. } => op.as_any().downcast_ref::<T>(),
            _ => None,
        }
    }

    /// Registers `id` as a named output of [`Graph::forward_eval`].
    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.push((name.to_string(), id));
    }

    fn push(&mut self, mut op: Op) -> Result<NodeId> {
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let id = self.nodes.len();
        let value = compute(&mut op, &self.nodes, id)?;
        self.nodes.push(Node { op, value, requires_grad });
        Ok(NodeId(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Matmul(a, b))
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose(a))
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh(a))
    }
    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax(a))
    }
    /// Layer norm over the last axis with per-feature gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::LayerNorm { x, gain, bias })
    }
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Gelu(a))
    }
    pub fn clip(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.push(Op::Clip { x, lo, hi })
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }
    pub fn squared_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SquaredNorm(a))
    }
    /// Expands size-1 (or missing leading) axes to `shape`.
    pub fn broadcast(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Broadcast { x, shape: shape.to_vec() })
    }
    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Op::Scale { x, factor })
    }
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.push(Op::SliceCols { x, start, end })
    }
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.push(Op::ConcatCols(xs.to_vec()))
    }
    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.push(Op::ConcatRows(xs.to_vec()))
    }
    pub fn custom_op(&mut self, inputs: &[NodeId], op: Box<dyn CustomOp>) -> Result<NodeId> {
        self.push(Op::Custom { inputs: inputs.to_vec(), op })
    }

    /// Rebinds named leaves and recomputes all derived nodes in order.
    /// Returns the outputs registered with [`Graph::mark_output`].
    pub fn forward_eval(&mut self, bindings: &[(&str, Tensor)]) -> Result<Vec<(String, Tensor)>> {
        for (name, value) in bindings {
            let node = self
                .nodes
                .iter_mut()
                .find(|n| matches!(&n.op, Op::Leaf { name: Some(n2) } if n2 == name))
                .ok_or_else(|| Error::InvalidConfig(format!("no input named {name:?}")))?;
            same_shape("forward_eval", &node.value, value)?;
            node.value = value.clone();
        }
        for i in 0..self.nodes.len() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            node.value = compute(&mut node.op, before, i)?;
        }
        Ok(self.outputs.iter().map(|(n, id)| (n.clone(), self.nodes[id.0].value.clone())).collect())
    }

    /// Gradients of the scalar `loss` with respect to each leaf in `wrt`.
    pub fn backward(&self, loss: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        for id in wrt {
            if !matches!(self.nodes[id.0].op, Op::Leaf { .. }) {
                return Err(Error::NotLeaf(id.0));
            }
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.nodes[loss.0].value.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.nodes[loss.0].value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let inputs = node.op.inputs();
            let needs: Vec<bool> = inputs.iter().map(|j| self.nodes[j.0].requires_grad).collect();
            let contributions = self.local_backward(node, &inputs, &g, &needs)?;
            for ((j, c), need) in inputs.iter().zip(contributions).zip(&needs) {
                if !need {
                    continue;
                }
                if let Some(c) = c {
                    match &mut grads[j.0] {
                        Some(acc) => acc.accumulate(&c),
                        slot => *slot = Some(c),
                    }
                }
            }
        }
        Ok(wrt
            .iter()
            .map(|id| grads[id.0].take().unwrap_or_else(|| Tensor::zeros(self.nodes[id.0].value.shape())))
            .collect())
    }

    fn local_backward(
        &self,
        node: &Node,
        inputs: &[NodeId],
        g: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let y = &node.value;
        Ok(match &node.op {
            Op::Leaf { .. } => Vec::new(),
            Op::Matmul(a, b) => {
                let da = if needs[0] { Some(tensor::matmul(g, &tensor::transpose(val(*b))?)?) } else { None };
                let db = if needs[1] { Some(tensor::matmul(&tensor::transpose(val(*a))?, g)?) } else { None };
                vec![da, db]
            }
            Op::Add(..) => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub(..) => vec![Some(g.clone()), Some(g.map(|v| -v))],
            Op::Mul(a, b) => {
                let da = if needs[0] { Some(g.zip_map(val(*b), "multiply", |g, b| g * b)?) } else { None };
                let db = if needs[1] { Some(g.zip_map(val(*a), "multiply", |g, a| g * a)?) } else { None };
                vec![da, db]
            }
            Op::Transpose(_) => vec![Some(tensor::transpose(g)?)],
            Op::Tanh(_) => vec![Some(g.zip_map(y, "tanh", |g, y| g * (1.0 - y * y))?)],
            Op::Softmax(_) => {
                let cols = *y.shape().last().unwrap_or(&1);
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(cols).zip(g.data().chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    dx.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                vec![Some(Tensor::new(y.shape().to_vec(), dx)?)]
            }
            Op::LayerNorm { x, gain, .. } => layer_norm_backward(val(*x), val(*gain), g, needs)?,
            Op::Gelu(a) => {
                let d = val(*a).map(gelu_grad);
                vec![Some(g.zip_map(&d, "gelu", |g, d| g * d)?)]
            }
            Op::Clip { x, lo, hi } => {
                let mask = val(*x).map(|v| if v >= *lo && v <= *hi { 1.0 } else { 0.0 });
                vec![Some(g.zip_map(&mask, "clip", |g, m| g * m)?)]
            }
            Op::Sum(a) => vec![Some(Tensor::filled(val(*a).shape(), g.data()[0]))],
            Op::SquaredNorm(a) => {
                let s = 2.0 * g.data()[0];
                vec![Some(val(*a).map(|v| s * v))]
            }
            Op::Broadcast { x, .. } => vec![Some(reduce_to(g, val(*x).shape())?)],
            Op::Scale { factor, .. } => vec![Some(g.map(|v| v * factor))],
            Op::SliceCols { x, start, end } => {
                let (rows, cols) = val(*x).dims2("slice_cols")?;
                let w = end - start;
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                vec![Some(Tensor::matrix(rows, cols, dx)?)]
            }
            Op::ConcatCols(xs) => {
                let (rows, total) = g.dims2("concat_cols")?;
                let mut out = Vec::with_capacity(xs.len());
                let mut offset = 0;
                for (k, x) in xs.iter().enumerate() {
                    let (_, c) = val(*x).dims2("concat_cols")?;
                    if needs[k] {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                        }
                        out.push(Some(Tensor::matrix(rows, c, d)?));
                    } else {
                        out.push(None);
                    }
                    offset += c;
                }
                out
            }
            Op::ConcatRows(xs) => {
                let mut out = Vec::with_capacity(xs.len());
                let mut offset = 0;
                for (k, x) in xs.iter().enumerate() {
                    let n = val(*x).len();
                    if needs[k] {
                        out.push(Some(Tensor::new(val(*x).shape().to_vec(), g.data()[offset..offset + n].to_vec())?));
                    } else {
                        out.push(None);
                    }
                    offset += n;
                }
                out
            }
            Op::Custom { op, .. } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|i| val(*i)).collect();
                op.backward(&ins, y, g, needs)?
            }
        })
    }
}

fn compute(op: &mut Op, nodes: &[Node], id: usize) -> Result<Tensor> {
    let val = |i: &NodeId| &nodes[i.0].value;
    let out = match op {
        Op::Leaf { .. } => unreachable!("leaves are not recomputed"),
        Op::Matmul(a, b) => tensor::matmul(val(a), val(b))?,
        Op::Add(a, b) => val(a).zip_map(val(b), "add", |x, y| x + y)?,
        Op::Sub(a, b) => val(a).zip_map(val(b), "subtract", |x, y| x - y)?,
        Op::Mul(a, b) => val(a).zip_map(val(b), "multiply", |x, y| x * y)?,
        Op::Transpose(a) => tensor::transpose(val(a))?,
        Op::Tanh(a) => val(a).map(math::tanh),
        Op::Softmax(a) => softmax_rows(val(a))?,
        Op::LayerNorm { x, gain, bias } => layer_norm(val(x), val(gain), val(bias))?,
        Op::Gelu(a) => val(a).map(gelu),
        Op::Clip { x, lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            val(x).map(|v| v.clamp(lo, hi))
        }
        Op::Sum(a) => Tensor::scalar(val(a).sum()),
        Op::SquaredNorm(a) => Tensor::scalar(val(a).squared_norm()),
        Op::Broadcast { x, shape } => broadcast_to(val(x), shape)?,
        Op::Scale { x, factor } => {
            let f = *factor;
            val(x).map(|v| v * f)
        }
        Op::SliceCols { x, start, end } => {
            let (rows, cols) = val(x).dims2("slice_cols")?;
            if *start > *end || *end > cols {
                return Err(Error::ShapeMismatch {
                    op: "slice_cols",
                    detail: format!("columns {start}..{end} of {cols}"),
                });
            }
            let w = *end - *start;
            let mut d = Vec::with_capacity(rows * w);
            for r in 0..rows {
                d.extend_from_slice(&val(x).data()[r * cols + *start..r * cols + *end]);
            }
            Tensor::matrix(rows, w, d)?
        }
        Op::ConcatCols(xs) => {
            let mut rows = None;
            let mut total = 0;
            for x in xs.iter() {
                let (r, c) = val(x).dims2("concat_cols")?;
                if *rows.get_or_insert(r) != r {
                    return Err(Error::ShapeMismatch { op: "concat_cols", detail: format!("row counts differ: {r}") });
                }
                total += c;
            }
            let rows = rows.unwrap_or(0);
            let mut d = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for x in xs.iter() {
                    d.extend_from_slice(val(x).row(r));
                }
            }
            Tensor::matrix(rows, total, d)?
        }
        Op::ConcatRows(xs) => {
            let mut cols = None;
            let mut rows = 0;
            let mut d = Vec::new();
            for x in xs.iter() {
                let (r, c) = val(x).dims2("concat_rows")?;
                if *cols.get_or_insert(c) != c {
                    return Err(Error::ShapeMismatch {
                        op: "concat_rows",
                        detail: format!("column counts differ: {c}"),
                    });
                }
                rows += r;
                d.extend_from_slice(val(x).data());
            }
            Tensor::matrix(rows, cols.unwrap_or(0), d)?
        }
        Op::Custom { inputs, op } => {
            let ins: Vec<&Tensor> = inputs.iter().map(|i| &nodes[i.0].value).collect();
            op.forward(&ins)?
        }
    };
    if !out.all_finite() {
        return Err(Error::NonFinite { node: id, op: op.name() });
    }
    Ok(out)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + math::tanh(GELU_C * (x + GELU_K * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = math::tanh(GELU_C * (x + GELU_K * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let cols = *x.shape().last().ok_or(Error::ShapeMismatch { op: "softmax", detail: "scalar input".into() })?;
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = math::exp(v - max);
            total += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= total;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn check_affine(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<usize> {
    let d = *x.shape().last().unwrap_or(&0);
    if gain.len() != d || bias.len() != d {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            detail: format!("features {d}, gain {:?}, bias {:?}", gain.shape(), bias.shape()),
        });
    }
    Ok(d)
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = check_affine(x, gain, bias)?;
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(d) {
        let (mean, inv) = row_stats(row);
        for (k, &v) in row.iter().enumerate() {
            out.push((v - mean) * inv * gain.data()[k] + bias.data()[k]);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / math::sqrt(var + LAYER_NORM_EPS))
}

fn layer_norm_backward(x: &Tensor, gain: &Tensor, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
    let d = gain.len();
    let mut dx = Vec::with_capacity(x.len());
    let mut dgain = vec![0.0; d];
    let mut dbias = vec![0.0; d];
    for (row, grow) in x.data().chunks(d).zip(g.data().chunks(d)) {
        let (mean, inv) = row_stats(row);
        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
        let dxhat: Vec<f64> = grow.iter().zip(gain.data()).map(|(g, w)| g * w).collect();
        let n = d as f64;
        let m1 = dxhat.iter().sum::<f64>() / n;
        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
        for k in 0..d {
            dx.push(inv * (dxhat[k] - m1 - xhat[k] * m2));
            dgain[k] += grow[k] * xhat[k];
            dbias[k] += grow[k];
        }
    }
    Ok(vec![
        if needs[0] { Some(Tensor::new(x.shape().to_vec(), dx)?) } else { None },
        if needs[1] { Some(Tensor::new(gain.shape().to_vec(), dgain)?) } else { None },
        if needs[2] { Some(Tensor::new(gain.shape().to_vec(), dbias)?) } else { None },
    ])
}

/// Source offset for each element of `target` when broadcasting `shape`.
fn broadcast_index(shape: &[usize], target: &[usize]) -> Result<Vec<usize>> {
    if shape.len() > target.len() {
        return Err(Error::ShapeMismatch { op: "broadcast", detail: format!("{shape:?} -> {target:?}") });
    }
    let pad = target.len() - shape.len();
    let src: Vec<usize> = core::iter::repeat_n(1, pad).chain(shape.iter().copied()).collect();
    for (s, t) in src.iter().zip(target) {
        if *s != *t && *s != 1 {
            return Err(Error::ShapeMismatch { op: "broadcast", detail: format!("{shape:?} -> {target:?}") });
        }
    }
    let mut strides = vec![0usize; src.len()];
    let mut acc = 1;
    for k in (0..src.len()).rev() {
        strides[k] = if src[k] == 1 { 0 } else { acc };
        acc *= src[k];
    }
    let n: usize = target.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; target.len()];
    for _ in 0..n {
        idx.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum());
        for k in (0..target.len()).rev() {
            counter[k] += 1;
            if counter[k] < target[k] {
                break;
            }
            counter[k] = 0;
        }
    }
    Ok(idx)
}

fn broadcast_to(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let idx = broadcast_index(x.shape(), shape)?;
    Tensor::new(shape.to_vec(), idx.iter().map(|&i| x.data()[i]).collect())
}

fn reduce_to(g: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let idx = broadcast_index(shape, g.shape())?;
    let mut out = Tensor::zeros(shape);
    for (&i, &v) in idx.iter().zip(g.data()) {
        out.data_mut()[i] += v;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![3.0]));
        let y = g.mul(x, x).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l, &[x]).unwrap();
        assert_eq!(grads[0].data(), &[6.0]);
    }

    #[test]
    fn tanh_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![0.0]));
        let y = g.tanh(x).unwrap();
        let l = g.sum(y).unwrap();
        assert_eq!(g.backward(l, &[x]).unwrap()[0].data(), &[1.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let s = softmax_rows(&Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let x = Tensor::matrix(1, 4, vec![2.5; 4]).unwrap();
        let y = layer_norm(&x, &Tensor::vector(vec![1.0; 4]), &Tensor::vector(vec![0.0; 4])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_leaf_gradient_request_is_rejected() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![1.0, 2.0]));
        let y = g.tanh(x).unwrap();
        let l = g.sum(y).unwrap();
        assert_eq!(g.backward(l, &[y]), Err(Error::NotLeaf(y.0)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![1.0, 2.0]));
        assert!(g.backward(x, &[x]).is_err());
    }

    #[test]
    fn non_finite_output_names_the_node() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::vector(vec![1e200]));
        let err = g.mul(x, x).unwrap_err();
        assert_eq!(err, Error::NonFinite { node: 1, op: "multiply" });
    }

    #[test]
    fn forward_eval_rebinds_inputs() {
        let mut g = Graph::new();
        let a = g.input("a", Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let b = g.input("b", Tensor::from_rows(&[&[1.0], &[1.0]]).unwrap());
        let c = g.matmul(a, b).unwrap();
        g.mark_output("c", c);
        let out = g.forward_eval(&[("b", Tensor::from_rows(&[&[2.0], &[0.0]]).unwrap())]).unwrap();
        assert_eq!(out[0].0, "c");
        assert_eq!(out[0].1.data(), &[2.0, 6.0]);
        assert!(g.forward_eval(&[("missing", Tensor::scalar(1.0))]).is_err());
    }

    #[test]
    fn broadcast_and_reduce() {
        let mut g = Graph::new();
        let col = g.param("c", Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let b = g.broadcast(col, &[2, 3]).unwrap();
        assert_eq!(g.value(b).data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let l = g.sum(b).unwrap();
        assert_eq!(g.backward(l, &[col]).unwrap()[0].data(), &[3.0, 3.0]);
        assert!(g.broadcast(col, &[3, 3]).is_err());
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let build = |which: u8| {
            let mut g = Graph::new();
            let x = g.param("x", Tensor::vector(vec![0.3, -0.7, 1.1]));
            let t = g.tanh(x).unwrap();
            let s = g.gelu(x).unwrap();
            let a = g.squared_norm(t).unwrap();
            let b = g.sum(s).unwrap();
            let l = match which {
                0 => a,
                1 => b,
                _ => g.add(a, b).unwrap(),
            };
            g.backward(l, &[x]).unwrap().remove(0)
        };
        let (ga, gb, gab) = (build(0), build(1), build(2));
        for k in 0..3 {
            assert!((ga.data()[k] + gb.data()[k] - gab.data()[k]).abs() < 1e-15);
        }
    }
}
