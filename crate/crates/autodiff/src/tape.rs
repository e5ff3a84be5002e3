//! Wengert-list reverse-mode differentiation.
//!
//! Every method on [`Tape`] evaluates one primitive eagerly, appends a node
//! holding its output and whatever the backward pass needs, and returns a
//! [`Var`] handle. Node inputs always precede the node, so
//! [`Tape::backward`] is a single reverse sweep over insertion order.

use indexmap::IndexMap;

use crate::error::{contract_err, dim_err, Error, Result};
use crate::ops::{activation, attention, conv, gram, layout, linalg, norm};
use crate::ops::{BatchNormMode, BatchStats, NormCache, PoolKind};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, T),
    ScaleRows { x: Var, factors: Vec<T> },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Matmul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Pool2d { x: Var, kind: PoolKind, k: usize, s: usize, argmax: Vec<usize> },
    AdaptiveAvgPool(Var),
    Relu(Var),
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, cache: NormCache<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, mode: BatchNormMode, cache: NormCache<T> },
    Gram { x: Var, normalize: bool },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Patchify { x: Var, p: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Tensor<T> },
    Expand(Var),
    CrossEntropy { logits: Var, targets: Tensor<T>, probs: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation graph. Owned by one execution context at a time.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
    batch_stats: Vec<(String, BatchStats<T>)>,
    flip_gradients: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: IndexMap<String, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to any recorded node, if the node
    /// lies on a differentiable path to the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|&v| self.get(v))
    }

    /// `(name, gradient)` for every parameter read during the forward pass.
    pub fn params(&self) -> impl Iterator<Item = (&str, Option<&Tensor<T>>)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), self.get(v)))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: IndexMap::new(), batch_stats: Vec::new(), flip_gradients: false }
    }

    /// Debug switch that negates every gradient leaving [`Tape::backward`].
    /// Exists only to prove the gradient checker catches a broken backward.
    pub fn set_flip_gradients(&mut self, flip: bool) {
        self.flip_gradients = flip;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// An input whose gradient is wanted (but which is not a parameter).
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a named entry in `store`. Repeated reads share one node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let entry = store.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        self.nodes.push(Node { value: entry.value.clone(), op: Op::Leaf, requires_grad: entry.trainable });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Batch statistics observed by train-mode batch norms, keyed by the
    /// name passed to [`Tape::batch_norm`].
    pub fn batch_stats(&self) -> &[(String, BatchStats<T>)] {
        &self.batch_stats
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `x + y` with `y` broadcast over the leading dimensions of `x`.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let out = layout::add_broadcast(self.value(x), self.value(y))?;
        Ok(self.push(out, Op::AddBroadcast(x, y), &[x, y]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).scale(s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// Multiplies sample `i` (leading axis) by `factors[i]`.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let t = self.value(x);
        if factors.len() != t.dim(0) {
            return Err(dim_err(
                "scale_rows",
                format!("{} factors for leading dim of {:?}", factors.len(), t.shape()),
            ));
        }
        let per = t.numel() / t.dim(0);
        let mut out = t.clone();
        for (chunk, &f) in out.data_mut().chunks_mut(per).zip(&factors) {
            chunk.iter_mut().for_each(|v| *v = *v * f);
        }
        Ok(self.push(out, Op::ScaleRows { x, factors }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        self.push(out, Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = linalg::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Matmul(a, b), &[a, b]))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = linalg::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, &inputs))
    }

    pub fn pool2d(&mut self, x: Var, kind: PoolKind, k: usize, s: usize) -> Result<Var> {
        let (out, argmax) = conv::pool2d(self.value(x), kind, k, s)?;
        Ok(self.push(out, Op::Pool2d { x, kind, k, s, argmax }, &[x]))
    }

    pub fn adaptive_avg_pool2d(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let out = conv::adaptive_avg_pool2d(self.value(x), oh, ow)?;
        Ok(self.push(out, Op::AdaptiveAvgPool(x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = activation::relu(self.value(x));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = activation::gelu(self.value(x));
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = activation::softmax(self.value(x), axis)?;
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (out, cache) = norm::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, cache }, &[x, gamma, beta]))
    }

    /// Batch norm over axis 1. In train mode the batch statistics are
    /// recorded under `stats_name` (see [`Tape::batch_stats`]).
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&Tensor<T>, &Tensor<T>)>,
        mode: BatchNormMode,
        eps: T,
        stats_name: &str,
    ) -> Result<Var> {
        let (out, cache, stats) =
            norm::batch_norm(self.value(x), self.value(gamma), self.value(beta), running, mode, eps)?;
        if let Some(stats) = stats {
            self.batch_stats.push((stats_name.to_string(), stats));
        }
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, mode, cache }, &[x, gamma, beta]))
    }

    /// Per-sample Gram matrices `N×C×H×W → N×C×C`.
    pub fn gram(&mut self, x: Var, normalize: bool) -> Result<Var> {
        let out = gram::gram(self.value(x), normalize)?;
        Ok(self.push(out, Op::Gram { x, normalize }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = layout::concat(&values, axis)?;
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = layout::narrow(self.value(x), axis, start, len)?;
        Ok(self.push(out, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn patchify(&mut self, x: Var, p: usize) -> Result<Var> {
        let out = layout::patchify(self.value(x), p)?;
        Ok(self.push(out, Op::Patchify { x, p }, &[x]))
    }

    /// Multi-head scaled dot-product attention; see [`crate::ops::attention`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (out, probs) = attention::attention(self.value(q), self.value(k), self.value(v), heads)?;
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    /// Attention weights saved by an [`Tape::attention`] node.
    pub fn attention_weights(&self, v: Var) -> Option<&Tensor<T>> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Repeats a leading-dim-1 tensor `n` times along axis 0.
    pub fn expand(&mut self, x: Var, n: usize) -> Result<Var> {
        let out = layout::expand_leading(self.value(x), n)?;
        Ok(self.push(out, Op::Expand(x), &[x]))
    }

    /// Batch-mean soft-target cross entropy of `B×K` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: Tensor<T>) -> Result<Var> {
        let (loss, probs) = activation::softmax_cross_entropy(self.value(logits), &targets)?;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets, probs }, &[logits]))
    }

    /// Propagates `∂loss/∂node` to every node on a differentiable path.
    /// Gradients start from zero on every call.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(contract_err(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));

        for i in (0..=loss.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |v: Var, t: Tensor<T>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut lower[v.0] {
                    Some(e) => e.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(*a, g.zip_map(vb, |x, y| x * y)?);
                    acc(*b, g.zip_map(va, |x, y| x * y)?);
                }
                Op::AddBroadcast(x, y) => {
                    acc(*x, g.clone());
                    acc(*y, layout::reduce_leading(g, self.shape(*y)));
                }
                Op::Scale(x, s) => acc(*x, g.scale(*s)),
                Op::ScaleRows { x, factors } => {
                    let per = g.numel() / factors.len();
                    let mut d = g.clone();
                    for (chunk, &f) in d.data_mut().chunks_mut(per).zip(factors) {
                        chunk.iter_mut().for_each(|v| *v = *v * f);
                    }
                    acc(*x, d);
                }
                Op::Sum(x) => {
                    acc(*x, Tensor::full(self.shape(*x).to_vec(), g.item()));
                }
                Op::Mean(x) => {
                    let n = T::from_usize_lossy(self.value(*x).numel());
                    acc(*x, Tensor::full(self.shape(*x).to_vec(), g.item() / n));
                }
                Op::Reshape(x) => acc(*x, g.reshape(self.shape(*x).to_vec())?),
                Op::Matmul(a, b) => {
                    let (da, db) = linalg::matmul_backward(self.value(*a), self.value(*b), g);
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) =
                        linalg::linear_backward(self.value(*x), self.value(*w), g, needs(*x));
                    if let Some(dx) = dx {
                        acc(*x, dx);
                    }
                    acc(*w, dw);
                    if let Some(b) = b {
                        acc(*b, db.reshape(self.shape(*b).to_vec())?);
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) = conv::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        g,
                        *stride,
                        *pad,
                        needs(*x),
                    );
                    if let Some(dx) = dx {
                        acc(*x, dx);
                    }
                    acc(*w, dw);
                    if let Some(b) = b {
                        acc(*b, db.reshape(self.shape(*b).to_vec())?);
                    }
                }
                Op::Pool2d { x, kind, k, s, argmax } => {
                    acc(*x, conv::pool2d_backward(self.shape(*x), *kind, *k, *s, argmax, g));
                }
                Op::AdaptiveAvgPool(x) => {
                    acc(*x, conv::adaptive_avg_pool2d_backward(self.shape(*x), g));
                }
                Op::Relu(x) => acc(*x, activation::relu_backward(self.value(*x), g)),
                Op::Gelu(x) => acc(*x, activation::gelu_backward(self.value(*x), g)),
                Op::Softmax { x, axis } => {
                    acc(*x, activation::softmax_backward(&node.value, g, *axis));
                }
                Op::LayerNorm { x, gamma, beta, cache } => {
                    let (dx, dg, db) = norm::layer_norm_backward(cache, self.value(*gamma), g);
                    acc(*x, dx);
                    acc(*gamma, dg.reshape(self.shape(*gamma).to_vec())?);
                    acc(*beta, db.reshape(self.shape(*beta).to_vec())?);
                }
                Op::BatchNorm { x, gamma, beta, mode, cache } => {
                    let (dx, dg, db) = norm::batch_norm_backward(cache, self.value(*gamma), g, *mode);
                    acc(*x, dx);
                    acc(*gamma, dg.reshape(self.shape(*gamma).to_vec())?);
                    acc(*beta, db.reshape(self.shape(*beta).to_vec())?);
                }
                Op::Gram { x, normalize } => {
                    acc(*x, gram::gram_backward(self.value(*x), *normalize, g));
                }
                Op::Concat { parts, axis } => {
                    let sizes: Vec<usize> = parts.iter().map(|&p| self.shape(p)[*axis]).collect();
                    for (&p, d) in parts.iter().zip(layout::concat_backward(g, &sizes, *axis)) {
                        acc(p, d);
                    }
                }
                Op::Narrow { x, axis, start } => {
                    acc(*x, layout::narrow_backward(self.shape(*x), *axis, *start, g));
                }
                Op::Patchify { x, p } => {
                    acc(*x, layout::patchify_backward(self.shape(*x), *p, g));
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (dq, dk, dv) = attention::attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        probs,
                        *heads,
                        g,
                    );
                    acc(*q, dq);
                    acc(*k, dk);
                    acc(*v, dv);
                }
                Op::Expand(x) => acc(*x, layout::reduce_leading(g, self.shape(*x))),
                Op::CrossEntropy { logits, targets, probs } => {
                    acc(
                        *logits,
                        activation::softmax_cross_entropy_backward(probs, targets, g.item()),
                    );
                }
            }
        }

        if self.flip_gradients {
            for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
                if matches!(node.op, Op::Leaf) {
                    if let Some(g) = g {
                        *g = g.scale(-T::one());
                    }
                }
            }
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }
}
