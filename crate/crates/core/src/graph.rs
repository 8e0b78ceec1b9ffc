//! Reverse-mode tape over the primitive set.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Values
//! are computed eagerly; [`Graph::backward`] then walks the tape in reverse
//! and accumulates gradients for every node that depends on a leaf marked
//! `requires_grad`. Parameter leaves borrow their tensors for the lifetime of
//! the graph, so binding a model's weights costs nothing.

use std::borrow::Cow;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::{backward_with_output, default_needs, primitive_forward, Op, RopeTable};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Option<Op>,
    inputs: Vec<Var>,
    requires_grad: bool,
}

pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Tensor>>,
    train: bool,
}

/// Parameter leaves of one [`ParamStore`] inside a graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

impl<'a> Default for Graph<'a> {
    fn default() -> Self {
        Self::new(false)
    }
}

impl<'a> Graph<'a> {
    /// `train` switches stochastic primitives (dropout) on.
    pub fn new(train: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            train,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Option<Op>, inputs: Vec<Var>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), None, Vec::new(), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    /// Borrowed leaf.
    pub fn leaf(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(value), None, Vec::new(), requires_grad)
    }

    /// Creates one leaf per tensor of `store`.
    pub fn bind(&mut self, store: &'a ParamStore, trainable: bool) -> Bound {
        let vars = store.tensors().iter().map(|t| self.leaf(t, trainable)).collect();
        Bound { vars }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
            primitive_forward(&op, &vals)?
        };
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Cow::Owned(value), Some(op), inputs.to_vec(), requires_grad))
    }

    /// Reverse pass from a scalar node, seeding its gradient with 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let seed = Tensor::full(self.shape(loss).to_vec(), 1.0);
        self.backward_with(loss, seed)
    }

    pub fn backward_with(&mut self, root: Var, seed: Tensor) -> Result<()> {
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(op) = &node.op {
                if node.requires_grad {
                    let needs: Vec<bool> = default_needs(op, node.inputs.len())
                        .into_iter()
                        .zip(&node.inputs)
                        .map(|(d, v)| d && self.nodes[v.0].requires_grad)
                        .collect();
                    let vals: Vec<&Tensor> = node.inputs.iter().map(|v| &*self.nodes[v.0].value).collect();
                    let input_grads = backward_with_output(op, &vals, &node.value, &g, &needs)?;
                    let inputs = node.inputs.clone();
                    for (v, ig) in inputs.into_iter().zip(input_grads) {
                        if let Some(ig) = ig {
                            accumulate(&mut self.grads[v.0], ig);
                        }
                    }
                }
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of every bound parameter, zeros where none flowed.
    pub fn param_grads(&self, bound: &Bound) -> Vec<Tensor> {
        bound
            .vars
            .iter()
            .map(|&v| match self.grad(v) {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.shape(v).to_vec()),
            })
            .collect()
    }

    // Convenience wrappers.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(b).len() > self.shape(a).len() {
            self.apply(Op::Add, &[b, a])
        } else {
            self.apply(Op::Add, &[a, b])
        }
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(b).len() > self.shape(a).len() {
            self.apply(Op::Mul, &[b, a])
        } else {
            self.apply(Op::Mul, &[a, b])
        }
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        self.apply(Op::Scale(s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        self.apply(Op::AddScalar(s), &[a])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        match b {
            Some(b) => self.apply(Op::Linear, &[x, w, b]),
            None => self.apply(Op::Linear, &[x, w]),
        }
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        self.apply(Op::LayerNorm { eps }, &[x, gamma, beta])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Softmax, &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Silu, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Gelu, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Relu, &[x])
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Mean { axis }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::SumAll, &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::MeanAll, &[x])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let op = Op::Conv2d { stride, padding };
        match b {
            Some(b) => self.apply(op, &[x, w, b]),
            None => self.apply(op, &[x, w]),
        }
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        match b {
            Some(b) => self.apply(Op::ConvTranspose2d, &[x, w, b]),
            None => self.apply(Op::ConvTranspose2d, &[x, w]),
        }
    }

    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::MaxPool2d, &[x])
    }

    pub fn bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() >= 2 && s[s.len() - 2] == out_h && s[s.len() - 1] == out_w {
            return Ok(x);
        }
        self.apply(Op::Bilinear { out_h, out_w }, &[x])
    }

    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.apply(Op::AdaptiveAvgPool2d { out_h, out_w }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape(shape.to_vec()), &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Op::Permute(axes.to_vec()), &[x])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let n = self.shape(x).len();
        if n < 2 {
            return Err(Error::shape("transpose", format!("rank {n}")));
        }
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 2, n - 1);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, xs)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        if start == 0 && self.shape(x).get(axis) == Some(&end) {
            return Ok(x);
        }
        self.apply(Op::Slice { axis, start, end }, &[x])
    }

    /// Identity outside training mode.
    pub fn dropout(&mut self, x: Var, p: f32, key: u64, counter: u64) -> Result<Var> {
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        self.apply(Op::Dropout { p, key, counter }, &[x])
    }

    pub fn rope2d(&mut self, x: Var, table: Arc<RopeTable>) -> Result<Var> {
        self.apply(Op::Rope2d(table), &[x])
    }

    pub fn mask_replace(&mut self, x: Var, m: Var, mask: Arc<Vec<bool>>) -> Result<Var> {
        self.apply(Op::MaskReplace(mask), &[x, m])
    }

    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        self.apply(Op::GatherRows(idx), &[x])
    }

    pub fn cosine_rows(&mut self, a: Var, b: Var, eps: f32) -> Result<Var> {
        self.apply(Op::CosineRows { eps }, &[a, b])
    }

    pub fn bce_with_logits(&mut self, logits: Var, labels: Var) -> Result<Var> {
        self.apply(Op::BceWithLogits, &[logits, labels])
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: Arc<Vec<usize>>) -> Result<Var> {
        self.apply(Op::CrossEntropy(targets), &[logits])
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
}
