use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{matmul, matmul_grad_a, matmul_grad_b};
use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds accepted by [`Graph::apply`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    MatMul,
    Relu,
    Sigmoid,
    Concat,
    Mean,
    Mse,
    /// Second input holds row indices encoded as non-negative integers.
    EmbedLookup,
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Add,
    /// Adds a rank-1 tensor to every row of the left operand.
    AddRow,
    Sub,
    Mul,
    Scale(S),
    MatMul { m: usize, k: usize, n: usize },
    Relu,
    Sigmoid,
    /// Concatenation along the last axis; widths of each input.
    Concat { rows: usize, widths: Vec<usize> },
    Mean,
    Mse,
    Embed { ids: Vec<usize> },
    Reshape,
}

#[derive(Debug)]
struct Node<S> {
    value: Arc<Tensor<S>>,
    op: Op<S>,
    inputs: Vec<Var>,
    requires_grad: bool,
}

/// Tape of recorded operations. Nodes are appended in evaluation order, which
/// is also a topological order; [`Graph::backward`] walks it once in reverse.
#[derive(Debug)]
pub struct Graph<S = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of every differentiable leaf reachable from the graph.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    grads: HashMap<Var, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.grads.get(&var)
    }

    /// Removes and returns the gradient for `var`.
    pub fn take(&mut self, var: Var) -> Option<Tensor<S>> {
        self.grads.remove(&var)
    }

    /// Gradients for `vars`, in order. Panics if one is not a differentiable leaf.
    pub fn collect(mut self, vars: &[Var]) -> Vec<Tensor<S>> {
        vars.iter()
            .map(|v| {
                self.grads
                    .remove(v)
                    .expect("requested gradient of a non-differentiable node")
            })
            .collect()
    }
}

fn mismatch(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: Vec<Var>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            inputs,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn shared_leaf(&mut self, value: Arc<Tensor<S>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.shared_leaf(Arc::new(value), true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.shared_leaf(Arc::new(value), false)
    }

    /// Copies the current value of `var` into a constant leaf. Gradients do
    /// not flow through the copy.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = Arc::clone(&self.nodes[var.0].value);
        self.shared_leaf(value, false)
    }

    /// Dispatches by kind. Kept for callers that pick ops at runtime; the typed
    /// methods below are the usual entry points.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(TensorError::InvalidArgument {
                    op: "apply",
                    msg: format!("{kind:?} takes {n} inputs, got {}", inputs.len()),
                });
            }
            Ok(())
        };
        match kind {
            OpKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Sub => {
                arity(2)?;
                self.sub(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Relu => {
                arity(1)?;
                Ok(self.relu(inputs[0]))
            }
            OpKind::Sigmoid => {
                arity(1)?;
                Ok(self.sigmoid(inputs[0]))
            }
            OpKind::Concat => self.concat(inputs),
            OpKind::Mean => {
                arity(1)?;
                Ok(self.mean(inputs[0]))
            }
            OpKind::Mse => {
                arity(2)?;
                self.mse(inputs[0], inputs[1])
            }
            OpKind::EmbedLookup => {
                arity(2)?;
                let ids = self.value(inputs[1]).data().iter().map(|v| {
                    let f = v.as_real();
                    if f < 0.0 || f.fract() != 0.0 {
                        Err(TensorError::InvalidArgument {
                            op: "embed_lookup",
                            msg: format!("index {f} is not a non-negative integer"),
                        })
                    } else {
                        Ok(f as usize)
                    }
                });
                let ids = ids.collect::<Result<Vec<_>>>()?;
                self.embed_lookup(inputs[0], &ids)
            }
        }
    }

    /// Elementwise sum. A rank-1 right operand whose length equals the last
    /// dimension of the left operand is broadcast across rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x + *y).collect();
            let out = Tensor::new(ta.shape().to_vec(), data)?;
            return Ok(self.push(out, Op::Add, vec![a, b]));
        }
        let width = *ta.shape().last().unwrap_or(&0);
        if tb.rank() == 1 && ta.rank() >= 1 && tb.len() == width && width > 0 {
            let bias = tb.data();
            let mut data = ta.data().to_vec();
            for row in data.chunks_exact_mut(width) {
                for (x, y) in row.iter_mut().zip(bias) {
                    *x = *x + *y;
                }
            }
            let out = Tensor::new(ta.shape().to_vec(), data)?;
            return Ok(self.push(out, Op::AddRow, vec![a, b]));
        }
        Err(mismatch("add", ta, tb))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("sub", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x - *y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Sub, vec![a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul, vec![a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| *x * factor).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale(factor), vec![a])
    }

    /// `[m, k] · [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = Tensor::new(vec![m, n], matmul(ta.data(), tb.data(), m, k, n))?;
        Ok(self.push(out, Op::MatMul { m, k, n }, vec![a, b]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .map(|x| if *x > S::zero() { *x } else { S::zero() })
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Relu, vec![a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .map(|x| S::one() / (S::one() + (-*x).exp()))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Sigmoid, vec![a])
    }

    /// Concatenates along the last axis. Inputs must agree on every other axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let lead = self.value(*first).shape().split_last().map(|(_, l)| l.to_vec());
        let lead = lead.ok_or_else(|| TensorError::InvalidArgument {
            op: "concat",
            msg: "rank-0 inputs cannot be concatenated".into(),
        })?;
        let mut widths = Vec::with_capacity(inputs.len());
        for v in inputs {
            let t = self.value(*v);
            match t.shape().split_last() {
                Some((w, l)) if l == lead.as_slice() => widths.push(*w),
                _ => return Err(mismatch("concat", self.value(*first), t)),
            }
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, w) in inputs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat { rows, widths }, inputs.to_vec()))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = S::from_real(ta.len() as f64);
        let sum = ta.data().iter().fold(S::zero(), |acc, x| acc + *x);
        self.push(Tensor::scalar(sum / n), Op::Mean, vec![a])
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mse", ta, tb));
        }
        let n = S::from_real(ta.len() as f64);
        let sum = ta
            .data()
            .iter()
            .zip(tb.data())
            .fold(S::zero(), |acc, (x, y)| acc + (*x - *y) * (*x - *y));
        Ok(self.push(Tensor::scalar(sum / n), Op::Mse, vec![a, b]))
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(shape.to_vec(), ta.data().to_vec()).map_err(|_| {
            TensorError::ShapeMismatch {
                op: "reshape",
                lhs: ta.shape().to_vec(),
                rhs: shape.to_vec(),
            }
        })?;
        Ok(self.push(out, Op::Reshape, vec![a]))
    }

    /// Gathers rows of a `[vocab, dim]` table.
    pub fn embed_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "embed_lookup",
                msg: format!("table must be rank 2, got shape {:?}", tt.shape()),
            });
        }
        let (vocab, dim) = (tt.shape()[0], tt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "embed_lookup",
                    index: id,
                    len: vocab,
                });
            }
            data.extend_from_slice(&tt.data()[id * dim..(id + 1) * dim]);
        }
        let out = Tensor::new(vec![ids.len(), dim], data)?;
        Ok(self.push(out, Op::Embed { ids: ids.to_vec() }, vec![table]))
    }

    /// Reverse pass from a scalar loss. Returns the gradient of every
    /// differentiable leaf (zeros for leaves the loss does not depend on) and
    /// clears the graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        let loss_shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Vec<S>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);

        fn slot<'a, S: Scalar>(
            grads: &'a mut [Option<Vec<S>>],
            nodes: &[Node<S>],
            v: Var,
        ) -> Option<&'a mut Vec<S>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); nodes[v.0].value.len()]))
        }

        let mut leaves = HashMap::new();
        for idx in (0..nodes.len()).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                if matches!(node.op, Op::Leaf) {
                    leaves.insert(Var(idx), Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            let ins = &node.inputs;
            match &node.op {
                Op::Leaf => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    leaves.insert(Var(idx), t);
                }
                Op::Add => {
                    for &v in ins {
                        if let Some(dst) = slot(&mut grads, &nodes, v) {
                            dst.iter_mut().zip(&g).for_each(|(d, x)| *d = *d + *x);
                        }
                    }
                }
                Op::AddRow => {
                    if let Some(dst) = slot(&mut grads, &nodes, ins[0]) {
                        dst.iter_mut().zip(&g).for_each(|(d, x)| *d = *d + *x);
                    }
                    if let Some(dst) = slot(&mut grads, &nodes, ins[1]) {
                        let w = dst.len();
                        for row in g.chunks_exact(w) {
                            dst.iter_mut().zip(row).for_each(|(d, x)| *d = *d + *x);
                        }
                    }
                }
                Op::Sub => {
                    if let Some(dst) = slot(&mut grads, &nodes, ins[0]) {
                        dst.iter_mut().zip(&g).for_each(|(d, x)| *d = *d + *x);
                    }
                    if let Some(dst) = slot(&mut grads, &nodes, ins[1]) {
                        dst.iter_mut().zip(&g).for_each(|(d, x)| *d = *d - *x);
                    }
                }
                Op::Mul => {
                    let (a, b) = (nodes[ins[0].0].value.clone(), nodes[ins[1].0].value.clone());
                    if let Some(dst) = slot(&mut grads, &nodes, ins[0]) {
                        for ((d, x), bv) in dst.iter_mut().zip(&g).zip(b.data()) {
                            *d = *d + *x * *bv;
                        }
                    }
                    if let Some(dst) = slot(&mut grads, &nodes, ins[1]) {
                        for ((d, x), av) in dst.iter_mut().zip(&g).zip(a.data()) {
                            *d = *d + *x * *av;
                        }
                    }
                }
                Op::Scale(c) => {
                    if let Some(dst) = slot(&mut grads, &nodes, ins[0]) {
                        dst.iter_mut().zip(&g).for_each(|(d, x)| *d = *d + *x * *c);
                    }
                }
                Op::MatMul { m, k, n } => {
                    let (a, b) = (nodes[ins[0].0].value.clone(), nodes[ins[1].0].value.clone());
                    if let Some(dst) = slot(&mut grads, &nodes, ins[0]) {
                        matmul_grad_a(&g, b.data(), dst, *m, *k, *n);
                    }
                    if let Some(dst) = slot(&mut grads, &nodes, ins[1]) {
                        matmul_grad_b(a.data(), &g, dst, *m, *k, *n);
                    }
                }
                Op::Relu => {
                    let y = node.value.clone();
                    if let Some(dst) = slot(&mut grads, &nodes, ins[0]) {
                        for ((d, x), yv) in dst.iter_mut().zip(&g).zip(y.data()) {
                            if *yv > S::zero() {
                                *d = *d + *x;
                            }
                        }
                    }
                }
                Op::Sigmoid => {
                    let y = node.value.clone();
                    if let Some(dst) = slot(&mut grads, &nodes, ins[0]) {
                        for ((d, x), yv) in dst.iter_mut().zip(&g).zip(y.data()) {
                            *d = *d + *x * *yv * (S::one() - *yv);
                        }
                    }
                }
                Op::Concat { rows, widths } => {
                    let total: usize = widths.iter().sum();
                    let mut offset = 0;
                    for (&v, &w) in ins.iter().zip(widths) {
                        if let Some(dst) = slot(&mut grads, &nodes, v) {
                            for r in 0..*rows {
                                let src = &g[r * total + offset..r * total + offset + w];
                                let d = &mut dst[r * w..(r + 1) * w];
                                d.iter_mut().zip(src).for_each(|(d, x)| *d = *d + *x);
                            }
                        }
                        offset += w;
                    }
                }
                Op::Mean => {
                    if let Some(dst) = slot(&mut grads, &nodes, ins[0]) {
                        let scale = g[0] / S::from_real(dst.len() as f64);
                        dst.iter_mut().for_each(|d| *d = *d + scale);
                    }
                }
                Op::Mse => {
                    let (a, b) = (nodes[ins[0].0].value.clone(), nodes[ins[1].0].value.clone());
                    let scale = S::from_real(2.0) * g[0] / S::from_real(a.len() as f64);
                    if let Some(dst) = slot(&mut grads, &nodes, ins[0]) {
                        for ((d, x), y) in dst.iter_mut().zip(a.data()).zip(b.data()) {
                            *d = *d + scale * (*x - *y);
                        }
                    }
                    if let Some(dst) = slot(&mut grads, &nodes, ins[1]) {
                        for ((d, x), y) in dst.iter_mut().zip(a.data()).zip(b.data()) {
                            *d = *d - scale * (*x - *y);
                        }
                    }
                }
                Op::Reshape => {
                    if let Some(dst) = slot(&mut grads, &nodes, ins[0]) {
                        dst.iter_mut().zip(&g).for_each(|(d, x)| *d = *d + *x);
                    }
                }
                Op::Embed { ids } => {
                    if let Some(dst) = slot(&mut grads, &nodes, ins[0]) {
                        let dim = g.len() / ids.len().max(1);
                        for (row, &id) in ids.iter().enumerate() {
                            let src = &g[row * dim..(row + 1) * dim];
                            let d = &mut dst[id * dim..(id + 1) * dim];
                            d.iter_mut().zip(src).for_each(|(d, x)| *d = *d + *x);
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}
