//! Reverse-mode automatic differentiation over dense [`Tensor`]s.
//!
//! A [`Tape`] records every operation of a forward pass as it happens; [`Var`]
//! is a cheap handle to one recorded value. Calling [`Tape::backward`] on a
//! scalar walks the tape in reverse creation order, which is always a valid
//! topological order, so repeated runs over the same trace produce bit-identical
//! gradients.
//!
//! ```
//! use gvit_core::autodiff::Tape;
//! use gvit_core::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = x.mul(&x).unwrap();
//! tape.backward(&y).unwrap();
//! assert_eq!(tape.grad(&x).unwrap().item(), 6.0);
//! ```
//!
//! Broadcasting is limited to the right-hand operand of binary ops, and only
//! when it is a scalar or its shape is a suffix of the left operand's shape.

pub mod kernels;
mod ops;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use ops::{BinaryKind, UnaryKind};

/// A differentiable operation with a hand-written backward rule.
///
/// `forward` is called exactly once when the node is recorded and may stash
/// whatever it needs for the backward pass in `self`.
pub trait CustomOp {
    fn name(&self) -> &str;

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// One gradient per input, each shaped like that input. `needs[i]` is false
    /// for inputs that do not require a gradient; `None` may be returned for them.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

/// Adapts a pair of closures into a [`CustomOp`].
pub struct FnOp<F, B> {
    name: String,
    forward: F,
    backward: B,
}

impl<F, B> FnOp<F, B>
where
    F: FnMut(&[&Tensor]) -> Result<Tensor>,
    B: Fn(&[&Tensor], &Tensor, &Tensor) -> Result<Vec<Tensor>>,
{
    pub fn new(name: impl Into<String>, forward: F, backward: B) -> Self {
        FnOp {
            name: name.into(),
            forward,
            backward,
        }
    }
}

impl<F, B> CustomOp for FnOp<F, B>
where
    F: FnMut(&[&Tensor]) -> Result<Tensor>,
    B: Fn(&[&Tensor], &Tensor, &Tensor) -> Result<Vec<Tensor>>,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        (self.forward)(inputs)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok((self.backward)(inputs, output, grad_output)?
            .into_iter()
            .map(Some)
            .collect())
    }
}

pub(crate) enum Op {
    Leaf,
    MatMul,
    Bmm { trans_b: bool },
    Binary { kind: BinaryKind, inner: usize },
    Unary(UnaryKind),
    Softmax,
    LayerNorm { xhat: Vec<f64>, rstd: Vec<f64> },
    Reshape,
    Permute(Vec<usize>),
    Narrow { axis: usize, start: usize },
    Concat { axis: usize },
    Sum,
    Mean,
    MeanAxis { axis: usize },
    CrossEntropy { labels: Vec<usize>, probs: Vec<f64> },
    Custom(Box<dyn CustomOp>),
}

impl Op {
    fn tag(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Binary { kind, .. } => kind.tag(),
            Op::Unary(k) => k.tag(),
            Op::Softmax => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Reshape => "reshape",
            Op::Permute(_) => "permute",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::MeanAxis { .. } => "mean_axis",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Custom(op) => op.name(),
        }
    }
}

pub(crate) struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation graph. One tape per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives gradients.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Vec::new(), Op::Leaf, requires_grad)
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    fn record(&self, value: Tensor, parents: &[usize], op: Op) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        self.push(value, parents.to_vec(), op, requires_grad)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Records a node whose forward and backward are supplied by `op`.
    pub fn custom<'t>(&'t self, inputs: &[Var<'t>], mut op: Box<dyn CustomOp>) -> Result<Var<'t>> {
        let values: Vec<Rc<Tensor>> = inputs.iter().map(|v| v.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = op.forward(&refs)?;
        let parents: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        Ok(self.record(out, &parents, Op::Custom(op)))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|v| v.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = ops::concat_forward(&refs, axis)?;
        let parents: Vec<usize> = parts.iter().map(|v| v.id).collect();
        Ok(self.record(out, &parents, Op::Concat { axis }))
    }

    /// Runs reverse accumulation from `loss` and returns the transient gradient
    /// of every node (`None` where no gradient flows).
    fn propagate(&self, loss: &Var<'_>) -> Result<Vec<Option<Vec<f64>>>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        if !root.requires_grad {
            return Ok(grads);
        }
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || node.parents.is_empty() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let parent_vals: Vec<&Tensor> =
                node.parents.iter().map(|&p| nodes[p].value.as_ref()).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let contributions = ops::backward(&node.op, &parent_vals, &node.value, g.as_slice(), &needs)?;
            for (slot, (&p, contrib)) in node.parents.iter().zip(contributions).enumerate() {
                let Some(contrib) = contrib else { continue };
                if !needs[slot] {
                    continue;
                }
                if contrib.len() != nodes[p].value.numel() {
                    return Err(Error::Contract(format!(
                        "{} backward returned {} values for input {slot} of shape {:?}",
                        node.op.tag(),
                        contrib.len(),
                        nodes[p].value.shape()
                    )));
                }
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            // Keep the node's own gradient around for readers of intermediates.
            grads[id] = Some(g);
        }
        Ok(grads)
    }

    /// Accumulates d`loss`/d`node` into the stored gradient of every node that
    /// requires one. Calling twice without [`Tape::zero_grad`] adds twice.
    pub fn backward(&self, loss: &Var<'_>) -> Result<()> {
        let fresh = self.propagate(loss)?;
        let mut stored = self.grads.borrow_mut();
        let n = self.nodes.borrow().len();
        if stored.len() < n {
            stored.resize(n, None);
        }
        for (id, g) in fresh.into_iter().enumerate() {
            let Some(g) = g else { continue };
            match &mut stored[id] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Gradients of `loss` with respect to `wrt`, without touching stored grads.
    /// Unreachable inputs get zeros.
    pub fn gradients(&self, loss: &Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Tensor>> {
        let mut fresh = self.propagate(loss)?;
        let nodes = self.nodes.borrow();
        wrt.iter()
            .map(|v| {
                let shape = nodes[v.id].value.shape().to_vec();
                let data = fresh
                    .get_mut(v.id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; nodes[v.id].value.numel()]);
                Tensor::new(shape, data)
            })
            .collect()
    }

    /// Stored gradient of `var`, if any backward pass reached it.
    pub fn grad(&self, var: &Var<'_>) -> Option<Tensor> {
        let stored = self.grads.borrow();
        let g = stored.get(var.id)?.as_ref()?;
        let shape = self.nodes.borrow()[var.id].value.shape().to_vec();
        Tensor::new(shape, g.clone()).ok()
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs);
        let (a, b) = (self.value(), rhs.value());
        let out = ops::matmul_forward(&a, &b)?;
        Ok(self.tape.record(out, &[self.id, rhs.id], Op::MatMul))
    }

    /// Batched `[B, m, k] × [B, k, n] → [B, m, n]`.
    pub fn bmm(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.bmm_impl(rhs, false)
    }

    /// Batched `[B, m, k] × [B, n, k]ᵀ → [B, m, n]`.
    pub fn bmm_nt(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.bmm_impl(rhs, true)
    }

    fn bmm_impl(&self, rhs: &Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        self.same_tape(rhs);
        let (a, b) = (self.value(), rhs.value());
        let out = ops::bmm_forward(&a, &b, trans_b)?;
        Ok(self.tape.record(out, &[self.id, rhs.id], Op::Bmm { trans_b }))
    }

    fn binary(&self, rhs: &Var<'t>, kind: BinaryKind) -> Result<Var<'t>> {
        self.same_tape(rhs);
        let (a, b) = (self.value(), rhs.value());
        let (out, inner) = ops::binary_forward(kind, &a, &b)?;
        Ok(self.tape.record(out, &[self.id, rhs.id], Op::Binary { kind, inner }))
    }

    pub fn add(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, BinaryKind::Add)
    }

    pub fn sub(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, BinaryKind::Sub)
    }

    pub fn mul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, BinaryKind::Mul)
    }

    pub fn unary(&self, kind: UnaryKind) -> Var<'t> {
        let out = ops::unary_forward(kind, &self.value());
        self.tape.record(out, &[self.id], Op::Unary(kind))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(UnaryKind::Tanh)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn gelu(&self) -> Var<'t> {
        self.unary(UnaryKind::Gelu)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(UnaryKind::Exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(UnaryKind::Log)
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(UnaryKind::Neg)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(UnaryKind::Square)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(UnaryKind::Scale(c))
    }

    pub fn offset(&self, c: f64) -> Var<'t> {
        self.unary(UnaryKind::Offset(c))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(UnaryKind::Clamp(lo, hi))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let out = ops::softmax_forward(&self.value())?;
        Ok(self.tape.record(out, &[self.id], Op::Softmax))
    }

    /// Layer normalization over the last axis followed by `gain · x̂ + bias`.
    pub fn layernorm(&self, gain: &Var<'t>, bias: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.same_tape(gain);
        self.same_tape(bias);
        let (x, g, b) = (self.value(), gain.value(), bias.value());
        let (out, xhat, rstd) = ops::layernorm_forward(&x, &g, &b, eps)?;
        Ok(self
            .tape
            .record(out, &[self.id, gain.id, bias.id], Op::LayerNorm { xhat, rstd }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().as_ref().clone().reshape(shape.to_vec())?;
        Ok(self.tape.record(out, &[self.id], Op::Reshape))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..v.ndim()).collect::<Vec<_>>() {
            return Err(Error::shape("permute", v.shape(), perm));
        }
        let (shape, data) = kernels::permute(v.data(), v.shape(), perm);
        let out = Tensor::new(shape, data)?;
        Ok(self.tape.record(out, &[self.id], Op::Permute(perm.to_vec())))
    }

    /// Elements `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let out = ops::narrow_forward(&self.value(), axis, start, len)?;
        Ok(self.tape.record(out, &[self.id], Op::Narrow { axis, start }))
    }

    pub fn sum(&self) -> Var<'t> {
        let s: f64 = self.value().data().iter().sum();
        self.tape.record(Tensor::scalar(s), &[self.id], Op::Sum)
    }

    pub fn mean(&self) -> Var<'t> {
        let v = self.value();
        let n = v.numel().max(1) as f64;
        let s: f64 = v.data().iter().sum();
        self.tape.record(Tensor::scalar(s / n), &[self.id], Op::Mean)
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let out = ops::mean_axis_forward(&self.value(), axis)?;
        Ok(self.tape.record(out, &[self.id], Op::MeanAxis { axis }))
    }

    /// Mean over the batch of `-log softmax(logits)[label]` for `[B, C]` logits.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let (loss, probs) = ops::cross_entropy_forward(&self.value(), labels)?;
        Ok(self.tape.record(
            Tensor::scalar(loss),
            &[self.id],
            Op::CrossEntropy {
                labels: labels.to_vec(),
                probs,
            },
        ))
    }
}
