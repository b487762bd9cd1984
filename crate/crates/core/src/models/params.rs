use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// An ordered, named collection of learnable tensors. Layers refer to their
/// tensors by [`ParamId`], which is the insertion index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Param { name, value, decay });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.entries[id]
    }

    pub fn index_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name)
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    /// Replaces every value with the one of the same name in `other`. Names and
    /// shapes must match one to one.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::validation(format!(
                "parameter count mismatch: expected {}, found {}",
                self.len(),
                other.len()
            )));
        }
        for p in &mut self.entries {
            let src = other
                .index_of(&p.name)
                .ok_or_else(|| Error::validation(format!("missing parameter {}", p.name)))?;
            let src = &other.entries[src].value;
            if src.shape() != p.value.shape() {
                return Err(Error::shape("load parameter", p.value.shape(), src.shape()));
            }
            p.value = src.clone();
        }
        Ok(())
    }

    /// Records every tensor on `tape`, as trainable leaves or constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|p| tape.leaf(p.value.clone(), trainable))
                .collect(),
        }
    }

    /// Zero tensors shaped like every parameter.
    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.entries.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect()
    }
}

/// A [`ParamSet`] recorded on a tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradients of `loss` with respect to every bound parameter, in order.
    pub fn gradients(&self, loss: &Var<'t>) -> Result<Vec<Tensor>> {
        loss.tape().gradients(loss, &self.vars)
    }
}

/// Elementwise `acc += scale · g` over matching parameter lists.
pub fn accumulate(acc: &mut [Tensor], grads: &[Tensor], scale: f64) {
    for (a, g) in acc.iter_mut().zip(grads) {
        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
            *x += scale * y;
        }
    }
}
