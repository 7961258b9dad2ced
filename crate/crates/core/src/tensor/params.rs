//! Named parameter groups shared between forward passes and the optimizer.

use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::adam::{adam_step, AdamHyper, AdamState};
use super::tape::{Gradients, Tape, Var};
use super::Tensor;

/// Index of a parameter within its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Owns the weight tensors of one model together with its Adam state.
///
/// Each training step binds the store onto a fresh tape (producing leaf
/// variables in registration order), builds the loss, runs backward and
/// feeds the matching gradients back through [`ParamStore::apply_grads`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    adam: AdamState,
}

/// Tape leaves for every parameter of a store, in registration order.
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new(hyper: AdamHyper) -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            adam: AdamState::new(hyper),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.adam.hyper.lr = lr;
    }

    /// Register every parameter as a differentiable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), true))
                .collect(),
        }
    }

    /// One Adam step from the gradients of a backward pass. Parameters the
    /// graph did not touch receive a zero gradient.
    pub fn apply_grads(&mut self, bound: &BoundParams<'_>, grads: &mut Gradients) -> Result<()> {
        let g: Vec<Tensor> = bound
            .vars
            .iter()
            .zip(&self.tensors)
            .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        adam_step(&self.names, &mut self.tensors, &g, &mut self.adam)
    }

    /// Flatten all parameters into one vector (used by gradient checking).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_scalars());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrite all parameters from a flat vector produced by `flatten`.
    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        debug_assert_eq!(off, flat.len());
    }
}
