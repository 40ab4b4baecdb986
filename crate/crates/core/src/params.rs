//! Named parameter arrays and their binding onto an autodiff tape.

use fsfg_autograd::{Gradients, Graph, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

/// Ordered registry of every differentiable array in a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Fan-in scaled uniform initialization in `[-1/√fan_in, 1/√fan_in]`.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut Rng) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound));
        self.add(name, t)
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Ids whose names start with `prefix`.
    pub fn group(&self, prefix: &str) -> Vec<ParamId> {
        (0..self.len()).filter(|&i| self.names[i].starts_with(prefix)).map(ParamId).collect()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every array as a differentiable leaf.
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| graph.param(t.clone())).collect()
    }

    /// Gradients for every array (zeros where the loss does not depend on it).
    pub fn collect_grads(&self, grads: &Gradients, vars: &[Var]) -> Vec<Tensor> {
        vars.iter()
            .zip(&self.tensors)
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    /// Replaces values from `(name, tensor)` pairs; names and shapes must match
    /// this store exactly.
    pub fn load(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} arrays, model expects {}",
                named.len(),
                self.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != self.names[i] || t.shape() != self.tensors[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "array {i}: checkpoint has {name} {:?}, model expects {} {:?}",
                    t.shape(),
                    self.names[i],
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = t;
        }
        Ok(())
    }
}

/// Parameter handles resolved on one tape.
#[derive(Clone, Copy)]
pub struct Bound<'a> {
    pub vars: &'a [Var],
}

impl Bound<'_> {
    #[inline]
    pub fn at(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}
