use std::collections::{BTreeMap, HashMap};

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Option<Tensor<S>>,
}

/// Every trainable tensor of one model, addressed by a dotted path such as
/// `relation.spatial.layer0.attn.head1.query`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<S> {
    params: Vec<Parameter<S>>,
    by_name: HashMap<String, ParamId>,
}

/// Sparse gradient map produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients<S> {
    pub(crate) by_param: BTreeMap<ParamId, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.by_param.get(&id)
    }

    pub fn merge(&mut self, other: Gradients<S>) {
        for (id, g) in other.by_param {
            match self.by_param.get_mut(&id) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.by_param.insert(id, g);
                }
            }
        }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Internal(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Adds a backward result into the grad slots. Parameters the pass did
    /// not reach receive an explicit zero gradient.
    pub fn accumulate(&mut self, grads: &Gradients<S>) {
        for (i, p) in self.params.iter_mut().enumerate() {
            let slot = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            if let Some(g) = grads.by_param.get(&ParamId(i)) {
                slot.add_assign(g);
            }
        }
    }

    /// Empties every grad slot; the next [`accumulate`](Self::accumulate)
    /// starts from zero.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}
