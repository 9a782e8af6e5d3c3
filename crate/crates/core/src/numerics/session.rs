use super::params::{ParamId, ParamStore};
use super::scalar::Scalar;
use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Row-stochastic attention weights captured during a forward pass.
#[derive(Debug, Clone)]
pub struct AttentionRecord<S> {
    pub label: String,
    pub weights: Tensor<S>,
}

/// One forward pass: a fresh tape over read-only parameters, plus an
/// optional capture of every attention matrix computed along the way.
pub struct Session<'p, S> {
    pub tape: Tape<S>,
    params: &'p ParamStore<S>,
    capture: Option<Vec<AttentionRecord<S>>>,
    scope: Vec<String>,
}

impl<'p, S: Scalar> Session<'p, S> {
    pub fn new(params: &'p ParamStore<S>) -> Self {
        Session {
            tape: Tape::new(),
            params,
            capture: None,
            scope: Vec::new(),
        }
    }

    pub fn with_capture(params: &'p ParamStore<S>) -> Self {
        Session {
            capture: Some(Vec::new()),
            ..Self::new(params)
        }
    }

    pub fn params(&self) -> &'p ParamStore<S> {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        self.tape.value(v)
    }

    pub fn capturing(&self) -> bool {
        self.capture.is_some()
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.scope.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
    }

    pub(crate) fn record_attention(&mut self, leaf: &str, weights: Var) {
        if let Some(records) = self.capture.as_mut() {
            let mut label = self.scope.join(".");
            if !label.is_empty() {
                label.push('.');
            }
            label.push_str(leaf);
            records.push(AttentionRecord {
                label,
                weights: self.tape.value(weights).clone(),
            });
        }
    }

    pub fn take_attention(&mut self) -> Vec<AttentionRecord<S>> {
        self.capture.take().unwrap_or_default()
    }
}
