use super::params::ParamStore;
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub step: u64,
    pub first_moment: Vec<Tensor<S>>,
    pub second_moment: Vec<Tensor<S>>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl<S: Scalar> AdamState<S> {
    /// Fresh state with the usual defaults (0.9, 0.999, 1e-8).
    pub fn new(store: &ParamStore<S>, learning_rate: f64) -> Self {
        let zeros: Vec<Tensor<S>> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate,
        }
    }
}

/// One bias-corrected Adam update using the grad slots of `store`.
pub fn adam_step<S: Scalar>(store: &mut ParamStore<S>, state: &mut AdamState<S>) -> Result<()> {
    if state.first_moment.len() != store.len() || state.second_moment.len() != store.len() {
        return Err(Error::Usage(format!(
            "optimizer state tracks {} parameters, model has {}",
            state.first_moment.len(),
            store.len()
        )));
    }
    if let Some(p) = store.iter().find(|p| p.grad.is_none()) {
        return Err(Error::Usage(format!("missing gradient for parameter {}", p.name)));
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = S::lit(state.beta1);
    let b2 = S::lit(state.beta2);
    let one = S::one();
    let correction1 = one - S::lit(state.beta1.powi(t));
    let correction2 = one - S::lit(state.beta2.powi(t));
    let lr = S::lit(state.learning_rate);
    let eps = S::lit(state.epsilon);
    for ((param, m), v) in store
        .iter_mut()
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        let grad = param.grad.as_ref().expect("checked above");
        for (((w, &g), mi), vi) in param
            .value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (one - b1) * g;
            *vi = b2 * *vi + (one - b2) * g * g;
            let m_hat = *mi / correction1;
            let v_hat = *vi / correction2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
        if !param.value.is_finite() {
            return Err(Error::NonFinite { op: "adam_step" });
        }
    }
    Ok(())
}
