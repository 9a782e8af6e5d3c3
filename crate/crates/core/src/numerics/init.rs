use rand::Rng;

use super::scalar::Scalar;
use super::tensor::Tensor;

/// Glorot-uniform weights, `U(±sqrt(6/(fan_in+fan_out)))`.
pub fn xavier_uniform<S: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<S> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| S::lit(rng.gen_range(-bound..bound)))
}

pub fn zeros<S: Scalar>(shape: &[usize]) -> Tensor<S> {
    Tensor::zeros(shape)
}

pub fn ones<S: Scalar>(shape: &[usize]) -> Tensor<S> {
    Tensor::full(shape, S::one())
}
