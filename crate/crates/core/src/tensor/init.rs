use rand::Rng;

use super::{Element, Tensor};

/// Glorot/Xavier uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Tensor with elements drawn uniformly from `[-limit, limit)`.
pub fn uniform<T: Element, R: Rng + ?Sized>(shape: &[usize], limit: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(rng.random_range(-limit..limit)))
}
