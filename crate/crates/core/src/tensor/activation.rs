use super::{Element, Tensor};
use crate::error::Result;

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of [`relu`], given the forward input.
pub fn relu_backward<T: Element>(upstream: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    upstream.zip_map(input, "relu_backward", |g, x| if x > T::zero() { g } else { T::zero() })
}

pub fn sigmoid<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Gradient of [`sigmoid`], given the forward *output*.
pub fn sigmoid_backward<T: Element>(upstream: &Tensor<T>, output: &Tensor<T>) -> Result<Tensor<T>> {
    upstream.zip_map(output, "sigmoid_backward", |g, y| g * y * (T::one() - y))
}
