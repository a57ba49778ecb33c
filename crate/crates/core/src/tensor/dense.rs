use super::linalg::matmul;
use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

fn check<T: Element>(input: &Tensor<T>, weights: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    input.expect_rank(2, op)?;
    weights.expect_rank(2, op)?;
    let (n, din) = (input.dim(0), input.dim(1));
    if weights.dim(0) != din {
        return Err(Error::shape(
            op,
            format!("input width {din} does not match weight rows {}", weights.dim(0)),
        ));
    }
    Ok((n, din, weights.dim(1)))
}

/// Affine map `[N, Din] · [Din, Dout] + bias`.
pub fn dense<T: Element>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, din, dout) = check(input, weights, "dense")?;
    bias.expect_shape(&[dout], "dense")?;
    let mut out = Tensor::zeros([n, dout]);
    matmul(input.data(), false, weights.data(), false, out.data_mut(), n, din, dout, false);
    for row in out.data_mut().chunks_exact_mut(dout) {
        for (x, &b) in row.iter_mut().zip(bias.data()) {
            *x += b;
        }
    }
    out.checked("dense")
}

pub fn dense_backward<T: Element>(
    upstream: &Tensor<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    const OP: &str = "dense_backward";
    let (n, din, dout) = check(input, weights, OP)?;
    upstream.expect_shape(&[n, dout], OP)?;
    let mut grad_input = Tensor::zeros([n, din]);
    matmul(upstream.data(), false, weights.data(), true, grad_input.data_mut(), n, dout, din, false);
    let mut grad_weights = Tensor::zeros([din, dout]);
    matmul(input.data(), true, upstream.data(), false, grad_weights.data_mut(), din, n, dout, false);
    let mut grad_bias = Tensor::zeros([dout]);
    for row in upstream.data().chunks_exact(dout) {
        for (gb, &g) in grad_bias.data_mut().iter_mut().zip(row) {
            *gb += g;
        }
    }
    Ok(DenseGrads {
        input: grad_input.checked(OP)?,
        weights: grad_weights.checked(OP)?,
        bias: grad_bias.checked(OP)?,
    })
}
