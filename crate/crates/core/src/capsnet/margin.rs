use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Hinge-squared loss on class capsule lengths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginLoss {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
}

impl Default for MarginLoss {
    fn default() -> Self {
        Self {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda: 0.5,
        }
    }
}

fn check_labels<T: Element>(lengths: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize)> {
    lengths.expect_rank(2, "margin_loss")?;
    let (j, m) = (lengths.dim(0), lengths.dim(1));
    if labels.len() != j {
        return Err(Error::shape(
            "margin_loss",
            format!("{} labels for {j} samples", labels.len()),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= m) {
        return Err(Error::LabelOutOfRange { label, classes: m });
    }
    Ok((j, m))
}

impl MarginLoss {
    /// `Σ_k T_k·max(0, m⁺−‖v_k‖)² + λ(1−T_k)·max(0, ‖v_k‖−m⁻)²`, summed over
    /// classes and averaged over the `J` samples of `lengths: [J, M]`.
    pub fn loss<T: Element>(&self, lengths: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        let (j, m) = check_labels(lengths, labels)?;
        let mut total = 0.0;
        for (row, &label) in lengths.data().chunks_exact(m).zip(labels) {
            for (k, &len) in row.iter().enumerate() {
                let len = len.as_f64();
                total += if k == label {
                    (self.m_plus - len).max(0.0).powi(2)
                } else {
                    self.lambda * (len - self.m_minus).max(0.0).powi(2)
                };
            }
        }
        Ok(total / j as f64)
    }

    /// Gradient of [`MarginLoss::loss`] with respect to `lengths`.
    pub fn gradient<T: Element>(&self, lengths: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
        let (j, m) = check_labels(lengths, labels)?;
        let scale = 1.0 / j as f64;
        let mut grad = Tensor::zeros(lengths.shape());
        for ((row, g), &label) in lengths
            .data()
            .chunks_exact(m)
            .zip(grad.data_mut().chunks_exact_mut(m))
            .zip(labels)
        {
            for (k, (&len, gk)) in row.iter().zip(g.iter_mut()).enumerate() {
                let len = len.as_f64();
                let d = if k == label {
                    -2.0 * (self.m_plus - len).max(0.0)
                } else {
                    2.0 * self.lambda * (len - self.m_minus).max(0.0)
                };
                *gk = T::from_f64_lossy(d * scale);
            }
        }
        Ok(grad)
    }
}

/// Margin loss with the default constants `m⁺ = 0.9`, `m⁻ = 0.1`, `λ = 0.5`.
pub fn margin_loss<T: Element>(lengths: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    MarginLoss::default().loss(lengths, labels)
}

/// Capsule lengths `[J, M]` of an instantiation tensor `[J, M, D]`.
pub fn lengths<T: Element>(caps: &Tensor<T>) -> Result<Tensor<T>> {
    caps.expect_rank(3, "lengths")?;
    let (j, m, d) = (caps.dim(0), caps.dim(1), caps.dim(2));
    let data = caps
        .data()
        .chunks_exact(d)
        .map(|v| v.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt())
        .collect();
    Tensor::new([j, m], data)
}

/// Gradient through [`lengths`]: `∂‖v‖/∂v = v/‖v‖`, taken as zero at `v = 0`.
pub fn lengths_backward<T: Element>(caps: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let len = lengths(caps)?;
    upstream.expect_same_shape(&len, "lengths_backward")?;
    let d = caps.dim(2);
    let mut grad = Tensor::zeros(caps.shape());
    for (((v, g), &n), &u) in caps
        .data()
        .chunks_exact(d)
        .zip(grad.data_mut().chunks_exact_mut(d))
        .zip(len.data())
        .zip(upstream.data())
    {
        if n > T::zero() {
            for (gk, &vk) in g.iter_mut().zip(v) {
                *gk = u * vk / n;
            }
        }
    }
    Ok(grad)
}

/// Predicted class per sample: the capsule with the greatest length, lowest
/// index on ties.
pub fn classify<T: Element>(caps: &Tensor<T>) -> Result<Vec<usize>> {
    let len = lengths(caps)?;
    Ok(argmax_rows(len.data(), len.dim(1)))
}

/// Index of the largest entry of each `width`-long row, lowest index on ties.
pub fn argmax_rows<T: PartialOrd + Copy>(data: &[T], width: usize) -> Vec<usize> {
    data.chunks_exact(width)
        .map(|row| {
            let mut best = 0;
            for (k, x) in row.iter().enumerate().skip(1) {
                if *x > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
