//! Variance-ranked, capped perturbation of instantiation parameters.
//!
//! All functions take class-masked capsules `[J, M, D]` with labels; only the
//! block at each sample's own label is read or written.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-class perturbation bounds and their cross-class averages.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCaps {
    /// Half the range of each parameter within each class, `[M, D]`.
    pub tau_mk: Tensor<f64>,
    /// Mean of `tau_mk` over classes, `[D]`.
    pub tau_k: Tensor<f64>,
}

fn dims(masked: &Tensor<f64>, labels: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    masked.expect_rank(3, op)?;
    let (j, m, d) = (masked.dim(0), masked.dim(1), masked.dim(2));
    if labels.len() != j {
        return Err(Error::shape(op, format!("{} labels for {j} samples", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= m) {
        return Err(Error::LabelOutOfRange { label, classes: m });
    }
    Ok((j, m, d))
}

/// The true-class vectors of class `m`, in sample order.
fn class_rows<'a>(masked: &'a Tensor<f64>, labels: &'a [usize], m: usize) -> impl Iterator<Item = &'a [f64]> + 'a {
    let (classes, d) = (masked.dim(1), masked.dim(2));
    labels
        .iter()
        .enumerate()
        .filter(move |(_, &l)| l == m)
        .map(move |(j, _)| &masked.data()[(j * classes + m) * d..(j * classes + m + 1) * d])
}

fn require(found: usize, needed: usize, class: usize) -> Result<()> {
    if found < needed {
        return Err(Error::InsufficientClassSamples { class, found, needed });
    }
    Ok(())
}

/// Population variance of every parameter over each class's samples, `[M, D]`.
pub fn class_variance(masked: &Tensor<f64>, labels: &[usize]) -> Result<Tensor<f64>> {
    let (_, classes, d) = dims(masked, labels, "class_variance")?;
    let mut out = Tensor::zeros([classes, d]);
    for m in 0..classes {
        let count = class_rows(masked, labels, m).count();
        require(count, 2, m)?;
        let n = count as f64;
        let row = &mut out.data_mut()[m * d..(m + 1) * d];
        for (k, var) in row.iter_mut().enumerate() {
            let mean = class_rows(masked, labels, m).fold(0.0, |acc, r| acc + r[k]) / n;
            *var = class_rows(masked, labels, m).fold(0.0, |acc, r| acc + (r[k] - mean) * (r[k] - mean)) / n;
        }
    }
    Ok(out)
}

/// For each class, the index of the `(a+1)`-th largest variance, lower index
/// first among equal variances.
pub fn pick_param(sigma: &Tensor<f64>, a: usize) -> Result<Vec<usize>> {
    sigma.expect_rank(2, "pick_param")?;
    let d = sigma.dim(1);
    if a >= d {
        return Err(Error::InvalidArgument(format!("variance rank {a} out of range for {d} parameters")));
    }
    Ok(sigma
        .data()
        .chunks_exact(d)
        .map(|row| {
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&x, &y| row[y].total_cmp(&row[x]));
            order[a]
        })
        .collect())
}

pub fn noise_caps(masked: &Tensor<f64>, labels: &[usize]) -> Result<NoiseCaps> {
    let (_, classes, d) = dims(masked, labels, "noise_caps")?;
    let mut tau_mk = Tensor::zeros([classes, d]);
    for m in 0..classes {
        require(class_rows(masked, labels, m).count(), 1, m)?;
        for k in 0..d {
            let (lo, hi) = class_rows(masked, labels, m).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                (lo.min(r[k]), hi.max(r[k]))
            });
            tau_mk.data_mut()[m * d + k] = (hi - lo) / 2.0;
        }
    }
    let tau_k = Tensor::from_fn([d], |k| (0..classes).fold(0.0, |acc, m| acc + tau_mk.data()[m * d + k]) / classes as f64);
    Ok(NoiseCaps { tau_mk, tau_k })
}

/// Moves one parameter of each sample's true-class vector: `k_hat[label]` is
/// shifted by `min(τ_{m,k̂}, τ_k̂)`, upward if it is positive and downward
/// otherwise. `scale` optionally draws a factor in `(0, 1]` per sample.
pub fn perturb_params<R: Rng + ?Sized>(
    masked: &Tensor<f64>,
    labels: &[usize],
    k_hat: &[usize],
    caps: &NoiseCaps,
    mut scale: Option<&mut R>,
) -> Result<Tensor<f64>> {
    let (_, classes, d) = dims(masked, labels, "perturb")?;
    caps.tau_mk.expect_shape(&[classes, d], "perturb")?;
    caps.tau_k.expect_shape(&[d], "perturb")?;
    if k_hat.len() != classes || k_hat.iter().any(|&k| k >= d) {
        return Err(Error::shape("perturb", format!("k_hat {k_hat:?} for {classes} classes of dim {d}")));
    }
    let mut out = masked.clone();
    for (j, &m) in labels.iter().enumerate() {
        let k = k_hat[m];
        let mut delta = caps.tau_mk.data()[m * d + k].min(caps.tau_k.data()[k]);
        if let Some(rng) = scale.as_deref_mut() {
            delta *= 1.0 - rng.random::<f64>();
        }
        let v = &mut out.data_mut()[(j * classes + m) * d + k];
        if *v > 0.0 {
            *v += delta;
        } else {
            *v -= delta;
        }
    }
    Ok(out)
}

/// Algorithm 1 for variance rank `a`, without random scaling.
pub fn perturb(masked: &Tensor<f64>, labels: &[usize], a: usize, caps: &NoiseCaps) -> Result<Tensor<f64>> {
    let k_hat = pick_param(&class_variance(masked, labels)?, a)?;
    perturb_params::<rand_chacha::ChaCha8Rng>(masked, labels, &k_hat, caps, None)
}
