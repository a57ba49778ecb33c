//! Central finite-difference verification of analytic gradients.

use super::Tensor;
use crate::error::{Error, Result};

/// A scalar function of a tensor together with its analytic gradient.
pub trait Objective {
    fn value(&self, x: &Tensor<f64>) -> Result<f64>;
    fn gradient(&self, x: &Tensor<f64>) -> Result<Tensor<f64>>;
}

struct FnObjective<V, G> {
    value: V,
    gradient: G,
}

impl<V, G> Objective for FnObjective<V, G>
where
    V: Fn(&Tensor<f64>) -> Result<f64>,
    G: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    fn value(&self, x: &Tensor<f64>) -> Result<f64> {
        (self.value)(x)
    }

    fn gradient(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        (self.gradient)(x)
    }
}

/// Builds an [`Objective`] from a value closure and a gradient closure.
pub fn objective<V, G>(value: V, gradient: G) -> impl Objective
where
    V: Fn(&Tensor<f64>) -> Result<f64>,
    G: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    FnObjective { value, gradient }
}

/// Reduces a tensor-valued op to the scalar `⟨forward(x), projection⟩`; its
/// gradient is `backward(x, projection)`.
pub fn projected<F, B>(forward: F, backward: B, projection: Tensor<f64>) -> impl Objective
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
    B: Fn(&Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
{
    let r = projection.clone();
    objective(
        move |x| forward(x)?.dot(&projection),
        move |x| backward(x, &r),
    )
}

/// Maximum over elements of `|analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`
/// where `numeric` is the central difference with the given step.
pub fn grad_check(op: &impl Objective, input: &Tensor<f64>, step: f64) -> Result<f64> {
    if !(1e-6..=1e-4).contains(&step) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {step} outside [1e-6, 1e-4]"
        )));
    }
    input.check_finite("grad_check input")?;
    let analytic = op.gradient(input)?;
    analytic.expect_same_shape(input, "grad_check")?;
    analytic.check_finite("grad_check analytic gradient")?;

    let mut probe = input.clone();
    let mut worst = 0.0f64;
    for i in 0..input.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = op.value(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = op.value(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
