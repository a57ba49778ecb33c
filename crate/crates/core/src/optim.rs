use std::collections::BTreeMap;

use crate::error::Result;
use crate::tensor::{Element, ParamStore, Tensor};

/// Adam with bias-corrected moment estimates. Moments are keyed by parameter
/// name, so one optimizer can serve several stores with distinct names.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    steps: BTreeMap<String, u64>,
    first: BTreeMap<String, Tensor<T>>,
    second: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Default for Adam<T> {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl<T: Element> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            steps: BTreeMap::new(),
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter of `params` from its accumulated
    /// gradient, then zeroes the gradients. `prefix` namespaces the moment
    /// estimates.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64, prefix: &str) -> Result<()> {
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let eps = T::from_f64_lossy(self.epsilon);
        for (name, p) in params.iter_mut() {
            let key = format!("{prefix}{name}");
            let t = self.steps.entry(key.clone()).or_insert(0);
            *t += 1;
            let t = *t as i32;
            let m = self.first.entry(key.clone()).or_insert_with(|| Tensor::zeros(p.value.shape()));
            let v = self.second.entry(key).or_insert_with(|| Tensor::zeros(p.value.shape()));
            let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
            let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
            let step = T::from_f64_lossy(lr);
            for (((w, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + one_b1 * g;
                *vi = b2 * *vi + one_b2 * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= step * m_hat / (v_hat.sqrt() + eps);
            }
            p.value.check_finite("adam")?;
            p.grad.fill(T::zero());
        }
        Ok(())
    }
}
