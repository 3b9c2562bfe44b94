use std::collections::BTreeMap;

use super::store::ParamStore;
use super::tensor::{Scalar, Tensor};
use super::NumericsError;

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Tensor<S>>,
    second: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has an entry in `grads`.
    ///
    /// Parameters missing from `grads` are left untouched (frozen).
    pub fn step(
        &mut self,
        params: &mut ParamStore<S>,
        grads: &BTreeMap<String, Tensor<S>>,
    ) -> Result<(), NumericsError> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| NumericsError::Contract(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(NumericsError::Dimension(format!(
                    "gradient for `{name}` has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        for (name, g) in grads {
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let p = params.get_mut(name).expect("checked above");
            for i in 0..g.numel() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (S::one() - b1) * gi;
                let vi = b2 * v.data()[i] + (S::one() - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi.as_f64() / bc1;
                let v_hat = vi.as_f64() / bc2;
                let update = self.lr * m_hat / (v_hat.sqrt() + self.eps);
                p.data_mut()[i] = S::of(p.data()[i].as_f64() - update);
            }
        }
        Ok(())
    }
}
