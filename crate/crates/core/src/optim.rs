//! Decoupled-weight-decay Adam and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// AdamW with bias-corrected moments and weight decay applied outside the
/// adaptive term: `theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`.
#[derive(Debug, Clone)]
pub struct AdamW<S> {
    pub beta1: S,
    pub beta2: S,
    pub epsilon: S,
    pub weight_decay: S,
    step_count: u64,
    first_moment: Vec<Vec<S>>,
    second_moment: Vec<Vec<S>>,
}

impl<S: Scalar> Default for AdamW<S> {
    fn default() -> Self {
        Self::new(S::from_f64(0.2))
    }
}

impl<S: Scalar> AdamW<S> {
    pub fn new(weight_decay: S) -> Self {
        AdamW {
            beta1: S::from_f64(0.9),
            beta2: S::from_f64(0.999),
            epsilon: S::from_f64(1e-8),
            weight_decay,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over `params`, reading each tensor's gradient slot.
    /// A missing or non-finite gradient refuses the whole step, leaving
    /// parameters and moments untouched.
    pub fn step(&mut self, params: &mut [(&'static str, &mut Tensor<S>)], lr: S) -> Result<()> {
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|(_, t)| vec![S::zero(); t.numel()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        if params.len() != self.first_moment.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer state tracks {} parameters, step got {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        for (i, (name, t)) in params.iter().enumerate() {
            let grad = t.grad().ok_or_else(|| {
                Error::InvalidArgument(format!("parameter `{name}` has no gradient"))
            })?;
            if grad.len() != self.first_moment[i].len() {
                return Err(Error::InvalidArgument(format!(
                    "parameter `{name}` changed size under the optimizer"
                )));
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of `{name}`; step refused"
                )));
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = S::one() - self.beta1.powi(t);
        let bias2 = S::one() - self.beta2.powi(t);
        let one = S::one();
        for (i, (_, tensor)) in params.iter_mut().enumerate() {
            let grad = tensor.grad().expect("validated above").to_vec();
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            let theta = tensor.data_mut();
            for j in 0..theta.len() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (one - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (one - self.beta2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                theta[j] = theta[j]
                    - lr * (m_hat / (v_hat.sqrt() + self.epsilon) + self.weight_decay * theta[j]);
            }
        }
        Ok(())
    }
}

/// `lr(e) = lr_min + 0.5 (lr_max - lr_min) (1 + cos(pi e / T))`, evaluated
/// once per epoch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CosineSchedule<S> {
    pub lr_max: S,
    pub lr_min: S,
    pub total_epochs: usize,
}

impl<S: Scalar> CosineSchedule<S> {
    /// Schedule decaying to zero over `total_epochs`.
    pub fn to_zero(lr_max: S, total_epochs: usize) -> Self {
        CosineSchedule {
            lr_max,
            lr_min: S::zero(),
            total_epochs,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> Result<S> {
        if self.total_epochs == 0 || epoch > self.total_epochs {
            return Err(Error::InvalidArgument(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        let half = S::from_f64(0.5);
        let progress = S::from_f64(epoch as f64 / self.total_epochs as f64);
        Ok(self.lr_min + half * (self.lr_max - self.lr_min) * (S::one() + (S::PI() * progress).cos()))
    }
}
