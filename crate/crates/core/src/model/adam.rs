//! Adam with bias correction. Moment buffers are keyed by parameter order,
//! which is stable for a given model configuration.

use serde::{Deserialize, Serialize};

use super::layers::ParamMut;
use crate::config::OptimSection;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64), eps: f64) -> Self {
        Adam {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_section(s: &OptimSection) -> Self {
        Adam::new(s.lr, (s.betas[0], s.betas[1]), s.eps)
    }

    /// Applies one update from the accumulated gradients. Fails without
    /// touching any parameter if a gradient is non-finite.
    pub fn step(&mut self, params: &mut [ParamMut<'_>]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        }
        debug_assert_eq!(self.m.len(), params.len());
        for p in params.iter() {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(CoreError::NonFiniteGradient {
                    name: p.name.to_string(),
                });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.value.len() {
                let g = p.grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p.value[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
