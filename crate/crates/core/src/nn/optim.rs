// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rectified Adam.
//!
//! Weight decay is the coupled L2 form: `g ← g + λθ` before the moment
//! updates, so its effect is scaled by the learning rate like any gradient.
//! When the variance of the adaptive rate is intractable (`ρ_t ≤ 4`) the
//! step falls back to bias-corrected momentum.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RAdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for RAdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl RAdamConfig {
    /// Maximum length of the approximated simple moving average.
    pub fn rho_inf(&self) -> f64 {
        2.0 / (1.0 - self.beta2) - 1.0
    }

    /// Length of the approximated SMA at (1-based) step `t`.
    pub fn rho(&self, t: u64) -> f64 {
        let b2t = self.beta2.powi(t as i32);
        self.rho_inf() - 2.0 * t as f64 * b2t / (1.0 - b2t)
    }

    /// Variance rectification term, `None` when `ρ_t ≤ 4`.
    pub fn rectification(&self, t: u64) -> Option<f64> {
        let rho = self.rho(t);
        if rho <= 4.0 {
            return None;
        }
        let ri = self.rho_inf();
        Some(((rho - 4.0) * (rho - 2.0) * ri / ((ri - 4.0) * (ri - 2.0) * rho)).sqrt())
    }
}

/// Optimizer state: step counter plus first/second moments per parameter.
#[derive(Clone, Debug)]
pub struct RAdam<F = f32> {
    pub config: RAdamConfig,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> RAdam<F> {
    pub fn new(config: RAdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every `(name, parameter)` using the gradient
    /// stored on each tensor. Parameters without a gradient are treated as
    /// having a zero gradient. The parameter list must keep the same order
    /// and shapes across calls.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor<F>)]) -> Result<()> {
        for (name, p) in params.iter() {
            if let Some(g) = p.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of parameter `{name}`")));
                }
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| vec![F::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step;
        let b1 = F::lit(c.beta1);
        let b2 = F::lit(c.beta2);
        let one = F::one();
        let lr = F::lit(c.lr);
        let wd = F::lit(c.weight_decay);
        let eps = F::lit(c.eps);
        let bias1 = F::lit(1.0 - c.beta1.powi(t as i32));
        let bias2_sqrt = F::lit((1.0 - c.beta2.powi(t as i32)).sqrt());
        let rect = c.rectification(t).map(F::lit);

        for (idx, (name, p)) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            if m.len() != p.len() {
                return Err(Error::Shape {
                    op: "radam",
                    expected: vec![m.len()],
                    actual: p.shape().to_vec(),
                });
            }
            let grad: Vec<F> = p.grad().map_or_else(|| vec![F::zero(); p.len()], <[F]>::to_vec);
            let data = p.data_mut();
            for i in 0..data.len() {
                let g = grad[i] + wd * data[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bias1;
                let upd = match rect {
                    Some(r) => m_hat * r * bias2_sqrt / (v[i].sqrt() + eps),
                    None => m_hat,
                };
                data[i] = data[i] - lr * upd;
            }
            if !data.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(format!("parameter `{name}` after update")));
            }
        }
        Ok(())
    }
}
