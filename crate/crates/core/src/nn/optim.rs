use serde::{Deserialize, Serialize};

use super::param::{Group, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Plain SGD with the poly learning-rate decay.
    SgdPoly,
    Adam,
    /// Adam whose step size follows the poly decay.
    AdamPoly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub poly_power: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Iteration budget for the poly schedule.
    pub max_iterations: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            poly_power: 0.9,
            betas: (0.9, 0.99),
            eps: 1e-8,
            max_iterations: 1,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            lr,
            ..Default::default()
        }
    }

    /// Adam whose step size follows the poly decay.
    pub fn adam_poly(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::AdamPoly,
            lr,
            ..Default::default()
        }
    }

    pub fn sgd_poly(lr: f64, max_iterations: usize) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::SgdPoly,
            lr,
            max_iterations,
            ..Default::default()
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(
                format!("{field}.lr"),
                "learning rate must be > 0",
            ));
        }
        if !(self.poly_power > 0.0) {
            return Err(Error::config(format!("{field}.poly_power"), "must be > 0"));
        }
        let (b1, b2) = self.betas;
        if !(b1 > 0.0 && b1 < 1.0 && b2 > 0.0 && b2 < 1.0) {
            return Err(Error::config(
                format!("{field}.betas"),
                "betas must lie in (0, 1)",
            ));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(format!("{field}.eps"), "must be > 0"));
        }
        if self.max_iterations == 0 {
            return Err(Error::config(
                format!("{field}.max_iterations"),
                "must be >= 1",
            ));
        }
        Ok(())
    }

    /// `lr · (1 − i/max)^power`.
    pub fn poly_lr(&self, iteration: usize) -> Result<f64> {
        if iteration >= self.max_iterations {
            return Err(Error::invalid(format!(
                "iteration {iteration} outside poly schedule of {} iterations",
                self.max_iterations
            )));
        }
        let frac = iteration as f64 / self.max_iterations as f64;
        Ok(self.lr * (1.0 - frac).powf(self.poly_power))
    }
}

/// Applies one update to every parameter in `group` using its current grad.
/// Gradients are left in place.
pub fn step(
    store: &mut ParamStore,
    group: Group,
    config: &OptimizerConfig,
    iteration: usize,
) -> Result<()> {
    match config.kind {
        OptimizerKind::SgdPoly => {
            let lr = config.poly_lr(iteration)?;
            for p in store.iter_mut().filter(|p| p.group == group) {
                let grad = p.grad.clone();
                p.value.add_scaled(&grad, -lr);
            }
        }
        OptimizerKind::Adam | OptimizerKind::AdamPoly => {
            let lr = if config.kind == OptimizerKind::AdamPoly {
                config.poly_lr(iteration)?
            } else {
                config.lr
            };
            let (b1, b2) = config.betas;
            let t = iteration as i32 + 1;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            for p in store.iter_mut().filter(|p| p.group == group) {
                let g = p.grad.data();
                let m = p.m.data_mut();
                for (mi, &gi) in m.iter_mut().zip(g) {
                    *mi = b1 * *mi + (1.0 - b1) * gi;
                }
                let v = p.v.data_mut();
                for (vi, &gi) in v.iter_mut().zip(g) {
                    *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                }
                let (m, v) = (p.m.data(), p.v.data());
                let w = p.value.data_mut();
                for ((wi, &mi), &vi) in w.iter_mut().zip(m).zip(v) {
                    let mh = mi / c1;
                    let vh = vi / c2;
                    *wi -= lr * mh / (vh.sqrt() + config.eps);
                }
            }
        }
    }
    Ok(())
}
