use serde::{Deserialize, Serialize};

use super::mlp::{Gradients, Mlp};
use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    /// Coupled L2 penalty: `l2 * theta` is added to every gradient.
    pub l2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { algorithm: Algorithm::Adam, l2: 0.0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn sgd() -> Self {
        OptimizerConfig { algorithm: Algorithm::Sgd, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.l2 >= 0.0 && self.l2.is_finite(), Config, "l2 penalty {} must be >= 0", self.l2);
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            Config,
            "adam betas must lie in [0, 1)"
        );
        ensure!(self.eps > 0.0, Config, "adam eps must be positive");
        Ok(())
    }
}

/// Optimizer state for one network. Moment buffers follow the order of
/// [`Mlp::param_slices`]; batch-norm running statistics are never touched.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, lr: f64) -> Result<Self> {
        ensure!(lr >= 0.0 && lr.is_finite(), Config, "learning rate {lr} must be >= 0");
        config.validate()?;
        Ok(Optimizer { config, lr, step: 0, m: Vec::new(), v: Vec::new() })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut Mlp, grads: &Gradients) -> Result<()> {
        let g_slices = grads.slices();
        let mut p_slices = params.param_slices_mut();
        ensure!(
            g_slices.len() == p_slices.len()
                && g_slices.iter().zip(&p_slices).all(|(g, p)| g.len() == p.len()),
            Shape,
            "gradients are not congruent with parameters"
        );
        let c = self.config;
        self.step += 1;
        match c.algorithm {
            Algorithm::Sgd => {
                for (p, g) in p_slices.iter_mut().zip(&g_slices) {
                    for (pi, gi) in p.iter_mut().zip(g.iter()) {
                        *pi -= self.lr * (gi + c.l2 * *pi);
                    }
                }
            }
            Algorithm::Adam => {
                if self.m.is_empty() {
                    self.m = g_slices.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.v = self.m.clone();
                }
                let t = self.step as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                for (((p, g), m), v) in
                    p_slices.iter_mut().zip(&g_slices).zip(&mut self.m).zip(&mut self.v)
                {
                    for i in 0..p.len() {
                        let gi = g[i] + c.l2 * p[i];
                        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        p[i] -= self.lr * m_hat / (v_hat.sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
