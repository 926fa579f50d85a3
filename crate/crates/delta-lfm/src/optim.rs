//! Adam optimizer with decoupled weight decay.
//!
//! Weight decay is applied directly to the parameters rather than folded
//! into the gradient, so the moment estimates track the loss gradient
//! alone. Update per step t, per tensor entry:
//!
//!   m = b1 m + (1 - b1) g          v = b2 v + (1 - b2) g^2
//!   p = p - lr (m_hat / (sqrt(v_hat) + eps) + wd p)
//!
//! with the usual bias corrections m_hat = m / (1 - b1^t),
//! v_hat = v / (1 - b2^t).

use serde::{Deserialize, Serialize};

use crate::error::{DlfmError, Result};
use crate::gradcore::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.01
}

impl OptimizerConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        OptimizerConfig {
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DlfmError::InvalidInput(format!(
                "learning rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(DlfmError::InvalidInput("optimizer betas must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(DlfmError::InvalidInput("weight decay must be nonnegative".into()));
        }
        Ok(())
    }
}

pub struct AdamW {
    cfg: OptimizerConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step_count: u64,
}

impl AdamW {
    /// Moment buffers are allocated to mirror the parameter list; every
    /// later `step` call must pass tensors of the same shapes in the same
    /// order.
    pub fn new(cfg: OptimizerConfig, params: &[&Tensor]) -> Result<Self> {
        cfg.validate()?;
        let m = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        let v = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        Ok(AdamW { cfg, m, v, step_count: 0 })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update. Missing gradients are treated as zero, so the
    /// parameter still decays. Errors on shape drift or non-finite math.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<Tensor>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(DlfmError::InvalidInput(format!(
                "optimizer built for {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - self.cfg.beta1.powi(t);
        let bias2 = 1.0 - self.cfg.beta2.powi(t);

        for (idx, param) in params.iter_mut().enumerate() {
            if param.shape() != self.m[idx].shape() {
                return Err(DlfmError::ShapeMismatch {
                    op: "AdamW::step",
                    detail: format!("tensor {} changed shape", idx),
                });
            }
            let zero;
            let grad = match &grads[idx] {
                Some(g) => {
                    if g.shape() != param.shape() {
                        return Err(DlfmError::ShapeMismatch {
                            op: "AdamW::step",
                            detail: format!("gradient {} has shape {:?}", idx, g.shape()),
                        });
                    }
                    g
                }
                None => {
                    zero = Tensor::zeros(param.rows(), param.cols());
                    &zero
                }
            };

            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let p = param.data_mut();
            for i in 0..p.len() {
                let g = grad.data()[i];
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= self.cfg.learning_rate
                    * (m_hat / (v_hat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * p[i]);
                if !p[i].is_finite() {
                    return Err(DlfmError::NonFinite { op: "AdamW::step" });
                }
            }
        }
        Ok(())
    }
}
