use candle_core::{backprop::GradStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::networks::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
        }
    }
}

/// Adam over one parameter group; moment buffers are checkpointable.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Result<Self> {
        let zeros = params
            .vars()
            .iter()
            .map(|v| v.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// Applies one update. Parameters without a gradient are left as is.
    pub fn apply(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
            grad_clip,
        } = self.config;
        let gs: Vec<Option<Tensor>> = params
            .vars()
            .iter()
            .map(|v| grads.get(v).map(Tensor::detach))
            .collect();
        let clip_scale = match grad_clip {
            Some(max_norm) => {
                let mut sq = 0.0f64;
                for g in gs.iter().flatten() {
                    sq += crate::tensor_util::scalar(&g.sqr()?.sum_all()?)?;
                }
                let norm = sq.sqrt();
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (var, g)) in params.vars().iter().zip(gs).enumerate() {
            let Some(g) = g else { continue };
            let g = if clip_scale != 1.0 { g.affine(clip_scale, 0.0)? } else { g };
            let m = (self.m[i].affine(beta1, 0.0)? + g.affine(1.0 - beta1, 0.0)?)?;
            let v = (self.v[i].affine(beta2, 0.0)? + g.sqr()?.affine(1.0 - beta2, 0.0)?)?;
            let denom = (v.affine(1.0 / bc2, 0.0)?.sqrt()? + eps)?;
            let update = m.affine(learning_rate / bc1, 0.0)?.div(&denom)?;
            var.set(&(var.as_tensor() - update)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }
}
