//! Gradient-based parameter updates over lists of parameter blocks.
//!
//! The same machinery drives training (descent) and unlearning (ascent); the
//! direction is a parameter of the step, not of the algorithm state. An
//! optional global-norm clip covers the clipped-ascent variant.

use crate::error::{Result, UlabError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Descent,
    Ascent,
}

#[derive(Debug, Clone)]
enum Algo {
    Sgd,
    Adam {
        beta1: f32,
        beta2: f32,
        eps: f32,
        // (first, second) moment per block, allocated on first step
        moments: Option<Vec<(Vec<f32>, Vec<f32>)>>,
    },
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    algo: Algo,
    lr: f32,
    step: u64,
    clip_norm: Option<f32>,
}

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

impl OptimizerState {
    pub fn sgd(lr: f32) -> Self {
        OptimizerState {
            algo: Algo::Sgd,
            lr,
            step: 0,
            clip_norm: None,
        }
    }

    pub fn adam(lr: f32) -> Self {
        OptimizerState {
            algo: Algo::Adam {
                beta1: ADAM_BETA1,
                beta2: ADAM_BETA2,
                eps: ADAM_EPS,
                moments: None,
            },
            lr,
            step: 0,
            clip_norm: None,
        }
    }

    pub fn with_clip(mut self, max_norm: f32) -> Self {
        self.clip_norm = Some(max_norm);
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f32 {
        self.lr
    }

    /// Apply one update. `params` and `grads` are parallel block lists.
    /// Non-finite gradients refuse the update and leave parameters untouched.
    pub fn step(
        &mut self,
        params: &mut [&mut [f32]],
        grads: &[Vec<f32>],
        direction: Direction,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(UlabError::shape(format!(
                "optimizer: {} parameter blocks vs {} gradient blocks",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(UlabError::shape(format!(
                    "optimizer: block size {} vs gradient size {}",
                    p.len(),
                    g.len()
                )));
            }
        }
        let mut sq_norm = 0.0f64;
        for g in grads {
            for &v in g {
                if !v.is_finite() {
                    return Err(UlabError::NonFinite {
                        op: "optimizer: gradient".into(),
                    });
                }
                sq_norm += (v as f64) * (v as f64);
            }
        }
        let clip_scale = match self.clip_norm {
            Some(max) => {
                let norm = sq_norm.sqrt() as f32;
                if norm > max && norm > 0.0 {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let dir = match direction {
            Direction::Descent => 1.0f32,
            Direction::Ascent => -1.0,
        };

        self.step += 1;
        match &mut self.algo {
            Algo::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, &gv) in p.iter_mut().zip(g) {
                        *pv -= self.lr * dir * clip_scale * gv;
                    }
                }
            }
            Algo::Adam { beta1, beta2, eps, moments } => {
                let moments = moments.get_or_insert_with(|| {
                    grads.iter().map(|g| (vec![0.0; g.len()], vec![0.0; g.len()])).collect()
                });
                if moments.len() != grads.len() || moments.iter().zip(grads).any(|(m, g)| m.0.len() != g.len()) {
                    return Err(UlabError::shape(
                        "optimizer: moment buffers do not match gradient blocks",
                    ));
                }
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(moments.iter_mut()) {
                    for i in 0..g.len() {
                        let gv = dir * clip_scale * g[i];
                        m[i] = *beta1 * m[i] + (1.0 - *beta1) * gv;
                        v[i] = *beta2 * v[i] + (1.0 - *beta2) * gv * gv;
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        p[i] -= self.lr * m_hat / (v_hat.sqrt() + *eps);
                    }
                }
            }
        }
        Ok(())
    }
}
