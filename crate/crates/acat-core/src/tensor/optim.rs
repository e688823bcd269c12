//! First-order optimizers over parameter tensors. Parameters are leaves;
//! `step` validates that every parameter has a gradient, applies the update
//! rule, then clears the gradients.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Result, Tensor, TensorError};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerRule {
    /// `v = momentum * v + g; p = p - lr * v`. Plain SGD at momentum 0.
    Sgd { momentum: f32 },
    /// Adam with bias correction.
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

struct Slot {
    m: Vec<f32>,
    v: Vec<f32>,
}

pub struct Optimizer {
    rule: OptimizerRule,
    lr: f32,
    t: u64,
    slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(rule: OptimizerRule, lr: f32) -> Optimizer {
        Optimizer {
            rule,
            lr,
            t: 0,
            slots: Vec::new(),
        }
    }

    pub fn sgd(lr: f32, momentum: f32) -> Optimizer {
        Self::new(OptimizerRule::Sgd { momentum }, lr)
    }

    /// Adam with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8).
    pub fn adam(lr: f32) -> Optimizer {
        Self::new(
            OptimizerRule::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr,
        )
    }

    pub fn learning_rate(&self) -> f32 {
        self.lr
    }

    /// Apply one update across `params`. The slice must be the same set, in
    /// the same order, on every call.
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if self.slots.is_empty() && !params.is_empty() {
            self.slots = params
                .iter()
                .map(|p| Slot {
                    m: vec![0.0; p.numel()],
                    v: vec![0.0; p.numel()],
                })
                .collect();
        }
        if self.slots.len() != params.len() {
            return Err(TensorError::Invalid {
                op: "optimizer_step",
                message: format!(
                    "parameter count changed: {} slots, {} params",
                    self.slots.len(),
                    params.len()
                ),
            });
        }
        // Validate everything up front so a failed step leaves no partial
        // update behind.
        let mut grads: Vec<Vec<f32>> = Vec::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            let g = p.grad().ok_or_else(|| TensorError::MissingGrad {
                message: format!("parameter {i} (shape {:?}) has no gradient", p.shape()),
            })?;
            if g.len() != self.slots[i].m.len() {
                return Err(TensorError::Shape {
                    op: "optimizer_step",
                    message: format!("parameter {i} changed shape since the first step"),
                });
            }
            grads.push(g);
        }
        self.t += 1;
        for ((p, g), slot) in params.iter().zip(&grads).zip(&mut self.slots) {
            let mut data = p.to_vec();
            match self.rule {
                OptimizerRule::Sgd { momentum } => {
                    for i in 0..data.len() {
                        slot.m[i] = momentum * slot.m[i] + g[i];
                        data[i] -= self.lr * slot.m[i];
                    }
                }
                OptimizerRule::Adam { beta1, beta2, eps } => {
                    let bc1 = 1.0 - math::powi(beta1, self.t as i32);
                    let bc2 = 1.0 - math::powi(beta2, self.t as i32);
                    for i in 0..data.len() {
                        slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g[i];
                        slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g[i] * g[i];
                        let mhat = slot.m[i] / bc1;
                        let vhat = slot.v[i] / bc2;
                        data[i] -= self.lr * mhat / (math::sqrt(vhat) + eps);
                    }
                }
            }
            p.replace_data(data);
        }
        for p in params {
            p.clear_grad();
        }
        Ok(())
    }
}
