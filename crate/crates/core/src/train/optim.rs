//! Optimizer configuration and per-parameter step computation. SGD is the
//! deployment optimizer (momentum-free by default); Adam and LARS sit behind
//! the same interface for comparison runs, with fp32 statistics buffers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::TensorId;
use crate::qtensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum OptimKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Lars { trust: f64 },
}

impl Default for OptimKind {
    fn default() -> Self {
        OptimKind::Sgd
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "schedule")]
pub enum LrSchedule {
    Constant,
    CosineWarmup { warmup_epochs: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub schedule: LrSchedule,
    /// Momentum coefficient; 0 disables the buffer entirely.
    pub momentum: f64,
    pub qas_enabled: bool,
    pub grad_accumulation_steps: usize,
    pub weight_decay: f64,
    pub kind: OptimKind,
    pub epochs: usize,
    /// Per-tensor L2 cap on the real-unit gradient; None disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.05,
            schedule: LrSchedule::Constant,
            momentum: 0.0,
            qas_enabled: true,
            grad_accumulation_steps: 1,
            weight_decay: 0.0,
            kind: OptimKind::Sgd,
            epochs: 10,
            grad_clip: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if self.grad_accumulation_steps < 1 {
            return Err(Error::Config("accumulation steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Learning rate at a given step of the run.
    pub fn lr_at(&self, step: u64, steps_per_epoch: u64) -> f64 {
        let total = (self.epochs as u64 * steps_per_epoch).max(1);
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::CosineWarmup { warmup_epochs } => {
                let warmup = warmup_epochs as u64 * steps_per_epoch;
                if warmup > 0 && step < warmup {
                    self.lr * (step + 1) as f64 / warmup as f64
                } else {
                    let progress = (step - warmup) as f64 / (total - warmup).max(1) as f64;
                    self.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
                }
            }
        }
    }
}

/// fp32 statistics buffers, keyed by parameter tensor.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OptState {
    pub momentum: BTreeMap<u32, Vec<f64>>,
    pub adam_m: BTreeMap<u32, Vec<f64>>,
    pub adam_v: BTreeMap<u32, Vec<f64>>,
    pub t: u64,
}

/// Turn a (QAS-scaled, weight-decayed) mean gradient into the real-unit step
/// subtracted from the parameter.
pub fn compute_step(
    cfg: &OptimizerConfig,
    state: &mut OptState,
    param_id: TensorId,
    param: &Tensor,
    grad: &[f64],
    lr: f64,
) -> Vec<f64> {
    let mut g: Vec<f64> = grad.to_vec();

    if cfg.weight_decay != 0.0 {
        let decay = cfg.weight_decay;
        match param {
            Tensor::Float(f) => {
                for (gi, &w) in g.iter_mut().zip(&f.values) {
                    *gi += decay * w as f64;
                }
            }
            Tensor::Quant(q) => {
                for (i, gi) in g.iter_mut().enumerate() {
                    *gi += decay * q.real(i) as f64;
                }
            }
        }
    }

    match cfg.kind {
        OptimKind::Sgd => {
            if cfg.momentum != 0.0 {
                let buf = state
                    .momentum
                    .entry(param_id.0)
                    .or_insert_with(|| vec![0.0; g.len()]);
                for (b, gi) in buf.iter_mut().zip(&mut g) {
                    *b = cfg.momentum * *b + *gi;
                    *gi = *b;
                }
            }
            g.iter().map(|&v| lr * v).collect()
        }
        OptimKind::Adam { beta1, beta2, eps } => {
            let t = state.t + 1;
            let m = state
                .adam_m
                .entry(param_id.0)
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = state
                .adam_v
                .entry(param_id.0)
                .or_insert_with(|| vec![0.0; g.len()]);
            let bc1 = 1.0 - beta1.powi(t as i32);
            let bc2 = 1.0 - beta2.powi(t as i32);
            let mut step = Vec::with_capacity(g.len());
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                step.push(lr * mh / (vh.sqrt() + eps));
            }
            step
        }
        OptimKind::Lars { trust } => {
            let wnorm = match param {
                Tensor::Float(f) => f.values.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt(),
                Tensor::Quant(q) => (0..q.data.len())
                    .map(|i| (q.real(i) as f64).powi(2))
                    .sum::<f64>()
                    .sqrt(),
            };
            let gnorm = g.iter().map(|&v| v * v).sum::<f64>().sqrt();
            let ratio = if wnorm > 0.0 && gnorm > 0.0 {
                trust * wnorm / gnorm
            } else {
                1.0
            };
            g.iter().map(|&v| lr * ratio * v).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qtensor::{FloatTensor, Shape};

    fn fparam(vals: Vec<f32>) -> Tensor {
        let n = vals.len();
        Tensor::Float(FloatTensor::new(Shape::new(&[n]).unwrap(), vals).unwrap())
    }

    #[test]
    fn sgd_without_momentum_is_plain_scaling() {
        let cfg = OptimizerConfig::default();
        let mut st = OptState::default();
        let step = compute_step(&cfg, &mut st, TensorId(0), &fparam(vec![1.0]), &[2.0], 0.5);
        assert_eq!(step, vec![1.0]);
        assert!(st.momentum.is_empty());
    }

    #[test]
    fn momentum_accumulates() {
        let cfg = OptimizerConfig {
            momentum: 0.9,
            ..Default::default()
        };
        let mut st = OptState::default();
        let p = fparam(vec![1.0]);
        let s1 = compute_step(&cfg, &mut st, TensorId(0), &p, &[1.0], 1.0);
        let s2 = compute_step(&cfg, &mut st, TensorId(0), &p, &[1.0], 1.0);
        assert_eq!(s1, vec![1.0]);
        assert!((s2[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let cfg = OptimizerConfig {
            kind: OptimKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            ..Default::default()
        };
        let mut st = OptState::default();
        let step = compute_step(&cfg, &mut st, TensorId(0), &fparam(vec![0.0]), &[0.3], 0.01);
        // bias-corrected first Adam step approaches lr * sign(g)
        assert!((step[0] - 0.01).abs() < 1e-4, "{}", step[0]);
    }

    #[test]
    fn cosine_schedule_warms_up_then_decays() {
        let cfg = OptimizerConfig {
            lr: 1.0,
            schedule: LrSchedule::CosineWarmup { warmup_epochs: 1 },
            epochs: 3,
            ..Default::default()
        };
        let spe = 10;
        assert!(cfg.lr_at(0, spe) < 0.2);
        assert!((cfg.lr_at(9, spe) - 1.0).abs() < 1e-9);
        assert!(cfg.lr_at(29, spe) < 0.05);
    }
}
