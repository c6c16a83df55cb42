use serde::{Deserialize, Serialize};

/// Warmup plus step-decay learning-rate schedule with linear scaling.
///
/// The rate ramps linearly from `base_lr` to `workers · base_lr` over
/// `warmup_iters` iterations, then is divided by `decay_factor` once for every
/// entry of `decay_epochs` that the current epoch has reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub workers: usize,
    pub warmup_iters: u64,
    pub decay_epochs: Vec<u64>,
    pub decay_factor: f64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, workers: usize, warmup_iters: u64, decay_epochs: Vec<u64>) -> Self {
        Self {
            base_lr,
            workers,
            warmup_iters,
            decay_epochs,
            decay_factor: 10.0,
        }
    }

    pub fn peak(&self) -> f64 {
        self.base_lr * self.workers as f64
    }

    pub fn lr(&self, t: u64, epoch: u64) -> f64 {
        let ramped = if t < self.warmup_iters {
            let frac = t as f64 / self.warmup_iters as f64;
            self.base_lr + (self.peak() - self.base_lr) * frac
        } else {
            self.peak()
        };
        let decays = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        ramped / self.decay_factor.powi(decays as i32)
    }
}

/// `α(t)` for iteration `t` in epoch `epoch`.
pub fn lr_schedule(t: u64, epoch: u64, cfg: &LrSchedule) -> f64 {
    cfg.lr(t, epoch)
}
