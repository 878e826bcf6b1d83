use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Learning-rate schedule evaluated per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant {
        base_lr: f64,
    },
    /// Cosine annealing to zero inside windows of length `L0, L0*m, L0*m^2, ...`,
    /// jumping back to `base_lr` at each window boundary.
    CosineRestarts {
        base_lr: f64,
        initial_budget: usize,
        budget_multiplier: f64,
    },
}

impl LrSchedule {
    pub fn base_lr(&self) -> f64 {
        match *self {
            LrSchedule::Constant { base_lr } | LrSchedule::CosineRestarts { base_lr, .. } => {
                base_lr
            }
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant { base_lr } => base_lr,
            LrSchedule::CosineRestarts {
                base_lr,
                initial_budget,
                budget_multiplier,
            } => {
                let (t, len) = restart_window(epoch, initial_budget, budget_multiplier);
                base_lr * 0.5 * (1.0 + (PI * t as f64 / len as f64).cos())
            }
        }
    }
}

/// Position of `epoch` inside its restart window: `(offset, window length)`.
pub fn restart_window(epoch: usize, initial_budget: usize, multiplier: f64) -> (usize, usize) {
    let mut start = 0usize;
    let mut len = initial_budget.max(1);
    let mut exact = len as f64;
    while epoch >= start + len {
        start += len;
        exact *= multiplier.max(1.0);
        len = (exact.round() as usize).max(1);
    }
    (epoch - start, len)
}

pub fn cosine_restart_lr(schedule: &LrSchedule, epoch: usize) -> f64 {
    schedule.lr(epoch)
}
