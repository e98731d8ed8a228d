use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::{NumericsError, Result};

/// Linear warmup from 0 to `peak_lr`, then cosine decay to `floor_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    #[serde(default)]
    pub floor_lr: f64,
}

impl ScheduleSpec {
    pub fn new(peak_lr: f64, warmup_steps: u64, total_steps: u64, floor_lr: f64) -> Result<Self> {
        let spec = Self { peak_lr, warmup_steps, total_steps, floor_lr };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(NumericsError::Invalid(format!("peak_lr must be positive, got {}", self.peak_lr)));
        }
        if self.warmup_steps == 0 || self.total_steps < self.warmup_steps {
            return Err(NumericsError::Invalid(format!(
                "need 0 < warmup_steps <= total_steps, got {} / {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.floor_lr >= 0.0 && self.floor_lr <= self.peak_lr) {
            return Err(NumericsError::Invalid(format!("floor_lr {} outside [0, peak]", self.floor_lr)));
        }
        Ok(())
    }

    /// Learning rate at `step`; steps past `total_steps` clamp to `floor_lr`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step <= self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return self.floor_lr;
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        self.floor_lr + (self.peak_lr - self.floor_lr) * 0.5 * (1.0 + (PI * progress).cos())
    }
}
