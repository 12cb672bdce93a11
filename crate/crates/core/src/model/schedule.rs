//! Linear warmup followed by cosine annealing, evaluated per step.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
}

/// `0.06 × batch / 256`
pub fn scaled_base_lr(batch_size: usize) -> f64 {
    0.06 * batch_size as f64 / 256.0
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_epochs: usize, total_epochs: usize, steps_per_epoch: usize) -> Result<Self> {
        let s = Self {
            base_lr,
            warmup_epochs,
            total_epochs,
            steps_per_epoch,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(invalid("base learning rate must be positive"));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(invalid("warmup must be shorter than training"));
        }
        if self.steps_per_epoch == 0 {
            return Err(invalid("steps per epoch must be positive"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    /// Learning rate at `step` (0-based). Warmup ramps linearly from
    /// `base/W` to `base` over the first `W` steps; afterwards
    /// `base·½(1 + cos(π·t))` with `t = (step − W)/(S − W)`.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        let total = self.total_steps();
        if step >= total {
            return Err(invalid(format!("step {step} outside schedule of {total} steps")));
        }
        let warm = self.warmup_steps();
        if step < warm {
            return Ok(self.base_lr * (step + 1) as f64 / warm as f64);
        }
        let t = (step - warm) as f64 / (total - warm) as f64;
        Ok(self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_endpoint_is_base() {
        let s = LrSchedule::new(0.03, 5, 50, 39).unwrap();
        assert_eq!(s.lr_at(s.warmup_steps() - 1).unwrap(), 0.03);
        assert_eq!(s.lr_at(s.warmup_steps()).unwrap(), 0.03);
        assert!((s.lr_at(0).unwrap() - 0.03 / 195.0).abs() < 1e-18);
    }

    #[test]
    fn final_step_nearly_zero() {
        let s = LrSchedule::new(0.03, 5, 50, 39).unwrap();
        let last = s.total_steps() - 1;
        let post = (s.total_steps() - s.warmup_steps()) as f64;
        let expected = 0.03 * 0.5 * (1.0 + (std::f64::consts::PI * (post - 1.0) / post).cos());
        assert!((s.lr_at(last).unwrap() - expected).abs() < 1e-18);
        assert!(s.lr_at(last).unwrap() <= 1e-3 * 0.03);
        assert!(s.lr_at(s.total_steps()).is_err());
    }

    #[test]
    fn lr_scales_linearly_with_batch() {
        assert_eq!(scaled_base_lr(256), 0.06);
        assert_eq!(scaled_base_lr(128), 0.03);
    }

    #[test]
    fn monotone_after_warmup() {
        let s = LrSchedule::new(0.1, 2, 10, 7).unwrap();
        let lrs: Vec<f64> = (s.warmup_steps()..s.total_steps()).map(|i| s.lr_at(i).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn invalid_schedules() {
        assert!(LrSchedule::new(0.0, 1, 10, 1).is_err());
        assert!(LrSchedule::new(0.1, 10, 10, 1).is_err());
        assert!(LrSchedule::new(0.1, 1, 10, 0).is_err());
    }
}
