//! Linear warmup followed by step decay.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    /// `(epoch, factor)`: from `epoch` on, the rate is multiplied by `factor`
    /// (cumulatively with earlier entries).
    pub decay: Vec<(usize, f64)>,
    pub base_lr: f64,
    pub weight_decay: f64,
}

impl Default for TrainSchedule {
    /// 20 epochs, 2 warmup epochs, ×0.1 at epoch 12 and again at epoch 16,
    /// lr 6e-4, weight decay 5e-4.
    fn default() -> Self {
        Self {
            total_epochs: 20,
            warmup_epochs: 2,
            decay: vec![(12, 0.1), (16, 0.1)],
            base_lr: 6e-4,
            weight_decay: 5e-4,
        }
    }
}

/// Fraction of the base rate the warmup starts from.
pub const WARMUP_FLOOR: f64 = 0.1;

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs > 0 && self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "warmup ({}) must be shorter than training ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if let Some(&(e, f)) = self.decay.iter().find(|(_, f)| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config(format!("decay factor {f} at epoch {e} outside (0, 1]")));
        }
        if !(self.base_lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rate must be > 0 and weight decay >= 0".into()));
        }
        Ok(())
    }

    /// Learning rate for a step. During warmup the rate rises linearly per
    /// step from `0.1·base` towards `base`; afterwards it is `base` times the
    /// factors of every decay milestone already reached.
    pub fn lr_at(&self, epoch: usize, step_in_epoch: usize, steps_per_epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            let steps_per_epoch = steps_per_epoch.max(1);
            let progress = (epoch * steps_per_epoch + step_in_epoch) as f64
                / (self.warmup_epochs * steps_per_epoch) as f64;
            return self.base_lr * (WARMUP_FLOOR + (1.0 - WARMUP_FLOOR) * progress.min(1.0));
        }
        self.decay
            .iter()
            .filter(|(at, _)| epoch >= *at)
            .fold(self.base_lr, |lr, (_, f)| lr * f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_starts_at_floor() {
        let s = TrainSchedule::default();
        assert_eq!(s.lr_at(0, 0, 10), 0.1 * s.base_lr);
        assert!((s.lr_at(1, 5, 10) - s.base_lr * (0.1 + 0.9 * 0.75)).abs() < 1e-18);
        assert_eq!(s.lr_at(2, 0, 10), s.base_lr);
    }

    #[test]
    fn decays_to_one_hundredth() {
        let s = TrainSchedule::default();
        assert!((s.lr_at(12, 0, 10) - 0.1 * s.base_lr).abs() < 1e-18);
        for epoch in 16..20 {
            assert!((s.lr_at(epoch, 3, 10) - 0.01 * s.base_lr).abs() < 1e-18);
        }
    }

    #[test]
    fn non_increasing_after_warmup() {
        let s = TrainSchedule::default();
        let mut prev = f64::INFINITY;
        for epoch in s.warmup_epochs..s.total_epochs {
            for step in 0..7 {
                let lr = s.lr_at(epoch, step, 7);
                assert!(lr <= prev);
                prev = lr;
            }
        }
    }

    #[test]
    fn validation() {
        assert!(TrainSchedule { warmup_epochs: 20, ..Default::default() }.validate().is_err());
        assert!(TrainSchedule { decay: vec![(3, 1.5)], ..Default::default() }.validate().is_err());
        assert!(TrainSchedule { total_epochs: 0, ..Default::default() }.validate().is_ok());
    }
}
