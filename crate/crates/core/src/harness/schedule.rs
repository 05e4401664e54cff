//! Multi-step learning-rate decay with optional linear warmup.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LrSchedule {
    pub lr0: f64,
    /// Epochs at which the rate is multiplied by `factor`; strictly increasing.
    pub milestones: Vec<usize>,
    pub factor: f64,
    pub warmup_epochs: usize,
}

impl LrSchedule {
    pub fn constant(lr0: f64) -> Self {
        Self {
            lr0,
            milestones: Vec::new(),
            factor: 1.0,
            warmup_epochs: 0,
        }
    }

    pub fn validate(&self, epochs: usize) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config(
                "lr0",
                format!("must be > 0, got {}", self.lr0),
            ));
        }
        if !(self.factor > 0.0 && self.factor.is_finite()) {
            return Err(Error::config(
                "schedule.factor",
                format!("must be > 0, got {}", self.factor),
            ));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "schedule.milestones",
                "must be strictly increasing",
            ));
        }
        if let Some(&last) = self.milestones.last() {
            if last >= epochs {
                return Err(Error::config(
                    "schedule.milestones",
                    format!("milestone {last} is not below epochs = {epochs}"),
                ));
            }
        }
        Ok(())
    }

    /// Rate for step `batch_index` of `epoch` with `steps_per_epoch` steps.
    ///
    /// Warmup ramps linearly per step from `lr0 / steps_per_epoch` up to `lr0`
    /// over the first `warmup_epochs` epochs. Afterwards the rate is
    /// `lr0 * factor^k`, `k` being the number of milestones `<= epoch`.
    pub fn lr_at(&self, epoch: usize, batch_index: usize, steps_per_epoch: usize) -> f64 {
        let steps = steps_per_epoch.max(1);
        if epoch < self.warmup_epochs {
            let t = epoch * steps + batch_index.min(steps - 1) + 1;
            return self.lr0 * t as f64 / (self.warmup_epochs * steps) as f64;
        }
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr0 * self.factor.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cifar100() -> LrSchedule {
        LrSchedule {
            lr0: 0.1,
            milestones: vec![60, 120, 160],
            factor: 0.2,
            warmup_epochs: 0,
        }
    }

    #[test]
    fn multistep_examples() {
        let s = cifar100();
        assert!((s.lr_at(0, 0, 10) - 0.1).abs() < 1e-15);
        assert!((s.lr_at(61, 0, 10) - 0.02).abs() < 1e-15);
        assert!((s.lr_at(121, 0, 10) - 0.004).abs() < 1e-15);
        let s = LrSchedule {
            lr0: 0.1,
            milestones: vec![100, 150],
            factor: 0.1,
            warmup_epochs: 0,
        };
        assert!((s.lr_at(150, 0, 10) - 0.001).abs() < 1e-15);
        assert!((s.lr_at(149, 3, 10) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn warmup_ramps_from_one_step_to_lr0() {
        let s = LrSchedule {
            warmup_epochs: 1,
            ..cifar100()
        };
        assert!((s.lr_at(0, 0, 4) - 0.025).abs() < 1e-15);
        assert!((s.lr_at(0, 1, 4) - 0.05).abs() < 1e-15);
        assert!((s.lr_at(0, 3, 4) - 0.1).abs() < 1e-15);
        assert!((s.lr_at(1, 0, 4) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn validation() {
        assert!(cifar100().validate(200).is_ok());
        assert!(cifar100().validate(160).is_err());
        let mut s = cifar100();
        s.milestones = vec![60, 60];
        assert!(
            matches!(s.validate(200), Err(Error::Config { field, .. }) if field == "schedule.milestones")
        );
    }

    proptest! {
        #[test]
        fn plateau_count_is_milestones_plus_one(
            mut ms in proptest::collection::btree_set(1usize..50, 0..5),
            factor in 0.05f64..0.9,
        ) {
            let milestones: Vec<usize> = std::mem::take(&mut ms).into_iter().collect();
            let s = LrSchedule { lr0: 0.1, milestones: milestones.clone(), factor, warmup_epochs: 0 };
            let mut plateaus = 1;
            let mut prev = s.lr_at(0, 0, 1);
            for e in 1..60 {
                let lr = s.lr_at(e, 0, 1);
                prop_assert!(lr <= prev);
                if lr != prev {
                    plateaus += 1;
                }
                prev = lr;
            }
            prop_assert_eq!(plateaus, milestones.len() + 1);
        }
    }
}
