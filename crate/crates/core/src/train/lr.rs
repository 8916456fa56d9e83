use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// Divide by `factor` at each milestone epoch (0-based epochs).
    StepDecay { init: f64, milestones: Vec<usize>, factor: f64 },
    /// `dim^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
    InvSqrtWarmup { dim: usize, warmup: usize },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            LrSchedule::Constant(lr) => *lr > 0.0 && lr.is_finite(),
            LrSchedule::StepDecay { init, factor, .. } => *init > 0.0 && *factor > 0.0,
            LrSchedule::InvSqrtWarmup { dim, warmup } => *dim > 0 && *warmup > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid learning-rate schedule {self:?}")))
        }
    }

    pub fn at_epoch(&self, epoch: usize) -> f64 {
        match self {
            LrSchedule::StepDecay { init, milestones, factor } => {
                let passed = milestones.iter().filter(|&&m| epoch >= m).count();
                init / factor.powi(passed as i32)
            }
            other => other.at(1, 1),
        }
    }

    /// Learning rate for 1-based `step`.
    pub fn at(&self, step: u64, steps_per_epoch: usize) -> f64 {
        let step = step.max(1);
        match self {
            LrSchedule::Constant(lr) => *lr,
            LrSchedule::StepDecay { .. } => self.at_epoch(((step - 1) / steps_per_epoch.max(1) as u64) as usize),
            LrSchedule::InvSqrtWarmup { dim, warmup } => {
                let s = step as f64;
                (*dim as f64).powf(-0.5) * s.powf(-0.5).min(s * (*warmup as f64).powf(-1.5))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_schedule_values() {
        let s = LrSchedule::InvSqrtWarmup { dim: 1024, warmup: 4000 };
        let peak = s.at(4000, 1);
        assert!((peak - 4.941e-4).abs() < 1e-7, "{peak}");
        assert!((peak - 1024f64.powf(-0.5) * 4000f64.powf(-0.5)).abs() < 1e-18);
        let half = s.at(2000, 1);
        assert!((half - 2.470e-4).abs() < 1e-7, "{half}");
        assert!((half - peak / 2.0).abs() < 1e-15);
        assert!(s.at(8000, 1) < peak);
    }

    #[test]
    fn step_decay_at_milestone() {
        let s = LrSchedule::StepDecay { init: 0.1, milestones: vec![91], factor: 10.0 };
        assert_eq!(s.at_epoch(90), 0.1);
        assert!((s.at_epoch(91) - 0.01).abs() < 1e-18);
        // 10 steps per epoch: step 910 is the last of epoch 90.
        assert_eq!(s.at(910, 10), 0.1);
        assert!((s.at(911, 10) - 0.01).abs() < 1e-18);
    }

    #[test]
    fn rates_stay_positive() {
        let schedules = [
            LrSchedule::Constant(1e-4),
            LrSchedule::StepDecay { init: 0.1, milestones: vec![1, 2, 3], factor: 10.0 },
            LrSchedule::InvSqrtWarmup { dim: 16, warmup: 10 },
        ];
        for s in schedules {
            s.validate().unwrap();
            for step in [1, 2, 10, 1000, 100_000] {
                assert!(s.at(step, 7) > 0.0);
            }
        }
        assert!(LrSchedule::Constant(0.0).validate().is_err());
    }
}
