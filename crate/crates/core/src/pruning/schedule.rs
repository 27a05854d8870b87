use serde::{Deserialize, Serialize};

use super::PruningError;

/// Cubic ramp from 0 to `target` over `ramp_steps` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub ramp_steps: u64,
    pub target: f64,
}

impl PruneSchedule {
    pub fn new(ramp_steps: u64, target: f64) -> Result<Self, PruningError> {
        if ramp_steps == 0 {
            return Err(PruningError::RampSteps);
        }
        super::score::check_sparsity(target)?;
        Ok(Self { ramp_steps, target })
    }

    pub fn at(&self, step: u64) -> f64 {
        let progress = step.min(self.ramp_steps) as f64 / self.ramp_steps as f64;
        let remaining = 1.0 - progress;
        self.target * (1.0 - remaining * remaining * remaining)
    }
}

/// `s(t) = S·(1 − (1 − min(t, T)/T)³)`.
pub fn cubic_sparsity(step: u64, schedule: &PruneSchedule) -> Result<f64, PruningError> {
    if schedule.ramp_steps == 0 {
        return Err(PruningError::RampSteps);
    }
    Ok(schedule.at(step))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let s = PruneSchedule::new(100, 0.88).unwrap();
        assert_eq!(cubic_sparsity(0, &s).unwrap(), 0.0);
        assert_eq!(cubic_sparsity(100, &s).unwrap(), 0.88);
        assert_eq!(cubic_sparsity(10_000, &s).unwrap(), 0.88);
        assert!((cubic_sparsity(50, &s).unwrap() - 0.77).abs() < 1e-15);
    }

    #[test]
    fn zero_ramp_rejected() {
        assert!(matches!(PruneSchedule::new(0, 0.5), Err(PruningError::RampSteps)));
        let raw = PruneSchedule {
            ramp_steps: 0,
            target: 0.5,
        };
        assert!(cubic_sparsity(3, &raw).is_err());
    }

    #[test]
    fn monotone_nondecreasing() {
        let s = PruneSchedule::new(37, 0.9).unwrap();
        let values: Vec<f64> = (0..60).map(|t| s.at(t)).collect();
        assert!(values.windows(2).all(|w| w[0] <= w[1]));
    }
}
