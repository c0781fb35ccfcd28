use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Piecewise-constant learning rate: `base · factor^(milestones passed)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0) || !(self.factor > 0.0) {
            return Err(Error::Config("learning rate and decay factor must be positive".into()));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("lr milestones must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn at(&self, step: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| step >= m).count();
        self.base * self.factor.powi(passed as i32)
    }
}
