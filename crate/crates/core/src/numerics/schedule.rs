use crate::error::{Error, Result};

/// Cosine annealing with warm restarts at a fixed cycle length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    eta_max: f64,
    eta_min: f64,
    cycle_length_epochs: u64,
}

impl LrSchedule {
    pub fn new(eta_max: f64, eta_min: f64, cycle_length_epochs: u64) -> Result<Self> {
        if !(eta_min > 0.0 && eta_min < eta_max && eta_max.is_finite()) {
            return Err(Error::Config(alloc::format!(
                "learning-rate bounds need 0 < eta_min < eta_max, got {eta_min} and {eta_max}"
            )));
        }
        if cycle_length_epochs == 0 {
            return Err(Error::Config("cycle length must be positive".into()));
        }
        Ok(Self {
            eta_max,
            eta_min,
            cycle_length_epochs,
        })
    }

    pub fn eta_max(&self) -> f64 {
        self.eta_max
    }

    pub fn eta_min(&self) -> f64 {
        self.eta_min
    }

    pub fn cycle_length_epochs(&self) -> u64 {
        self.cycle_length_epochs
    }

    pub fn lr_at(&self, epoch: u64) -> f64 {
        let cycle = self.cycle_length_epochs;
        let phase = (epoch % cycle) as f64 / cycle as f64;
        let lr = self.eta_min
            + (self.eta_max - self.eta_min) * (1.0 + libm::cos(core::f64::consts::PI * phase)) / 2.0;
        lr.clamp(self.eta_min, self.eta_max)
    }
}
