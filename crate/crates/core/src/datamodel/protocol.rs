use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Timing contract between stored observation windows and anticipation
/// horizons.
///
/// A stored sample covers `s_enc + s_ant` steps ending right before the
/// target action. Anticipating `n` steps ahead drops the last `n` steps, so
/// the observation shrinks as the horizon grows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnticipationProtocol {
    pub s_enc: usize,
    pub s_ant: usize,
    pub alpha_s: f64,
}

impl Default for AnticipationProtocol {
    fn default() -> Self {
        Self {
            s_enc: 6,
            s_ant: 8,
            alpha_s: 0.25,
        }
    }
}

impl AnticipationProtocol {
    pub fn new(s_enc: usize, s_ant: usize, alpha_s: f64) -> Result<Self> {
        let p = Self {
            s_enc,
            s_ant,
            alpha_s,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.s_enc < 1 || self.s_ant < 1 || !(self.alpha_s > 0.0) || !self.alpha_s.is_finite() {
            return Err(Error::Config(format!(
                "protocol needs s_enc >= 1, s_ant >= 1, alpha_s > 0 (got {}, {}, {})",
                self.s_enc, self.s_ant, self.alpha_s
            )));
        }
        Ok(())
    }

    /// Number of stored steps per sample.
    pub fn total_steps(&self) -> usize {
        self.s_enc + self.s_ant
    }

    fn check_step(&self, n: usize) -> Result<()> {
        if n < 1 || n > self.s_ant {
            return Err(Error::Protocol(format!(
                "anticipation step {n} outside [1, {}]",
                self.s_ant
            )));
        }
        Ok(())
    }

    pub fn observed_steps(&self, n: usize) -> Result<usize> {
        self.check_step(n)?;
        Ok(self.s_enc + self.s_ant - n)
    }

    /// Seconds between the end of the observation and the target start.
    pub fn anticipation_time(&self, n: usize) -> Result<f64> {
        self.check_step(n)?;
        Ok(n as f64 * self.alpha_s)
    }

    /// Observation length in seconds for step `n`.
    pub fn observation_time(&self, n: usize) -> Result<f64> {
        Ok(self.observed_steps(n)? as f64 * self.alpha_s)
    }

    pub fn steps(&self) -> std::ops::RangeInclusive<usize> {
        1..=self.s_ant
    }

    /// Step whose anticipation time is closest to `seconds`.
    pub fn step_for_time(&self, seconds: f64) -> Result<usize> {
        let n = (seconds / self.alpha_s).round() as usize;
        self.check_step(n)?;
        Ok(n)
    }
}
