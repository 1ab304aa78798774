use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::datamodel::AnticipationProtocol;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::objective::LossConfig;
use crate::semantics::SemGenConfig;

/// Which anticipation steps each training example is used at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HorizonPolicy {
    /// One step drawn uniformly from `[1, s_ant]` per example and epoch.
    Uniform,
    /// Every step, each counted as a separate example.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub fusion: FusionConfig,
    pub encoder: EncoderConfig,
    pub semantic: SemGenConfig,
    pub modality: String,
    pub horizon_policy: HorizonPolicy,
    /// Dataset directory; the CLI flag takes precedence.
    pub data: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            batch_size: 128,
            epochs: 100,
            seed: 0,
            loss: LossConfig::default(),
            fusion: FusionConfig::default(),
            encoder: EncoderConfig::default(),
            semantic: SemGenConfig::default(),
            modality: "rgb".into(),
            horizon_policy: HorizonPolicy::Uniform,
            data: None,
        }
    }
}

impl TrainConfig {
    /// Smaller batches for the CPU-sized synthetic runs.
    pub fn desk_scale() -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted as a degenerate optimizer
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.loss.validate()
    }
}

/// Step used for epoch selection and the detailed report: the one closest
/// to 1 s, clamped to the protocol's range.
pub fn one_second_step(protocol: &AnticipationProtocol) -> usize {
    ((1.0 / protocol.alpha_s).round() as usize).clamp(1, protocol.s_ant)
}
