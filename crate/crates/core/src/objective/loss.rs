use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Graph, Var};

/// Probabilities are clamped from below before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Ground-truth semantics: target loss only.
    Gts,
    /// Estimated semantics: target + observation + cosine + squared error.
    Es,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Label-smoothing strength θ in `[0, 1]`.
    pub theta: f64,
    /// Weight of the observation loss.
    pub a: f64,
    /// Weight of the cosine loss.
    pub b: f64,
    /// Weight of the squared-error loss.
    pub c: f64,
    pub mode: LossMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::epic_kitchens()
    }
}

impl LossConfig {
    /// Weights used on EPIC-Kitchens: a = 2.1, b = 1.0, c = 1.0.
    pub fn epic_kitchens() -> Self {
        Self {
            theta: 0.1,
            a: 2.1,
            b: 1.0,
            c: 1.0,
            mode: LossMode::Es,
        }
    }

    /// Weights used on EGTEA Gaze+: a = 2.9, b = 1.0, c = 1.1.
    pub fn egtea_gaze() -> Self {
        Self {
            a: 2.9,
            b: 1.0,
            c: 1.1,
            ..Self::epic_kitchens()
        }
    }

    pub fn gts() -> Self {
        Self {
            mode: LossMode::Gts,
            ..Self::epic_kitchens()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_theta(self.theta)?;
        for (name, w) in [("a", self.a), ("b", self.b), ("c", self.c)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("loss weight {name} must be >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

fn check_theta(theta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::Config(format!("label smoothing theta must be in [0, 1], got {theta}")));
    }
    Ok(())
}

/// Label-smoothed cross-entropy of a probability row:
/// `-(1-θ) ln p[y] - (θ/N) Σ_i ln p[i]`.
pub fn ce_label_smooth(g: &mut Graph, probs: Var, true_class: usize, theta: f64) -> Result<Var> {
    check_theta(theta)?;
    let n = g.value(probs).numel();
    if true_class >= n {
        return Err(Error::Index {
            what: "classes",
            index: true_class,
            len: n,
        });
    }
    let logp = g.log_clamp(probs, PROB_FLOOR);
    let mut w = vec![-theta / n as f64; n];
    w[true_class] -= 1.0 - theta;
    g.weighted_sum(logp, w)
}

/// `1 - cos(ŝ, s)`; 1 with zero gradient when either vector is zero.
pub fn cos_loss(g: &mut Graph, s_hat: Var, s: Var) -> Result<Var> {
    g.cosine_distance(s_hat, s)
}

/// `Σ_i (s_i - ŝ_i)²` (a sum, not a mean).
pub fn mse_loss(g: &mut Graph, s_hat: Var, s: Var) -> Result<Var> {
    let diff = g.sub(s, s_hat)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.sum(sq))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub tgt: Var,
    pub obs: Option<Var>,
    pub cos: Option<Var>,
    pub mse: Option<Var>,
}

/// `L = L_tgt + a L_obs + b L_cos + c L_mse` in ES mode, `L_tgt` in GTS mode.
pub fn total_loss(g: &mut Graph, cfg: &LossConfig, parts: &LossParts) -> Result<Var> {
    match cfg.mode {
        LossMode::Gts => Ok(parts.tgt),
        LossMode::Es => {
            let obs = parts.obs.ok_or(Error::MissingLoss("obs"))?;
            let cos = parts.cos.ok_or(Error::MissingLoss("cos"))?;
            let mse = parts.mse.ok_or(Error::MissingLoss("mse"))?;
            let mut total = parts.tgt;
            for (w, v) in [(cfg.a, obs), (cfg.b, cos), (cfg.c, mse)] {
                let term = g.scale(v, w);
                total = g.add(total, term)?;
            }
            Ok(total)
        }
    }
}
