//! Verifiable rewards: template format, label accuracy with partial credit, and
//! the piecewise decision-entropy reward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::{parse_response, TaskKind, TaskVocab};
use crate::vocab::TokenId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CdeRewardConfig {
    pub a: f64,
    pub b: f64,
    pub w: f64,
    pub rho: f64,
}

impl Default for CdeRewardConfig {
    fn default() -> Self {
        Self { a: 0.1, b: 0.5, w: 0.2, rho: 0.25 }
    }
}

impl CdeRewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.a && self.a < self.b && self.b.is_finite()) {
            return Err(Error::config(format!("need 0 <= a < b, got a={} b={}", self.a, self.b)));
        }
        if !(self.w > 0.0 && self.w.is_finite()) {
            return Err(Error::config("w must be positive"));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::config("rho must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AccuracyConfig {
    pub over_prediction_lambda: f64,
}

impl Default for AccuracyConfig {
    fn default() -> Self {
        Self { over_prediction_lambda: 0.5 }
    }
}

impl AccuracyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.over_prediction_lambda >= 0.0 && self.over_prediction_lambda.is_finite()) {
            return Err(Error::config("over_prediction_lambda must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_format: f64,
    pub r_acc: f64,
    pub r_cde: f64,
    pub total: f64,
}

/// 1 iff the response parses for `task`.
pub fn format_reward(tokens: &[TokenId], task: TaskKind, tv: &TaskVocab) -> f64 {
    if parse_response(tokens, task, tv).is_ok() {
        1.0
    } else {
        0.0
    }
}

/// Exact match for the binary task and for a Benign gold; otherwise
/// `clamp(|p ∩ g| / |g| − λ·|p \ g| / |g|, 0, 1)`.
pub fn accuracy_reward(pred: &[TokenId], gold: &[TokenId], task: TaskKind, cfg: &AccuracyConfig, tv: &TaskVocab) -> f64 {
    let same = |a: &[TokenId], b: &[TokenId]| a.len() == b.len() && a.iter().all(|t| b.contains(t));
    if task == TaskKind::Binary || gold == [tv.benign] {
        return if same(pred, gold) { 1.0 } else { 0.0 };
    }
    if gold.is_empty() {
        return 0.0;
    }
    let hit = pred.iter().filter(|t| gold.contains(t)).count() as f64;
    let extra = pred.iter().filter(|t| !gold.contains(t)).count() as f64;
    let g = gold.len() as f64;
    (hit / g - cfg.over_prediction_lambda * extra / g).clamp(0.0, 1.0)
}

/// Piecewise entropy reward; the weight `w` is already applied.
pub fn cde_reward(h: f64, correct: bool, cfg: &CdeRewardConfig) -> Result<f64> {
    cfg.validate()?;
    if !(h >= 0.0) {
        return Err(Error::invalid(format!("entropy {h} must be non-negative")));
    }
    let CdeRewardConfig { a, b, w, rho } = *cfg;
    Ok(if correct {
        if h <= a {
            w
        } else if h < b {
            w * (b - h) / (b - a)
        } else {
            0.0
        }
    } else if h <= a {
        -rho * w
    } else if h < b {
        w * (h - a) / (b - a)
    } else {
        w
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub accuracy: AccuracyConfig,
    pub cde: CdeRewardConfig,
    /// When false the entropy term is dropped (the `w = 0` baseline).
    pub cde_enabled: bool,
}

/// `r_format + r_acc + r_cde`; malformed responses score 0 in every component.
/// `h` is only consulted when the entropy term is enabled.
pub fn total_reward(
    response: &[TokenId],
    task: TaskKind,
    gold: &[TokenId],
    h: Option<f64>,
    cfg: &RewardConfig,
    tv: &TaskVocab,
) -> Result<RewardBreakdown> {
    let parsed = match parse_response(response, task, tv) {
        Ok(p) => p,
        Err(_) => return Ok(RewardBreakdown::default()),
    };
    let r_acc = accuracy_reward(&parsed.labels, gold, task, &cfg.accuracy, tv);
    let r_cde = if cfg.cde_enabled {
        let h = h.ok_or_else(|| Error::invalid("decision entropy required when the entropy reward is enabled"))?;
        let correct = parsed.labels.len() == gold.len() && parsed.labels.iter().all(|t| gold.contains(t));
        cde_reward(h, correct, &cfg.cde)?
    } else {
        0.0
    };
    Ok(RewardBreakdown { r_format: 1.0, r_acc, r_cde, total: 1.0 + r_acc + r_cde })
}
