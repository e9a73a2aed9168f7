//! Cumulative entropy regulation (CER) reward.
//!
//! A response earns the accuracy reward; a correct one additionally averages
//! in a TECA reward `e^(-TECA_last) + 1`, so among correct answers the one
//! that settled with less accumulated uncertainty scores higher. Note the
//! TECA reward lives in `(1, 2]`, not `(0, 1]`: the `+ 1` shift is kept.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A parsed final answer. `Absent` never equals any ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Answer {
    Value(u64),
    Absent,
}

/// Which reward the trainer optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Segmented accuracy + TECA reward.
    #[default]
    Cer,
    /// Accuracy reward alone (the baseline arm).
    AccuracyOnly,
}

impl std::str::FromStr for RewardMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "cer" => Ok(RewardMode::Cer),
            "accuracy" | "accuracy_only" => Ok(RewardMode::AccuracyOnly),
            other => Err(format!("unknown reward mode `{other}` (expected cer|accuracy)")),
        }
    }
}

impl std::fmt::Display for RewardMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RewardMode::Cer => "cer",
            RewardMode::AccuracyOnly => "accuracy",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBundle {
    pub accuracy: f64,
    /// `None` when the TECA branch was skipped (truncated response).
    pub teca_reward: Option<f64>,
    pub combined: f64,
    pub teca_last: Option<f64>,
}

pub fn accuracy_reward(prediction: Answer, ground_truth: u64) -> f64 {
    match prediction {
        Answer::Value(v) if v == ground_truth => 1.0,
        _ => 0.0,
    }
}

pub fn teca_reward(teca_last: f64) -> Result<f64> {
    if !(teca_last.is_finite() && teca_last >= 0.0) {
        return Err(Error::invalid(format!(
            "TECA must be finite and non-negative, got {teca_last}"
        )));
    }
    Ok((-teca_last).exp() + 1.0)
}

/// `accuracy` when wrong, `(accuracy + teca_reward) / 2` when right.
pub fn segmented_reward(accuracy: f64, teca_reward: f64) -> f64 {
    if accuracy == 0.0 {
        accuracy
    } else {
        (accuracy + teca_reward) / 2.0
    }
}

/// Scores one response end to end.
///
/// `teca_last` may be `None` for a truncated response; such a response is
/// graded on accuracy alone regardless of mode.
pub fn score(
    mode: RewardMode,
    prediction: Answer,
    ground_truth: u64,
    teca_last: Option<f64>,
    truncated: bool,
) -> Result<RewardBundle> {
    let accuracy = if truncated {
        0.0
    } else {
        accuracy_reward(prediction, ground_truth)
    };
    let teca_last = if truncated { None } else { teca_last };
    let teca_r = teca_last.map(teca_reward).transpose()?;
    let combined = match (mode, teca_r) {
        (RewardMode::Cer, Some(r)) => segmented_reward(accuracy, r),
        _ => accuracy,
    };
    Ok(RewardBundle {
        accuracy,
        teca_reward: teca_r,
        combined,
        teca_last,
    })
}
