//! Score arithmetic shared by the harness and the controller.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("metric `{0}` is weighted but missing from the report")]
    MissingMetric(String),
    #[error("metric `{name}` is not finite ({value})")]
    NonFinite { name: String, value: f64 },
    #[error("median of an empty list")]
    Empty,
    #[error("score config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    /// Metric weights. Empty means "use the evaluator's combined score".
    pub weights: BTreeMap<String, f64>,
    pub loc_budget: usize,
    pub loc_lambda: f64,
    pub invalid_floor: f64,
    pub resilience_k: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            weights: BTreeMap::new(),
            loc_budget: usize::MAX,
            loc_lambda: 0.0,
            invalid_floor: -1.0,
            resilience_k: 1,
        }
    }
}

impl ScoreConfig {
    /// `score_range` is the lowest score a valid candidate can reach, when the
    /// benchmark declares one.
    pub fn validate(&self, score_floor: Option<f64>) -> Result<(), ScoreError> {
        if !self.weights.is_empty() {
            if self.weights.values().any(|w| !(*w >= 0.0)) {
                return Err(ScoreError::Config("weights must be nonnegative".into()));
            }
            let sum: f64 = self.weights.values().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(ScoreError::Config(format!("weights sum to {sum}, not 1")));
            }
        }
        if self.resilience_k == 0 || self.resilience_k % 2 == 0 {
            return Err(ScoreError::Config(format!(
                "resilience_k must be odd and positive, got {}",
                self.resilience_k
            )));
        }
        if !(self.loc_lambda >= 0.0) {
            return Err(ScoreError::Config("loc_lambda must be nonnegative".into()));
        }
        if let Some(low) = score_floor {
            if self.invalid_floor >= low {
                return Err(ScoreError::Config(format!(
                    "invalid_floor {} is not below the lowest valid score {low}",
                    self.invalid_floor
                )));
            }
        }
        Ok(())
    }
}

pub fn combined_score(metrics: &BTreeMap<String, f64>, cfg: &ScoreConfig) -> Result<f64, ScoreError> {
    let mut total = 0.0;
    for (name, w) in &cfg.weights {
        let value = *metrics
            .get(name)
            .ok_or_else(|| ScoreError::MissingMetric(name.clone()))?;
        if !value.is_finite() {
            return Err(ScoreError::NonFinite {
                name: name.clone(),
                value,
            });
        }
        total += w * value;
    }
    Ok(total)
}

pub fn apply_loc_penalty(score: f64, loc: usize, cfg: &ScoreConfig) -> f64 {
    let excess = loc.saturating_sub(cfg.loc_budget);
    if excess == 0 {
        score
    } else {
        score - cfg.loc_lambda * excess as f64
    }
}

/// Median; an even-length list averages its middle pair.
pub fn median_aggregate(scores: &[f64]) -> Result<f64, ScoreError> {
    if scores.is_empty() {
        return Err(ScoreError::Empty);
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let mid = s.len() / 2;
    Ok(if s.len() % 2 == 1 {
        s[mid]
    } else {
        (s[mid - 1] + s[mid]) / 2.0
    })
}
