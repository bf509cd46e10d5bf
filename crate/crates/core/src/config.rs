//! Run configuration: a flat `key = value` file (`key: value` also accepted).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::score::ScoreConfig;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("`{key}`: cannot parse `{value}`")]
    BadValue { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionStrategy {
    Island,
    Pareto,
    WeightedArchive,
}

impl FromStr for SelectionStrategy {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "island" => Ok(Self::Island),
            "pareto" => Ok(Self::Pareto),
            "weighted-archive" => Ok(Self::WeightedArchive),
            _ => Err(()),
        }
    }
}

impl SelectionStrategy {
    pub fn name(self) -> &'static str {
        match self {
            Self::Island => "island",
            Self::Pareto => "pareto",
            Self::WeightedArchive => "weighted-archive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub max_iterations: u64,
    pub checkpoint_interval: u64,
    pub random_seed: u64,
    pub num_islands: usize,
    pub migration_interval: u64,
    pub migration_rate: f64,
    pub archive_size: usize,
    pub elite_ratio: f64,
    pub exploration_ratio: f64,
    pub exploitation_ratio: f64,
    /// Probabilities of (diff, full, crossover).
    pub patch_type_probs: [f64; 3],
    pub parallel_evaluations: usize,
    pub cascade_enabled: bool,
    pub minibatch_size: usize,
    pub correctness_gate: bool,
    pub meta_interval: u64,
    pub plateau_window: usize,
    pub plateau_epsilon: f64,
    pub max_code_length: usize,
    pub selection_strategy: SelectionStrategy,
    pub max_patch_resamples: usize,
    pub repair_enabled: bool,
    pub comment_prefix: String,
    pub evaluator_timeout: f64,
    /// Lowest combined score a valid candidate can reach, if bounded.
    pub score_floor: Option<f64>,
    pub score: ScoreConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            checkpoint_interval: 10,
            random_seed: 42,
            num_islands: 5,
            migration_interval: 5,
            migration_rate: 0.1,
            archive_size: 20,
            elite_ratio: 0.1,
            exploration_ratio: 0.2,
            exploitation_ratio: 0.7,
            patch_type_probs: [0.6, 0.3, 0.1],
            parallel_evaluations: 4,
            cascade_enabled: false,
            minibatch_size: 3,
            correctness_gate: true,
            meta_interval: 0,
            plateau_window: 10,
            plateau_epsilon: 1e-6,
            max_code_length: 60_000,
            selection_strategy: SelectionStrategy::Island,
            max_patch_resamples: 3,
            repair_enabled: false,
            comment_prefix: "#".into(),
            evaluator_timeout: 60.0,
            score_floor: None,
            score: ScoreConfig::default(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>, ConfigError> {
    value
        .trim_matches(|c| c == '[' || c == ']')
        .split(',')
        .map(|v| parse_value(key, v.trim()))
        .collect()
}

/// `name:weight` pairs separated by commas.
fn parse_weights(key: &str, value: &str) -> Result<BTreeMap<String, f64>, ConfigError> {
    let mut out = BTreeMap::new();
    for pair in value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, w) = pair.split_once(':').ok_or_else(|| ConfigError::BadValue {
            key: key.into(),
            value: pair.into(),
        })?;
        out.insert(name.trim().to_string(), parse_value(key, w.trim())?);
    }
    Ok(out)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let split = match (line.find('='), line.find(':')) {
                (Some(e), Some(c)) => e.min(c),
                (Some(e), None) => e,
                (None, Some(c)) => c,
                (None, None) => return Err(ConfigError::Syntax { line: i + 1 }),
            };
            let key = line[..split].trim();
            let value = line[split + 1..].trim().trim_matches('"');
            if seen.insert(key.to_string(), ()).is_some() {
                return Err(ConfigError::Duplicate {
                    line: i + 1,
                    key: key.into(),
                });
            }
            cfg.set(key, value).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { line: i + 1, key },
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "max_iterations" => self.max_iterations = parse_value(key, v)?,
            "checkpoint_interval" => self.checkpoint_interval = parse_value(key, v)?,
            "random_seed" => self.random_seed = parse_value(key, v)?,
            "num_islands" => self.num_islands = parse_value(key, v)?,
            "migration_interval" => self.migration_interval = parse_value(key, v)?,
            "migration_rate" => self.migration_rate = parse_value(key, v)?,
            "archive_size" => self.archive_size = parse_value(key, v)?,
            "elite_ratio" => self.elite_ratio = parse_value(key, v)?,
            "exploration_ratio" => self.exploration_ratio = parse_value(key, v)?,
            "exploitation_ratio" => self.exploitation_ratio = parse_value(key, v)?,
            "patch_type_probs" => {
                let probs = parse_list(key, v)?;
                self.patch_type_probs = probs.try_into().map_err(|_| ConfigError::BadValue {
                    key: key.into(),
                    value: v.into(),
                })?;
            }
            "parallel_evaluations" => self.parallel_evaluations = parse_value(key, v)?,
            "cascade_enabled" => self.cascade_enabled = parse_value(key, v)?,
            "minibatch_size" => self.minibatch_size = parse_value(key, v)?,
            "correctness_gate" => self.correctness_gate = parse_value(key, v)?,
            "meta_interval" => self.meta_interval = parse_value(key, v)?,
            "plateau_window" => self.plateau_window = parse_value(key, v)?,
            "plateau_epsilon" => self.plateau_epsilon = parse_value(key, v)?,
            "max_code_length" => self.max_code_length = parse_value(key, v)?,
            "selection_strategy" => self.selection_strategy = parse_value(key, v)?,
            "max_patch_resamples" => self.max_patch_resamples = parse_value(key, v)?,
            "repair_enabled" => self.repair_enabled = parse_value(key, v)?,
            "comment_prefix" => self.comment_prefix = v.to_string(),
            "evaluator_timeout" => self.evaluator_timeout = parse_value(key, v)?,
            "score_floor" => self.score_floor = Some(parse_value(key, v)?),
            "score_weights" => self.score.weights = parse_weights(key, v)?,
            "loc_budget" => self.score.loc_budget = parse_value(key, v)?,
            "loc_lambda" => self.score.loc_lambda = parse_value(key, v)?,
            "invalid_floor" => self.score.invalid_floor = parse_value(key, v)?,
            "resilience_k" => self.score.resilience_k = parse_value(key, v)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: 0,
                    key: key.into(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Invalid(m));
        for (name, v) in [
            ("checkpoint_interval", self.checkpoint_interval),
            ("migration_interval", self.migration_interval),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("num_islands", self.num_islands),
            ("archive_size", self.archive_size),
            ("parallel_evaluations", self.parallel_evaluations),
            ("minibatch_size", self.minibatch_size),
            ("plateau_window", self.plateau_window),
            ("max_code_length", self.max_code_length),
            ("max_patch_resamples", self.max_patch_resamples),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("migration_rate", self.migration_rate),
            ("elite_ratio", self.elite_ratio),
            ("exploration_ratio", self.exploration_ratio),
            ("exploitation_ratio", self.exploitation_ratio),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.exploration_ratio + self.exploitation_ratio > 1.0 + 1e-9 {
            return fail("exploration_ratio + exploitation_ratio exceeds 1".into());
        }
        if self.patch_type_probs.iter().any(|p| !(0.0..=1.0).contains(p))
            || (self.patch_type_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return fail(format!(
                "patch_type_probs must be probabilities summing to 1, got {:?}",
                self.patch_type_probs
            ));
        }
        if !(self.evaluator_timeout > 0.0) {
            return fail("evaluator_timeout must be positive".into());
        }
        if self.comment_prefix.is_empty() {
            return fail("comment_prefix must be nonempty".into());
        }
        self.score
            .validate(self.score_floor)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        kv("max_iterations", self.max_iterations.to_string());
        kv("checkpoint_interval", self.checkpoint_interval.to_string());
        kv("random_seed", self.random_seed.to_string());
        kv("num_islands", self.num_islands.to_string());
        kv("migration_interval", self.migration_interval.to_string());
        kv("migration_rate", self.migration_rate.to_string());
        kv("archive_size", self.archive_size.to_string());
        kv("elite_ratio", self.elite_ratio.to_string());
        kv("exploration_ratio", self.exploration_ratio.to_string());
        kv("exploitation_ratio", self.exploitation_ratio.to_string());
        let p = self.patch_type_probs;
        kv("patch_type_probs", format!("{}, {}, {}", p[0], p[1], p[2]));
        kv("parallel_evaluations", self.parallel_evaluations.to_string());
        kv("cascade_enabled", self.cascade_enabled.to_string());
        kv("minibatch_size", self.minibatch_size.to_string());
        kv("correctness_gate", self.correctness_gate.to_string());
        kv("meta_interval", self.meta_interval.to_string());
        kv("plateau_window", self.plateau_window.to_string());
        kv("plateau_epsilon", self.plateau_epsilon.to_string());
        kv("max_code_length", self.max_code_length.to_string());
        kv("selection_strategy", self.selection_strategy.name().into());
        kv("max_patch_resamples", self.max_patch_resamples.to_string());
        kv("repair_enabled", self.repair_enabled.to_string());
        kv("comment_prefix", format!("\"{}\"", self.comment_prefix));
        kv("evaluator_timeout", self.evaluator_timeout.to_string());
        if let Some(f) = self.score_floor {
            kv("score_floor", f.to_string());
        }
        if !self.score.weights.is_empty() {
            let w: Vec<String> = self.score.weights.iter().map(|(k, v)| format!("{k}:{v}")).collect();
            kv("score_weights", w.join(", "));
        }
        if self.score.loc_budget != usize::MAX {
            kv("loc_budget", self.score.loc_budget.to_string());
        }
        kv("loc_lambda", self.score.loc_lambda.to_string());
        kv("invalid_floor", self.score.invalid_floor.to_string());
        kv("resilience_k", self.score.resilience_k.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_colon_and_equals_forms() {
        let cfg = RunConfig::parse("max_iterations: 100\nnum_islands = 3\n# note\n\npatch_type_probs = 0.6, 0.3, 0.1\n")
            .unwrap();
        assert_eq!(cfg.max_iterations, 100);
        assert_eq!(cfg.num_islands, 3);
        assert_eq!(cfg.patch_type_probs, [0.6, 0.3, 0.1]);
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert_eq!(
            RunConfig::parse("max_iterations = 3\nfeature_bins = 10"),
            Err(ConfigError::UnknownKey {
                line: 2,
                key: "feature_bins".into()
            })
        );
        assert!(matches!(
            RunConfig::parse("seed_a = 1").unwrap_err(),
            ConfigError::UnknownKey { .. }
        ));
        assert!(matches!(
            RunConfig::parse("num_islands = 2\nnum_islands = 3").unwrap_err(),
            ConfigError::Duplicate { .. }
        ));
        assert!(matches!(RunConfig::parse("just words").unwrap_err(), ConfigError::Syntax { line: 1 }));
    }

    #[test]
    fn validates_ranges() {
        for bad in [
            "patch_type_probs = 0.6, 0.3, 0.2",
            "migration_rate = 1.5",
            "num_islands = 0",
            "exploration_ratio = 0.6\nexploitation_ratio = 0.6",
            "resilience_k = 2",
            "score_weights = a:0.5",
            "score_floor = 0\ninvalid_floor = 0.5",
        ] {
            assert!(matches!(RunConfig::parse(bad), Err(ConfigError::Invalid(_))), "{bad}");
        }
        assert!(matches!(
            RunConfig::parse("selection_strategy = best").unwrap_err(),
            ConfigError::BadValue { .. }
        ));
    }

    #[test]
    fn text_round_trip() {
        let cfg = RunConfig::parse(
            "selection_strategy = weighted-archive\nscore_weights = phr:0.95, rt:0.05\nloc_budget = 40\nscore_floor = 0\ncomment_prefix = //",
        )
        .unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }
}
