//! Evaluator side of the harness protocol.
//!
//! The engine runs `<command> --candidate <path> --split <name> --seed <u64>`
//! and expects exactly one line on stdout holding a JSON object with the keys
//! `valid`, `combined_score`, `metrics` and optionally `per_instance` and
//! `feedback`. Exit code 0 means the evaluation ran, even when the candidate
//! turned out invalid.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub id: String,
    pub score: f64,
}

impl InstanceScore {
    pub fn new(id: impl Into<String>, score: f64) -> Self {
        Self {
            id: id.into(),
            score,
        }
    }
}

/// One evaluator report line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub valid: bool,
    pub combined_score: f64,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_instance: Vec<InstanceScore>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub feedback: String,
}

impl Report {
    /// Report for a candidate that could not be scored at all.
    pub fn invalid(score: f64, feedback: impl Into<String>) -> Self {
        Self {
            valid: false,
            combined_score: score,
            metrics: BTreeMap::new(),
            per_instance: Vec::new(),
            feedback: feedback.into(),
        }
    }

    pub fn to_line(&self) -> String {
        // Non-finite numbers cannot be represented in JSON; evaluators never
        // produce them for valid reports.
        serde_json::to_string(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalArgs {
    pub candidate: PathBuf,
    pub split: String,
    pub seed: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ArgsError {
    #[error("missing required argument {0}")]
    Missing(&'static str),
    #[error("unexpected argument `{0}`")]
    Unexpected(String),
    #[error("invalid seed `{0}`")]
    BadSeed(String),
}

impl EvalArgs {
    pub fn parse<I, S>(args: I) -> Result<Self, ArgsError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut candidate = None;
        let mut split = None;
        let mut seed = None;
        let mut it = args.into_iter().map(Into::into);
        while let Some(flag) = it.next() {
            match flag.as_str() {
                "--candidate" => candidate = it.next().map(PathBuf::from),
                "--split" => split = it.next(),
                "--seed" => {
                    let raw = it.next().ok_or(ArgsError::Missing("--seed"))?;
                    seed = Some(raw.parse().map_err(|_| ArgsError::BadSeed(raw))?);
                }
                _ => return Err(ArgsError::Unexpected(flag)),
            }
        }
        Ok(Self {
            candidate: candidate.ok_or(ArgsError::Missing("--candidate"))?,
            split: split.unwrap_or_else(|| "full".to_string()),
            seed: seed.unwrap_or(0),
        })
    }
}

/// Signature shared by the four benchmark evaluators.
pub type EvaluateFn = fn(text: &str, split: &str, seed: u64) -> Report;

/// Entry point used by the `bench-*` binaries.
pub fn run_evaluator(name: &str, evaluate: EvaluateFn) -> ExitCode {
    let args = match EvalArgs::parse(std::env::args().skip(1)) {
        Ok(args) => args,
        Err(e) => {
            eprintln!("{name}: {e}");
            eprintln!("usage: {name} --candidate <path> --split <name> --seed <u64>");
            return ExitCode::from(2);
        }
    };
    let text = match std::fs::read_to_string(&args.candidate) {
        Ok(text) => text,
        Err(e) => {
            eprintln!("{name}: cannot read {}: {e}", args.candidate.display());
            return ExitCode::from(1);
        }
    };
    let report = evaluate(&text, &args.split, args.seed);
    let mut out = std::io::stdout().lock();
    if writeln!(out, "{}", report.to_line()).is_err() {
        return ExitCode::from(1);
    }
    ExitCode::SUCCESS
}

/// Keeps feedback readable in prompts.
pub(crate) fn fmt3(x: f64) -> String {
    format!("{x:.3}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_protocol_arguments() {
        let args = EvalArgs::parse(["--candidate", "c.txt", "--split", "minibatch", "--seed", "7"])
            .unwrap();
        assert_eq!(args.candidate, PathBuf::from("c.txt"));
        assert_eq!(args.split, "minibatch");
        assert_eq!(args.seed, 7);
    }

    #[test]
    fn rejects_unknown_flags_and_bad_seeds() {
        assert_eq!(
            EvalArgs::parse(["--candidate", "c", "--verbose"]),
            Err(ArgsError::Unexpected("--verbose".into()))
        );
        assert_eq!(
            EvalArgs::parse(["--candidate", "c", "--seed", "x"]),
            Err(ArgsError::BadSeed("x".into()))
        );
        assert_eq!(EvalArgs::parse(["--split", "full"]), Err(ArgsError::Missing("--candidate")));
    }

    #[test]
    fn report_line_omits_empty_optionals() {
        let mut r = Report::invalid(-1.0, "");
        r.valid = true;
        r.combined_score = 0.5;
        assert_eq!(r.to_line(), r#"{"valid":true,"combined_score":0.5,"metrics":{}}"#);
    }
}
