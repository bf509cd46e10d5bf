//! Problem directories and in-process benchmark evaluators for the `adrs`
//! command.
//!
//! A problem directory holds:
//!
//! ```text
//! statement.md     what to optimize
//! criteria.md      how candidates are judged
//! context.md       the interface candidates must follow
//! seed*.txt        one or more initial programs with EVOLVE-BLOCK markers
//! evaluator.conf   command = bench-cbl
//!                  splits = minibatch, full
//! hints.txt        optional hint bank, one hint per line
//! ```

use std::path::{Path, PathBuf};
use std::time::Duration;

use adrs_bench::doc::{Doc, DocError};
use adrs_bench::protocol::{EvaluateFn, Report};
use adrs_core::candidate::InstanceScore;
use adrs_core::config::RunConfig;
use adrs_core::harness::{EvalOutcome, Evaluate, EvaluatorSpec, ExitKind};
use adrs_core::prompt::ProblemSpec;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: no seed*.txt files")]
    NoSeeds { path: PathBuf },
    #[error("{path}: {source}")]
    Conf { path: PathBuf, source: DocError },
    #[error("{0}: `command` is empty")]
    EmptyCommand(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub dir: PathBuf,
    pub spec: ProblemSpec,
    pub seeds: Vec<String>,
    pub hints: Vec<String>,
    pub command: Vec<String>,
    pub splits: Vec<String>,
}

fn read(path: &Path) -> Result<String, ProblemError> {
    std::fs::read_to_string(path).map_err(|source| ProblemError::Io {
        path: path.to_path_buf(),
        source,
    })
}

impl Problem {
    pub fn load(dir: &Path) -> Result<Self, ProblemError> {
        let spec = ProblemSpec {
            statement: read(&dir.join("statement.md"))?,
            criteria: read(&dir.join("criteria.md"))?,
            context: read(&dir.join("context.md"))?,
        };
        let entries = std::fs::read_dir(dir).map_err(|source| ProblemError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut seed_paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("seed") && n.ends_with(".txt"))
            })
            .collect();
        seed_paths.sort();
        if seed_paths.is_empty() {
            return Err(ProblemError::NoSeeds { path: dir.to_path_buf() });
        }
        let seeds = seed_paths.iter().map(|p| read(p)).collect::<Result<_, _>>()?;

        let hints_path = dir.join("hints.txt");
        let hints = if hints_path.is_file() {
            read(&hints_path)?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect()
        } else {
            Vec::new()
        };

        let conf_path = dir.join("evaluator.conf");
        let conf_err = |source| ProblemError::Conf {
            path: conf_path.clone(),
            source,
        };
        let doc = Doc::parse(&read(&conf_path)?).map_err(conf_err)?;
        doc.reject_unknown(&["command", "splits"]).map_err(conf_err)?;
        let command: Vec<String> = doc
            .require_str("command")
            .map_err(conf_err)?
            .split_whitespace()
            .map(String::from)
            .collect();
        if command.is_empty() {
            return Err(ProblemError::EmptyCommand(conf_path));
        }
        let splits = doc
            .str("splits")
            .unwrap_or("minibatch, full")
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        Ok(Self {
            dir: dir.to_path_buf(),
            spec,
            seeds,
            hints,
            command,
            splits,
        })
    }

    /// Evaluator settings for a run. Bare program names are looked up next
    /// to `exe_dir` first, then in the problem directory, then on `PATH`.
    pub fn evaluator_spec(&self, cfg: &RunConfig, work: &Path, exe_dir: Option<&Path>) -> EvaluatorSpec {
        let mut command = self.command.clone();
        command[0] = resolve_program(&command[0], &self.dir, exe_dir);
        EvaluatorSpec {
            command,
            timeout: Duration::from_secs_f64(cfg.evaluator_timeout),
            splits: self.splits.clone(),
            working_dir: work.to_path_buf(),
            env: vec![("ADRS_MINIBATCH_SIZE".into(), cfg.minibatch_size.to_string())],
        }
    }
}

pub fn resolve_program(program: &str, problem_dir: &Path, exe_dir: Option<&Path>) -> String {
    let p = Path::new(program);
    if p.components().count() > 1 {
        return if p.is_relative() && problem_dir.join(p).is_file() {
            problem_dir.join(p).display().to_string()
        } else {
            program.to_string()
        };
    }
    let exe_name = format!("{program}{}", std::env::consts::EXE_SUFFIX);
    exe_dir
        .map(|d| d.join(&exe_name))
        .into_iter()
        .chain([problem_dir.join(program)])
        .find(|c| c.is_file())
        .map_or_else(|| program.to_string(), |c| c.display().to_string())
}

pub const BENCHMARKS: [&str; 4] = ["cbl", "eplb", "txn", "llmsql"];

pub fn benchmark(name: &str) -> Option<EvaluateFn> {
    match name {
        "cbl" => Some(adrs_bench::cbl::eval::evaluate),
        "eplb" => Some(adrs_bench::eplb::evaluate),
        "txn" => Some(adrs_bench::txn::evaluate),
        "llmsql" => Some(adrs_bench::llmsql::evaluate),
        _ => None,
    }
}

/// Runs a benchmark evaluator in this process instead of as a command.
pub struct InProcess {
    evaluate: EvaluateFn,
    floor: f64,
}

impl InProcess {
    pub fn new(evaluate: EvaluateFn, floor: f64) -> Self {
        Self { evaluate, floor }
    }
}

pub fn outcome(report: Report, floor: f64, wall_time: f64) -> EvalOutcome {
    EvalOutcome {
        valid: report.valid,
        combined_score: report.combined_score,
        metrics: report.metrics,
        per_instance: report
            .per_instance
            .into_iter()
            .map(|p| InstanceScore { id: p.id, score: p.score })
            .collect(),
        feedback: report.feedback,
        wall_time,
        exit_kind: ExitKind::Ok,
    }
    .normalized(floor)
}

impl Evaluate for InProcess {
    fn evaluate(&self, text: &str, split: &str, seed: u64) -> EvalOutcome {
        let start = std::time::Instant::now();
        let report = (self.evaluate)(text, split, seed);
        outcome(report, self.floor, start.elapsed().as_secs_f64())
    }
}
