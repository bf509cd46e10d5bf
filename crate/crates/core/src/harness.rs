//! Evaluator invocation, report parsing, resilience and gates.
//!
//! Protocol: the engine runs `<command> --candidate <path> --split <name>
//! --seed <u64>`; the evaluator prints one JSON line and exits 0.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::candidate::InstanceScore;
use crate::score::median_aggregate;

pub const STDERR_LIMIT: usize = 8 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitKind {
    Ok,
    Crash,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub valid: bool,
    pub combined_score: f64,
    pub metrics: BTreeMap<String, f64>,
    pub per_instance: Vec<InstanceScore>,
    pub feedback: String,
    pub wall_time: f64,
    pub exit_kind: ExitKind,
}

impl EvalOutcome {
    pub fn failed(kind: ExitKind, floor: f64, feedback: String) -> Self {
        Self {
            valid: false,
            combined_score: floor,
            metrics: BTreeMap::new(),
            per_instance: Vec::new(),
            feedback,
            wall_time: 0.0,
            exit_kind: kind,
        }
    }

    /// Invalid or failed outcomes carry the floor score.
    pub fn normalized(mut self, floor: f64) -> Self {
        if self.exit_kind != ExitKind::Ok {
            self.valid = false;
        }
        if !self.valid {
            self.combined_score = floor;
        }
        self
    }
}

/// Parses one report line.
pub fn parse_report(line: &str) -> Result<EvalOutcome, String> {
    let v: Value = serde_json::from_str(line.trim()).map_err(|e| format!("report is not JSON: {e}"))?;
    let obj = v.as_object().ok_or("report is not a JSON object")?;
    let valid = obj
        .get("valid")
        .and_then(Value::as_bool)
        .ok_or("report lacks boolean `valid`")?;
    let combined_score = obj
        .get("combined_score")
        .and_then(Value::as_f64)
        .ok_or("report lacks numeric `combined_score`")?;
    let mut metrics = BTreeMap::new();
    for (k, m) in obj
        .get("metrics")
        .and_then(Value::as_object)
        .ok_or("report lacks object `metrics`")?
    {
        let x = m.as_f64().ok_or_else(|| format!("metric `{k}` is not a number"))?;
        metrics.insert(k.clone(), x);
    }
    let mut per_instance = Vec::new();
    if let Some(list) = obj.get("per_instance") {
        let list = list.as_array().ok_or("`per_instance` is not an array")?;
        let mut seen = BTreeSet::new();
        for item in list {
            let id = item["id"].as_str().ok_or("per_instance entry lacks string `id`")?;
            let score = item["score"].as_f64().ok_or("per_instance entry lacks numeric `score`")?;
            if !seen.insert(id.to_string()) {
                return Err(format!("duplicate per_instance id `{id}`"));
            }
            per_instance.push(InstanceScore {
                id: id.into(),
                score,
            });
        }
    }
    let feedback = match obj.get("feedback") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err("`feedback` is not a string".into()),
    };
    Ok(EvalOutcome {
        valid,
        combined_score,
        metrics,
        per_instance,
        feedback,
        wall_time: 0.0,
        exit_kind: ExitKind::Ok,
    })
}

pub fn truncate_utf8(s: &str, max: usize) -> &str {
    if s.len() <= max {
        return s;
    }
    let mut end = max;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    &s[..end]
}

/// Something that scores candidate text on a split.
pub trait Evaluate: Sync {
    fn evaluate(&self, text: &str, split: &str, seed: u64) -> EvalOutcome;
}

impl<F> Evaluate for F
where
    F: Fn(&str, &str, u64) -> EvalOutcome + Sync,
{
    fn evaluate(&self, text: &str, split: &str, seed: u64) -> EvalOutcome {
        self(text, split, seed)
    }
}

/// Runs `seeds.len()` evaluations, at most `parallel` at a time. The score
/// is the median; metrics and per-instance results come from the run that
/// scored the median. Any crash or timeout fails the whole outcome.
pub fn score_with_resilience(
    evaluator: &dyn Evaluate,
    text: &str,
    split: &str,
    seeds: &[u64],
    floor: f64,
    parallel: usize,
) -> EvalOutcome {
    assert!(!seeds.is_empty(), "resilience needs at least one seed");
    let mut runs: Vec<EvalOutcome> = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(parallel.max(1)) {
        if chunk.len() == 1 {
            runs.push(evaluator.evaluate(text, split, chunk[0]).normalized(floor));
            continue;
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&seed| s.spawn(move || evaluator.evaluate(text, split, seed).normalized(floor)))
                .collect();
            runs.extend(handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")));
        });
    }
    let wall: f64 = runs.iter().map(|r| r.wall_time).sum();
    if let Some(bad) = runs.iter().find(|r| r.exit_kind != ExitKind::Ok) {
        let mut out = EvalOutcome::failed(bad.exit_kind, floor, bad.feedback.clone());
        out.wall_time = wall;
        return out;
    }
    let scores: Vec<f64> = runs.iter().map(|r| r.combined_score).collect();
    let med = median_aggregate(&scores).expect("nonempty");
    let pick = (0..runs.len())
        .min_by(|&a, &b| (scores[a] - med).abs().total_cmp(&(scores[b] - med).abs()).then(a.cmp(&b)))
        .expect("nonempty");
    let mut out = runs.swap_remove(pick);
    out.combined_score = med;
    out.wall_time = wall;
    out
}

pub fn correctness_gate(outcome: &EvalOutcome) -> bool {
    outcome.valid
}

/// Strict improvement on the minibatch is required to earn a full run.
pub fn cascade_passes(child_minibatch: f64, parent_minibatch: f64) -> bool {
    child_minibatch > parent_minibatch
}

#[cfg(feature = "host")]
pub use process::{CommandEvaluator, EvaluatorSpec, SpecError};

#[cfg(feature = "host")]
mod process {
    use std::io::Read;
    use std::path::{Path, PathBuf};
    use std::process::{Command, Stdio};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::time::{Duration, Instant};

    use serde::{Deserialize, Serialize};
    use thiserror::Error;
    use wait_timeout::ChildExt;

    use super::{parse_report, truncate_utf8, EvalOutcome, Evaluate, ExitKind, STDERR_LIMIT};

    #[derive(Debug, Error, Clone, PartialEq, Eq)]
    pub enum SpecError {
        #[error("evaluator command is empty")]
        EmptyCommand,
        #[error("evaluator `{0}` not found or not executable")]
        NotExecutable(String),
        #[error("evaluator timeout must be positive")]
        Timeout,
        #[error("evaluator splits must include `full`")]
        NoFullSplit,
        #[error("cascade needs a `minibatch` split")]
        NoMinibatch,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct EvaluatorSpec {
        /// Executable followed by fixed arguments.
        pub command: Vec<String>,
        pub timeout: Duration,
        pub splits: Vec<String>,
        pub working_dir: PathBuf,
        /// Extra environment for the evaluator process.
        pub env: Vec<(String, String)>,
    }

    fn is_executable(p: &Path) -> bool {
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            p.metadata().is_ok_and(|m| m.is_file() && m.permissions().mode() & 0o111 != 0)
        }
        #[cfg(not(unix))]
        {
            p.is_file()
        }
    }

    pub(crate) fn resolve(program: &str) -> Option<PathBuf> {
        let p = Path::new(program);
        if p.components().count() > 1 {
            return is_executable(p).then(|| p.to_path_buf());
        }
        std::env::var_os("PATH").and_then(|paths| {
            std::env::split_paths(&paths)
                .map(|d| d.join(program))
                .find(|c| is_executable(c))
        })
    }

    impl EvaluatorSpec {
        pub fn validate(&self, cascade: bool) -> Result<(), SpecError> {
            let program = self.command.first().ok_or(SpecError::EmptyCommand)?;
            if resolve(program).is_none() {
                return Err(SpecError::NotExecutable(program.clone()));
            }
            if self.timeout.is_zero() {
                return Err(SpecError::Timeout);
            }
            if !self.splits.iter().any(|s| s == "full") {
                return Err(SpecError::NoFullSplit);
            }
            if cascade && !self.splits.iter().any(|s| s == "minibatch") {
                return Err(SpecError::NoMinibatch);
            }
            Ok(())
        }
    }

    /// Runs the evaluator as a subprocess in a fresh directory per call.
    /// Directories of failed evaluations are kept for inspection.
    pub struct CommandEvaluator {
        spec: EvaluatorSpec,
        floor: f64,
        invocations: AtomicUsize,
    }

    impl CommandEvaluator {
        pub fn new(spec: EvaluatorSpec, floor: f64) -> Self {
            Self {
                spec,
                floor,
                invocations: AtomicUsize::new(0),
            }
        }

        pub fn invocations(&self) -> usize {
            self.invocations.load(Ordering::SeqCst)
        }

        fn run(&self, dir: &Path, text: &str, split: &str, seed: u64) -> Result<EvalOutcome, EvalOutcome> {
            let fail = |kind, msg: String| EvalOutcome::failed(kind, self.floor, msg);
            let path = dir.join("candidate.txt");
            std::fs::write(&path, text).map_err(|e| fail(ExitKind::Crash, format!("writing candidate: {e}")))?;
            let mut cmd = Command::new(&self.spec.command[0]);
            cmd.args(&self.spec.command[1..])
                .arg("--candidate")
                .arg(&path)
                .args(["--split", split, "--seed", &seed.to_string()])
                .current_dir(dir)
                .envs(self.spec.env.iter().map(|(k, v)| (k, v)))
                .stdin(Stdio::null())
                .stdout(Stdio::piped())
                .stderr(Stdio::piped());
            self.invocations.fetch_add(1, Ordering::SeqCst);
            let mut child = cmd
                .spawn()
                .map_err(|e| fail(ExitKind::Crash, format!("spawning evaluator: {e}")))?;
            let mut out_pipe = child.stdout.take().expect("piped");
            let mut err_pipe = child.stderr.take().expect("piped");
            let out_reader = std::thread::spawn(move || {
                let mut s = String::new();
                let _ = out_pipe.read_to_string(&mut s);
                s
            });
            let err_reader = std::thread::spawn(move || {
                let mut s = String::new();
                let _ = err_pipe.read_to_string(&mut s);
                s
            });
            let status = match child.wait_timeout(self.spec.timeout) {
                Ok(Some(status)) => status,
                Ok(None) => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(fail(
                        ExitKind::Timeout,
                        format!("evaluator exceeded {:.1}s", self.spec.timeout.as_secs_f64()),
                    ));
                }
                Err(e) => return Err(fail(ExitKind::Crash, format!("waiting for evaluator: {e}"))),
            };
            let stdout = out_reader.join().unwrap_or_default();
            let stderr = err_reader.join().unwrap_or_default();
            let stderr = truncate_utf8(&stderr, STDERR_LIMIT);
            if !status.success() {
                return Err(fail(
                    ExitKind::Crash,
                    format!("evaluator exited with {status}\n{stderr}"),
                ));
            }
            let lines: Vec<&str> = stdout.lines().filter(|l| !l.trim().is_empty()).collect();
            if lines.len() != 1 {
                return Err(fail(
                    ExitKind::Crash,
                    format!("expected one report line on stdout, got {}\n{stderr}", lines.len()),
                ));
            }
            let mut outcome = parse_report(lines[0]).map_err(|m| fail(ExitKind::Crash, format!("{m}\n{stderr}")))?;
            if !stderr.trim().is_empty() {
                if !outcome.feedback.is_empty() {
                    outcome.feedback.push('\n');
                }
                outcome.feedback.push_str(stderr);
            }
            Ok(outcome)
        }
    }

    impl Evaluate for CommandEvaluator {
        fn evaluate(&self, text: &str, split: &str, seed: u64) -> EvalOutcome {
            let start = Instant::now();
            let dir = match tempfile::Builder::new()
                .prefix("adrs-eval-")
                .tempdir_in(&self.spec.working_dir)
            {
                Ok(d) => d,
                Err(e) => {
                    return EvalOutcome::failed(ExitKind::Crash, self.floor, format!("creating working dir: {e}"))
                }
            };
            let result = self.run(dir.path(), text, split, seed);
            let failed = result.is_err() || result.as_ref().is_ok_and(|o| !o.valid);
            if failed {
                let kept = dir.keep();
                log::warn!("evaluation failed; working dir kept at {}", kept.display());
            }
            let mut outcome = result.unwrap_or_else(|e| e).normalized(self.floor);
            outcome.wall_time = start.elapsed().as_secs_f64();
            outcome
        }
    }

    impl std::fmt::Debug for CommandEvaluator {
        fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
            f.debug_struct("CommandEvaluator").field("spec", &self.spec).finish()
        }
    }

}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use super::*;

    fn ok(score: f64) -> EvalOutcome {
        EvalOutcome {
            valid: true,
            combined_score: score,
            metrics: BTreeMap::from([("m".to_string(), score)]),
            per_instance: vec![],
            feedback: format!("score {score}"),
            wall_time: 0.0,
            exit_kind: ExitKind::Ok,
        }
    }

    #[test]
    fn report_parsing() {
        let o = parse_report(r#"{"valid":true,"combined_score":0.5,"metrics":{}}"#).unwrap();
        assert!(o.valid);
        assert_eq!(o.combined_score, 0.5);
        let o = parse_report(
            r#"{"valid":true,"combined_score":1,"metrics":{"a":2},"per_instance":[{"id":"t1","score":0.2},{"id":"t2","score":0.8}],"feedback":"fine"}"#,
        )
        .unwrap();
        let ids: Vec<_> = o.per_instance.iter().map(|p| (p.id.as_str(), p.score)).collect();
        assert_eq!(ids, vec![("t1", 0.2), ("t2", 0.8)]);
        assert_eq!(o.feedback, "fine");
        for bad in [
            "not json",
            "[]",
            r#"{"combined_score":1,"metrics":{}}"#,
            r#"{"valid":true,"metrics":{}}"#,
            r#"{"valid":true,"combined_score":1}"#,
            r#"{"valid":true,"combined_score":1,"metrics":{"a":"x"}}"#,
            r#"{"valid":true,"combined_score":1,"metrics":{},"per_instance":[{"id":"a","score":1},{"id":"a","score":2}]}"#,
        ] {
            assert!(parse_report(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn normalization_applies_the_floor() {
        let mut o = ok(0.7);
        o.valid = false;
        assert_eq!(o.normalized(-1.0).combined_score, -1.0);
        let mut o = ok(0.7);
        o.exit_kind = ExitKind::Timeout;
        let n = o.normalized(-1.0);
        assert!(!n.valid);
        assert_eq!(n.combined_score, -1.0);
    }

    #[test]
    fn resilience_takes_the_median_run() {
        let scripted = |_: &str, _: &str, seed: u64| ok([0.4, 0.9, 0.5][seed as usize]);
        let o = score_with_resilience(&scripted, "x", "full", &[0, 1, 2], -1.0, 1);
        assert_eq!(o.combined_score, 0.5);
        assert_eq!(o.feedback, "score 0.5");
        let same = score_with_resilience(&scripted, "x", "full", &[1], -1.0, 1);
        assert_eq!(same, scripted("x", "full", 1));
        let parallel = score_with_resilience(&scripted, "x", "full", &[0, 1, 2], -1.0, 3);
        assert_eq!(parallel, o);
    }

    #[test]
    fn resilience_fails_closed() {
        let calls = AtomicUsize::new(0);
        let crashy = |_: &str, _: &str, seed: u64| {
            calls.fetch_add(1, Ordering::SeqCst);
            if seed == 1 {
                EvalOutcome::failed(ExitKind::Crash, 0.0, "boom".into())
            } else {
                ok(0.9)
            }
        };
        let o = score_with_resilience(&crashy, "x", "full", &[0, 1, 2], -1.0, 2);
        assert!(!o.valid);
        assert_eq!(o.combined_score, -1.0);
        assert_eq!(o.exit_kind, ExitKind::Crash);
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn gates() {
        assert!(cascade_passes(0.6, 0.5));
        assert!(!cascade_passes(0.5, 0.5));
        assert!(correctness_gate(&ok(0.1)));
        assert!(!correctness_gate(&EvalOutcome::failed(ExitKind::Timeout, -1.0, String::new())));
    }

    #[test]
    fn utf8_truncation() {
        assert_eq!(truncate_utf8("héllo", 2), "h");
        assert_eq!(truncate_utf8("abc", 8), "abc");
    }
}
