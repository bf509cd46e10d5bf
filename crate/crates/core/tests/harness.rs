#![cfg(all(feature = "host", unix))]

use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use adrs_core::harness::{score_with_resilience, CommandEvaluator, Evaluate, EvaluatorSpec, ExitKind, SpecError};

const FLOOR: f64 = -1.0;

fn script(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, format!("#!/bin/sh\n{body}\n")).unwrap();
    std::fs::set_permissions(&p, std::fs::Permissions::from_mode(0o755)).unwrap();
    p
}

fn spec(dir: &Path, program: &Path) -> EvaluatorSpec {
    let work = dir.join("work");
    std::fs::create_dir_all(&work).unwrap();
    EvaluatorSpec {
        command: vec![program.display().to_string()],
        timeout: Duration::from_secs(10),
        splits: vec!["minibatch".into(), "full".into()],
        working_dir: work,
        env: vec![],
    }
}

fn leftovers(dir: &Path) -> usize {
    std::fs::read_dir(dir.join("work")).unwrap().count()
}

/// Echoes its arguments back: score is the seed, the split goes to feedback,
/// the candidate's first line to a metric.
const ECHO: &str = r#"
while [ $# -gt 0 ]; do
  case "$1" in
    --candidate) cand="$2"; shift 2;;
    --split) split="$2"; shift 2;;
    --seed) seed="$2"; shift 2;;
    *) shift;;
  esac
done
first=$(head -n1 "$cand")
printf '{"valid": true, "combined_score": %s, "metrics": {"first": %s, "size": %s}, "per_instance": [{"id": "z", "score": 1}, {"id": "a", "score": 2}], "feedback": "split=%s"}\n' "$seed" "$first" "${ADRS_MINIBATCH_SIZE:-0}" "$split"
"#;

#[test]
fn protocol_arguments_and_report_fields() {
    let tmp = tempfile::tempdir().unwrap();
    let prog = script(tmp.path(), "echo.sh", ECHO);
    let mut s = spec(tmp.path(), &prog);
    s.env.push(("ADRS_MINIBATCH_SIZE".into(), "7".into()));
    let ev = CommandEvaluator::new(s, FLOOR);
    let out = ev.evaluate("42\nrest\n", "minibatch", 5);
    assert_eq!(out.exit_kind, ExitKind::Ok);
    assert!(out.valid);
    assert_eq!(out.combined_score, 5.0);
    assert_eq!(out.metrics["first"], 42.0);
    assert_eq!(out.metrics["size"], 7.0);
    assert_eq!(out.feedback, "split=minibatch");
    let ids: Vec<&str> = out.per_instance.iter().map(|p| p.id.as_str()).collect();
    assert_eq!(ids, ["z", "a"]);
    assert!(out.wall_time > 0.0);
    assert_eq!(ev.invocations(), 1);
    assert_eq!(leftovers(tmp.path()), 0, "successful runs clean up");
}

#[test]
fn resilience_takes_the_median_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let prog = script(tmp.path(), "echo.sh", ECHO);
    let ev = CommandEvaluator::new(spec(tmp.path(), &prog), FLOOR);
    let out = score_with_resilience(&ev, "1\n", "full", &[9, 1, 4], FLOOR, 3);
    assert_eq!(out.combined_score, 4.0);
    assert_eq!(ev.invocations(), 3);
}

#[test]
fn timeouts_are_killed_and_floored() {
    let tmp = tempfile::tempdir().unwrap();
    let prog = script(tmp.path(), "slow.sh", "sleep 5\necho '{}'");
    let mut s = spec(tmp.path(), &prog);
    s.timeout = Duration::from_millis(300);
    let ev = CommandEvaluator::new(s, FLOOR);
    let start = Instant::now();
    let out = ev.evaluate("x\n", "full", 0);
    assert!(start.elapsed() < Duration::from_secs(4));
    assert_eq!(out.exit_kind, ExitKind::Timeout);
    assert!(!out.valid);
    assert_eq!(out.combined_score, FLOOR);
    assert_eq!(leftovers(tmp.path()), 1, "failed runs keep their directory");
}

#[test]
fn crashes_and_bad_reports_are_floored() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        ("crash.sh", "echo 'Traceback: boom' >&2\nexit 3", "boom"),
        ("two.sh", "echo '{}'\necho '{}'", "one report line"),
        ("junk.sh", "echo 'score 1'", "not JSON"),
        ("partial.sh", r#"echo '{"valid": true}'"#, "combined_score"),
        ("dup.sh", r#"echo '{"valid": true, "combined_score": 1, "metrics": {}, "per_instance": [{"id": "a", "score": 1}, {"id": "a", "score": 2}]}'"#, "duplicate"),
    ];
    for (name, body, needle) in cases {
        let prog = script(tmp.path(), name, body);
        let out = CommandEvaluator::new(spec(tmp.path(), &prog), FLOOR).evaluate("x\n", "full", 0);
        assert_eq!(out.exit_kind, ExitKind::Crash, "{name}");
        assert_eq!(out.combined_score, FLOOR, "{name}");
        assert!(out.feedback.contains(needle), "{name}: {}", out.feedback);
    }
}

#[test]
fn invalid_reports_keep_feedback_and_stderr() {
    let tmp = tempfile::tempdir().unwrap();
    let prog = script(
        tmp.path(),
        "invalid.sh",
        r#"echo 'warning: slow' >&2
echo '{"valid": false, "combined_score": 0.9, "metrics": {"x": 1}, "feedback": "wrong answer on t3"}'"#,
    );
    let out = CommandEvaluator::new(spec(tmp.path(), &prog), FLOOR).evaluate("x\n", "full", 0);
    assert_eq!(out.exit_kind, ExitKind::Ok);
    assert!(!out.valid);
    assert_eq!(out.combined_score, FLOOR);
    assert_eq!(out.feedback, "wrong answer on t3\nwarning: slow\n");
}

#[test]
fn spec_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let prog = script(tmp.path(), "echo.sh", ECHO);
    let good = spec(tmp.path(), &prog);
    assert_eq!(good.validate(true), Ok(()));

    let mut s = good.clone();
    s.command = vec![];
    assert_eq!(s.validate(false), Err(SpecError::EmptyCommand));
    let mut s = good.clone();
    s.command = vec![tmp.path().join("missing").display().to_string()];
    assert!(matches!(s.validate(false), Err(SpecError::NotExecutable(_))));
    let mut s = good.clone();
    s.command = vec!["sh".into(), "-c".into()];
    assert_eq!(s.validate(false), Ok(()), "bare names resolve through PATH");
    let mut s = good.clone();
    s.timeout = Duration::ZERO;
    assert_eq!(s.validate(false), Err(SpecError::Timeout));
    let mut s = good.clone();
    s.splits = vec!["minibatch".into()];
    assert_eq!(s.validate(false), Err(SpecError::NoFullSplit));
    let mut s = good;
    s.splits = vec!["full".into()];
    assert_eq!(s.validate(false), Ok(()));
    assert_eq!(s.validate(true), Err(SpecError::NoMinibatch));
}
