use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use adrs_core::candidate::InstanceScore;
use adrs_core::config::RunConfig;
use adrs_core::control::Command;
use adrs_core::engine::{Engine, EngineError, RunSetup};
use adrs_core::events::{fold, EventBody, GenStatus, Origin, RunEvent};
use adrs_core::generator::ScriptedGenerator;
use adrs_core::harness::{EvalOutcome, Evaluate, ExitKind};
use adrs_core::prompt::ProblemSpec;
use adrs_core::store::{StoreError, StoredRun};

const SEED: &str = "# toy program\n# EVOLVE-BLOCK-START\nvalue = 0.5\n# EVOLVE-BLOCK-END\n# end\n";

/// Scores `value = x` as x. `value = crash` crashes, anything unparseable
/// is invalid. Minibatch scores are x as well.
struct Toy {
    calls: AtomicUsize,
    by_split: std::sync::Mutex<BTreeMap<String, usize>>,
}

impl Toy {
    fn new() -> Self {
        Self {
            calls: AtomicUsize::new(0),
            by_split: Default::default(),
        }
    }

    fn count(&self, split: &str) -> usize {
        self.by_split.lock().unwrap().get(split).copied().unwrap_or(0)
    }
}

impl Evaluate for Toy {
    fn evaluate(&self, text: &str, split: &str, _seed: u64) -> EvalOutcome {
        self.calls.fetch_add(1, Ordering::SeqCst);
        *self.by_split.lock().unwrap().entry(split.into()).or_insert(0) += 1;
        let raw = text
            .lines()
            .find_map(|l| l.strip_prefix("value = "))
            .unwrap_or("")
            .trim();
        let mut out = EvalOutcome {
            valid: true,
            combined_score: 0.0,
            metrics: BTreeMap::new(),
            per_instance: vec![],
            feedback: String::new(),
            wall_time: 0.001,
            exit_kind: ExitKind::Ok,
        };
        if raw == "crash" {
            out.exit_kind = ExitKind::Crash;
            return out;
        }
        match raw.parse::<f64>() {
            Ok(x) => {
                out.combined_score = x;
                out.metrics.insert("value".into(), x);
                out.per_instance = vec![
                    InstanceScore { id: "a".into(), score: x },
                    InstanceScore { id: "b".into(), score: 1.0 - x },
                ];
            }
            Err(_) => {
                out.valid = false;
                out.feedback = format!("SyntaxError: cannot read value `{raw}`");
            }
        }
        out
    }
}

fn problem() -> ProblemSpec {
    ProblemSpec {
        statement: "Maximize value.".into(),
        criteria: "Higher is better.".into(),
        context: "value = <number>".into(),
    }
}

fn full(v: &str) -> String {
    format!("```\nvalue = {v}\n```\n")
}

fn script(replies: &[String]) -> Box<ScriptedGenerator> {
    Box::new(ScriptedGenerator::new(replies.to_vec()))
}

fn base_config() -> RunConfig {
    RunConfig {
        max_iterations: 20,
        num_islands: 2,
        archive_size: 5,
        patch_type_probs: [0.0, 1.0, 0.0],
        parallel_evaluations: 1,
        checkpoint_interval: 10,
        plateau_window: 1000,
        ..RunConfig::default()
    }
}

fn setup(config: RunConfig, hints: &[&str]) -> RunSetup {
    RunSetup {
        config,
        problem: problem(),
        seeds: vec![SEED.into()],
        hint_bank: hints.iter().map(|s| s.to_string()).collect(),
    }
}

fn varied(n: usize) -> Vec<String> {
    (0..n).map(|i| full(&format!("0.{:03}", (i * 37) % 1000))).collect()
}

fn events(dir: &Path) -> Vec<RunEvent> {
    StoredRun::load(dir).unwrap().events
}

fn check_fold(dir: &Path) {
    let run = StoredRun::load(dir).unwrap();
    let state = fold(run.config.clone(), run.meta.hint_bank.clone(), &run.events);
    assert_eq!(state.event_count as usize, run.events.len());
    // Every referenced candidate exists on disk.
    for ev in &run.events {
        let ids: Vec<u64> = match &ev.body {
            EventBody::Generated { candidate, parent, .. } => candidate.iter().chain(parent.iter()).copied().collect(),
            EventBody::Evaluated { candidate, .. } | EventBody::Inserted { candidate, .. } => vec![*candidate],
            EventBody::Migrated { moves } => moves.iter().flat_map(|m| [m.source, m.copy]).collect(),
            _ => vec![],
        };
        for id in ids {
            assert!(run.candidate(id).is_ok(), "candidate {id} missing");
        }
    }
    let mut best = f64::NEG_INFINITY;
    for s in &state.best_history {
        assert!(*s >= best, "best score decreased");
        best = *s;
    }
}

#[test]
fn identical_runs_log_identical_events() {
    let tmp = tempfile::tempdir().unwrap();
    let replies = varied(40);
    let mut logs = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        let toy = Toy::new();
        let mut cfg = base_config();
        cfg.patch_type_probs = [0.0, 0.8, 0.2];
        let engine = Engine::create(&dir, name, setup(cfg, &[]), &toy, script(&replies), None).unwrap();
        let report = engine.run().unwrap();
        assert_eq!(report.status, "completed");
        check_fold(&dir);
        logs.push(fs::read(dir.join("events.jsonl")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn live_state_equals_fold_of_stored_log() {
    let tmp = tempfile::tempdir().unwrap();
    let toy = Toy::new();
    let engine = Engine::create(tmp.path(), "r", setup(base_config(), &[]), &toy, script(&varied(30)), None).unwrap();
    let live = engine.live();
    engine.run().unwrap();
    let run = StoredRun::load(tmp.path()).unwrap();
    assert_eq!(fold(run.config, run.meta.hint_bank, &run.events), live.state());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let replies = varied(40);
    let mut cfg = base_config();
    cfg.patch_type_probs = [0.0, 0.7, 0.3];
    cfg.meta_interval = 5;
    let summaries: Vec<String> = (0..10).map(|i| format!("note {i}")).collect();

    let whole = tmp.path().join("whole");
    let toy = Toy::new();
    Engine::create(&whole, "w", setup(cfg.clone(), &[]), &toy, script(&replies), Some(script(&summaries)))
        .unwrap()
        .run()
        .unwrap();

    let cut = tmp.path().join("cut");
    let report = Engine::create(&cut, "c", setup(cfg, &[]), &toy, script(&replies), Some(script(&summaries)))
        .unwrap()
        .halt_after(10)
        .run()
        .unwrap();
    assert_eq!(report.status, "interrupted");
    let report = Engine::resume(&cut.join("checkpoints/10"), "c", &toy, script(&replies), Some(script(&summaries)))
        .unwrap()
        .run()
        .unwrap();
    assert_eq!(report.status, "completed");
    assert_eq!(
        fs::read(whole.join("events.jsonl")).unwrap(),
        fs::read(cut.join("events.jsonl")).unwrap()
    );

    // The final checkpoint resumes straight to completion.
    let report = Engine::resume(&cut.join("checkpoints/20"), "c", &toy, script(&replies), None)
        .unwrap()
        .run()
        .unwrap();
    assert_eq!(report.status, "completed");
    assert_eq!(
        fs::read(whole.join("events.jsonl")).unwrap(),
        fs::read(cut.join("events.jsonl")).unwrap()
    );
}

#[test]
fn tampered_log_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let toy = Toy::new();
    Engine::create(tmp.path(), "r", setup(base_config(), &[]), &toy, script(&varied(30)), None)
        .unwrap()
        .run()
        .unwrap();
    let path = tmp.path().join("events.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.replacen("\"island\":0", "\"island\":1", 1)).unwrap();
    let err = Engine::resume(&tmp.path().join("checkpoints/10"), "r", &toy, script(&[]), None).err().unwrap();
    assert!(matches!(err, EngineError::Store(StoreError::Integrity(_))), "{err}");
}

#[test]
fn flat_run_switches_phase_once_and_keeps_the_hint() {
    let tmp = tempfile::tempdir().unwrap();
    let toy = Toy::new();
    let mut cfg = base_config();
    cfg.max_iterations = 40;
    cfg.plateau_window = 10;
    let replies: Vec<String> = (0..40).map(|_| full("0.5")).collect();
    Engine::create(tmp.path(), "r", setup(cfg, &["try proportional allocation"]), &toy, script(&replies), None)
        .unwrap()
        .run()
        .unwrap();
    let evs = events(tmp.path());
    let switches: Vec<u64> = evs
        .iter()
        .filter(|e| matches!(e.body, EventBody::PhaseSwitch { .. }))
        .map(|e| e.iteration)
        .collect();
    assert_eq!(switches, vec![10]);
    let plateaus: Vec<u64> = evs
        .iter()
        .filter(|e| matches!(e.body, EventBody::Plateau { .. }))
        .map(|e| e.iteration)
        .collect();
    assert_eq!(plateaus, vec![10, 20, 30, 40]);
    for it in 1..=40 {
        let prompt = fs::read_to_string(tmp.path().join(format!("prompts/{it}.txt"))).unwrap();
        assert_eq!(prompt.contains("try proportional allocation"), it > 10, "iteration {it}");
    }
}

#[test]
fn second_plateau_appends_next_bank_hint() {
    let tmp = tempfile::tempdir().unwrap();
    let toy = Toy::new();
    let mut cfg = base_config();
    cfg.max_iterations = 25;
    cfg.plateau_window = 10;
    let replies: Vec<String> = (0..25).map(|_| full("0.5")).collect();
    Engine::create(tmp.path(), "r", setup(cfg, &["h1 first", "h2 second"]), &toy, script(&replies), None)
        .unwrap()
        .run()
        .unwrap();
    let p = fs::read_to_string(tmp.path().join("prompts/21.txt")).unwrap();
    assert!(p.find("h1 first").unwrap() < p.find("h2 second").unwrap());
    let p = fs::read_to_string(tmp.path().join("prompts/15.txt")).unwrap();
    assert!(p.contains("h1 first") && !p.contains("h2 second"));
}

#[test]
fn cascade_and_resilience_invocations_match_the_log() {
    let tmp = tempfile::tempdir().unwrap();
    let toy = Toy::new();
    let mut cfg = base_config();
    cfg.max_iterations = 30;
    cfg.cascade_enabled = true;
    cfg.score.resilience_k = 3;
    let replies: Vec<String> = (0..30).map(|i| full(&format!("0.{:02}", (i * 53) % 100))).collect();
    Engine::create(tmp.path(), "r", setup(cfg, &[]), &toy, script(&replies), None)
        .unwrap()
        .run()
        .unwrap();
    let evs = events(tmp.path());
    let mut passed = 0;
    let mut full_evals = 0;
    let mut logged = 0;
    for e in &evs {
        if let EventBody::Evaluated { seeds, split, gate, .. } = &e.body {
            assert_eq!(seeds.len(), 3);
            logged += seeds.len();
            if e.iteration == 0 {
                continue;
            }
            if split == "full" {
                full_evals += 1;
            }
            if gate.is_some_and(|g| g.passed) {
                passed += 1;
            }
        }
    }
    assert!(passed > 0 && passed < 30, "{passed}");
    assert_eq!(full_evals, passed);
    assert_eq!(logged, toy.calls.load(Ordering::SeqCst));
    // Two seed candidates: one minibatch and one full run each, three times.
    assert_eq!(toy.count("full"), 3 * (2 + passed));
    assert_eq!(toy.count("minibatch"), 3 * (2 + 30));
}

#[test]
fn gate_keeps_invalid_candidates_out_of_lineage_and_repair_links_parent() {
    let tmp = tempfile::tempdir().unwrap();
    let toy = Toy::new();
    let mut cfg = base_config();
    cfg.max_iterations = 12;
    cfg.repair_enabled = true;
    let mut replies = Vec::new();
    for i in 0..12 {
        if i % 3 == 0 {
            replies.push(full("oops"));
            replies.push(full(&format!("0.{}", 60 + i)));
        } else {
            replies.push(full(&format!("0.{}", 10 + i)));
        }
    }
    Engine::create(tmp.path(), "r", setup(cfg, &[]), &toy, script(&replies), None)
        .unwrap()
        .run()
        .unwrap();
    let run = StoredRun::load(tmp.path()).unwrap();
    let state = fold(run.config.clone(), vec![], &run.events);
    let invalid: Vec<u64> = state
        .nodes
        .values()
        .filter(|n| n.valid == Some(false))
        .map(|n| n.id)
        .collect();
    assert_eq!(invalid.len(), 4);
    let repairs: Vec<(u64, u64)> = run
        .events
        .iter()
        .filter_map(|e| match e.body {
            EventBody::Generated {
                origin: Origin::Repair,
                candidate: Some(c),
                parent: Some(p),
                ..
            } => Some((c, p)),
            _ => None,
        })
        .collect();
    assert_eq!(repairs.iter().map(|r| r.1).collect::<Vec<_>>(), invalid);
    let repair_prompt = fs::read_to_string(tmp.path().join("prompts/1-repair.txt")).unwrap();
    assert!(repair_prompt.contains("SyntaxError: cannot read value `oops`"));
    for n in state.nodes.values() {
        if n.origin == Some(Origin::Mutation) {
            assert!(!invalid.contains(&n.parent.unwrap()), "invalid parent for {}", n.id);
        }
    }
    for (c, _) in repairs {
        assert!(state.nodes[&c].inserted);
    }
}

#[test]
fn repair_disabled_means_one_generation_per_iteration() {
    let tmp = tempfile::tempdir().unwrap();
    let toy = Toy::new();
    let mut cfg = base_config();
    cfg.max_iterations = 5;
    let replies: Vec<String> = (0..10).map(|_| full("oops")).collect();
    let report = Engine::create(tmp.path(), "r", setup(cfg, &[]), &toy, script(&replies), None)
        .unwrap()
        .run()
        .unwrap();
    assert_eq!(report.event_counts["generated"], 2 + 5);
}

#[test]
fn meta_feedback_every_interval() {
    let tmp = tempfile::tempdir().unwrap();
    let toy = Toy::new();
    let mut cfg = base_config();
    cfg.max_iterations = 100;
    cfg.meta_interval = 10;
    cfg.checkpoint_interval = 100;
    let summaries: Vec<String> = (0..10).map(|_| "prefer proportional allocation".to_string()).collect();
    let report = Engine::create(tmp.path(), "r", setup(cfg, &[]), &toy, script(&varied(100)), Some(script(&summaries)))
        .unwrap()
        .run()
        .unwrap();
    assert_eq!(report.event_counts["meta"], 10);
    assert!(!fs::read_to_string(tmp.path().join("prompts/10.txt")).unwrap().contains("prefer proportional"));
    assert!(fs::read_to_string(tmp.path().join("prompts/11.txt")).unwrap().contains("prefer proportional allocation"));
}

#[test]
fn zero_iterations_only_evaluates_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let toy = Toy::new();
    let mut cfg = base_config();
    cfg.max_iterations = 0;
    let report = Engine::create(tmp.path(), "r", setup(cfg, &[]), &toy, script(&[]), None)
        .unwrap()
        .run()
        .unwrap();
    assert_eq!(report.status, "completed");
    assert_eq!(report.event_counts["generated"], 2);
    assert_eq!(report.event_counts["evaluated"], 2);
    assert_eq!(report.best_score, Some(0.5));
}

#[test]
fn best_comes_from_the_best_script() {
    let tmp = tempfile::tempdir().unwrap();
    let toy = Toy::new();
    let mut cfg = base_config();
    cfg.max_iterations = 10;
    cfg.num_islands = 1;
    let replies: Vec<String> = (1..=10)
        .map(|i| full(if i == 7 { "0.99" } else { "0.1" }))
        .collect();
    let report = Engine::create(tmp.path(), "r", setup(cfg, &[]), &toy, script(&replies), None)
        .unwrap()
        .run()
        .unwrap();
    // The seed is candidate 0, so script #7 becomes candidate 7.
    assert_eq!(report.best_id, Some(7));
    assert_eq!(report.best_score, Some(0.99));
}

#[test]
fn exhausted_generator_aborts_with_partial_report() {
    let tmp = tempfile::tempdir().unwrap();
    let toy = Toy::new();
    let report = Engine::create(tmp.path(), "r", setup(base_config(), &[]), &toy, script(&varied(3)), None)
        .unwrap()
        .run()
        .unwrap();
    assert_eq!(report.status, "aborted");
    assert_eq!(report.iterations, 4);
    assert!(report.reason.unwrap().contains("exhausted"));
}

#[test]
fn unparseable_replies_are_resampled() {
    let tmp = tempfile::tempdir().unwrap();
    let toy = Toy::new();
    let mut cfg = base_config();
    cfg.max_iterations = 1;
    let replies = vec!["no code here".to_string(), full("0.9")];
    Engine::create(tmp.path(), "r", setup(cfg, &[]), &toy, script(&replies), None)
        .unwrap()
        .run()
        .unwrap();
    let attempts: Vec<usize> = events(tmp.path())
        .iter()
        .filter_map(|e| match e.body {
            EventBody::Generated {
                attempts,
                status: GenStatus::Ok,
                origin: Origin::Mutation,
                ..
            } => Some(attempts),
            _ => None,
        })
        .collect();
    assert_eq!(attempts, vec![2]);
}

#[test]
fn commands_pause_lock_and_roll_back() {
    let tmp = tempfile::tempdir().unwrap();
    let toy = Toy::new();
    let mut cfg = base_config();
    cfg.max_iterations = 40;
    cfg.num_islands = 1;
    let engine = Engine::create(tmp.path(), "r", setup(cfg, &[]), &toy, script(&varied(60)), None).unwrap();
    let live = engine.live();
    // Queued before the first iteration.
    live.submit(Command::Pause).unwrap();
    live.submit(Command::Hint("use the archive".into())).unwrap();
    let report = std::thread::scope(|s| {
        let handle = s.spawn(move || engine.run().unwrap());
        while !live.state().paused {
            std::thread::sleep(std::time::Duration::from_millis(5));
        }
        let before = live.events().len();
        std::thread::sleep(std::time::Duration::from_millis(50));
        assert_eq!(live.events().len(), before, "events while paused");
        live.submit(Command::Lock(0)).unwrap();
        live.submit(Command::Rollback(0)).unwrap();
        live.submit(Command::Resume).unwrap();
        handle.join().unwrap()
    });
    assert_eq!(report.status, "completed");
    let evs = events(tmp.path());
    // Region 0 is the only region, so every later edit is out of bounds.
    let after_lock: Vec<&RunEvent> = evs
        .iter()
        .skip_while(|e| !matches!(e.body, EventBody::Lock { .. }))
        .filter(|e| matches!(e.body, EventBody::Generated { .. }))
        .collect();
    assert_eq!(after_lock.len(), 40);
    assert!(after_lock
        .iter()
        .all(|e| matches!(e.body, EventBody::Generated { status: GenStatus::PatchError, .. })));
    let prompt = fs::read_to_string(tmp.path().join("prompts/1.txt")).unwrap();
    assert!(prompt.contains("use the archive"));
    assert!(live.submit(Command::Pause).is_err());
}

#[test]
fn rollback_restricts_later_parents() {
    let tmp = tempfile::tempdir().unwrap();
    let toy = Toy::new();
    let mut cfg = base_config();
    cfg.max_iterations = 30;
    let dir = tmp.path().join("first");
    Engine::create(&dir, "r", setup(cfg.clone(), &[]), &toy, script(&varied(60)), None)
        .unwrap()
        .halt_after(20)
        .run()
        .unwrap();
    let engine = Engine::resume(&dir.join("checkpoints/20"), "r", &toy, script(&varied(60)), None).unwrap();
    let live = engine.live();
    live.submit(Command::Rollback(12)).unwrap();
    engine.run().unwrap();
    let evs = events(&dir);
    let at = evs.iter().position(|e| matches!(e.body, EventBody::Rollback { .. })).unwrap();
    let mut allowed: std::collections::BTreeSet<u64> = (0..=12).collect();
    for e in &evs[at..] {
        match &e.body {
            EventBody::Generated {
                candidate, parent: Some(p), ..
            } => {
                assert!(allowed.contains(p), "parent {p} outside the rolled-back pool");
                if let Some(c) = candidate {
                    allowed.insert(*c);
                }
            }
            EventBody::Migrated { moves } => allowed.extend(moves.iter().map(|m| m.copy)),
            _ => {}
        }
    }
}
