//! Run events and the state they fold into.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::candidate::{CandidateId, InstanceScore};
use crate::config::RunConfig;
use crate::harness::ExitKind;
use crate::patch::PatchKind;
use crate::population::Migration;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    pub seq: u64,
    pub iteration: u64,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Seed,
    Mutation,
    Repair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenStatus {
    Ok,
    PatchError,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    #[default]
    Explore,
    Hinted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinishStatus {
    Completed,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub parent: CandidateId,
    pub parent_score: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "kebab-case")]
pub enum EventBody {
    Generated {
        /// Absent when no candidate came out (generation or patch failure).
        candidate: Option<CandidateId>,
        parent: Option<CandidateId>,
        island: usize,
        origin: Origin,
        /// Edit kind asked of the generator.
        requested: Option<PatchKind>,
        /// Edit kind the reply held.
        patch: Option<PatchKind>,
        status: GenStatus,
        /// Generator calls made.
        attempts: usize,
        /// Inspirations dropped to fit the prompt budget.
        truncated: usize,
        error: Option<String>,
    },
    Evaluated {
        candidate: CandidateId,
        split: String,
        /// One evaluator invocation per seed.
        seeds: Vec<u64>,
        exit: ExitKind,
        valid: bool,
        /// Median evaluator score.
        raw_score: f64,
        /// After weighting, the LOC penalty and the invalid floor.
        score: f64,
        metrics: BTreeMap<String, f64>,
        per_instance: Vec<InstanceScore>,
        feedback: String,
        gate: Option<Gate>,
    },
    Inserted {
        candidate: CandidateId,
        island: usize,
        score: f64,
        entered_archive: bool,
        evicted: Option<CandidateId>,
    },
    Migrated {
        moves: Vec<Migration>,
    },
    Plateau {
        best: f64,
        window_start: f64,
        bank_left: usize,
    },
    PhaseSwitch {
        hint: String,
    },
    Meta {
        text: String,
    },
    Hint {
        text: String,
    },
    Pause {},
    Resume {},
    Rollback {
        candidate: CandidateId,
    },
    Lock {
        region: usize,
    },
    Checkpoint {
        path: String,
    },
    Finished {
        status: FinishStatus,
        reason: Option<String>,
    },
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Generated { .. } => "generated",
            Self::Evaluated { .. } => "evaluated",
            Self::Inserted { .. } => "inserted",
            Self::Migrated { .. } => "migrated",
            Self::Plateau { .. } => "plateau",
            Self::PhaseSwitch { .. } => "phase-switch",
            Self::Meta { .. } => "meta",
            Self::Hint { .. } => "hint",
            Self::Pause {} => "pause",
            Self::Resume {} => "resume",
            Self::Rollback { .. } => "rollback",
            Self::Lock { .. } => "lock",
            Self::Checkpoint { .. } => "checkpoint",
            Self::Finished { .. } => "finished",
        }
    }
}

/// What the events say about one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: CandidateId,
    pub parent: Option<CandidateId>,
    pub migrated_from: Option<CandidateId>,
    pub island: usize,
    pub generation: u64,
    pub origin: Option<Origin>,
    pub patch: Option<PatchKind>,
    pub minibatch_score: Option<f64>,
    /// Full-split score.
    pub score: Option<f64>,
    pub valid: Option<bool>,
    pub inserted: bool,
    pub metrics: BTreeMap<String, f64>,
    pub per_instance: Vec<InstanceScore>,
    pub feedback: String,
}

impl Node {
    fn new(id: CandidateId, island: usize, generation: u64) -> Self {
        Self {
            id,
            parent: None,
            migrated_from: None,
            island,
            generation,
            origin: None,
            patch: None,
            minibatch_score: None,
            score: None,
            valid: None,
            inserted: false,
            metrics: BTreeMap::new(),
            per_instance: Vec::new(),
            feedback: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub config: RunConfig,
    /// Last iteration any event was logged for.
    pub iteration: u64,
    pub best_id: Option<CandidateId>,
    pub best_score: Option<f64>,
    pub phase: Phase,
    /// Hints active in every prompt, in arrival order.
    pub pending_hints: Vec<String>,
    /// Bank hints not yet dequeued by a plateau.
    pub hint_bank: Vec<String>,
    pub paused: bool,
    pub locked_regions: BTreeSet<usize>,
    pub meta_recommendations: String,
    pub rollback: Option<CandidateId>,
    /// Iteration of the last plateau detection.
    pub plateau_anchor: u64,
    /// Best score at the end of each closed iteration, from iteration 0.
    pub best_history: Vec<f64>,
    pub next_id: CandidateId,
    pub nodes: BTreeMap<CandidateId, Node>,
    pub finished: Option<FinishStatus>,
    pub event_count: u64,
}

impl RunState {
    pub fn new(config: RunConfig, hint_bank: Vec<String>) -> Self {
        Self {
            config,
            iteration: 0,
            best_id: None,
            best_score: None,
            phase: Phase::Explore,
            pending_hints: Vec::new(),
            hint_bank,
            paused: false,
            locked_regions: BTreeSet::new(),
            meta_recommendations: String::new(),
            rollback: None,
            plateau_anchor: 0,
            best_history: Vec::new(),
            next_id: 0,
            nodes: BTreeMap::new(),
            finished: None,
            event_count: 0,
        }
    }

    fn current_best(&self) -> f64 {
        self.best_score.unwrap_or(self.config.score.invalid_floor)
    }

    /// Best-score history through the current iteration.
    pub fn history(&self) -> Vec<f64> {
        let mut h = self.best_history.clone();
        h.push(self.current_best());
        h
    }

    fn close_through(&mut self, iteration: u64) {
        while (self.best_history.len() as u64) < iteration {
            self.best_history.push(self.current_best());
        }
    }

    fn node(&mut self, id: CandidateId) -> &mut Node {
        self.nodes
            .get_mut(&id)
            .unwrap_or_else(|| panic!("event references unknown candidate {id}"))
    }

    pub fn apply(&mut self, ev: &RunEvent) {
        assert_eq!(ev.seq, self.event_count, "events out of sequence");
        self.event_count += 1;
        if ev.iteration > self.iteration {
            self.close_through(ev.iteration);
            self.iteration = ev.iteration;
        }
        match &ev.body {
            EventBody::Generated {
                candidate: Some(id),
                parent,
                island,
                origin,
                patch,
                ..
            } => {
                let mut node = Node::new(*id, *island, ev.iteration);
                node.parent = *parent;
                node.origin = Some(*origin);
                node.patch = *patch;
                self.nodes.insert(*id, node);
                self.next_id = self.next_id.max(id + 1);
            }
            EventBody::Generated { .. } => {}
            EventBody::Evaluated {
                candidate,
                split,
                valid,
                score,
                metrics,
                per_instance,
                feedback,
                ..
            } => {
                let full = split != "minibatch";
                let n = self.node(*candidate);
                if full {
                    n.score = Some(*score);
                    n.valid = Some(*valid);
                } else {
                    n.minibatch_score = Some(*score);
                    if n.valid.is_none() && !valid {
                        n.valid = Some(false);
                    }
                }
                n.metrics = metrics.clone();
                n.per_instance = per_instance.clone();
                n.feedback = feedback.clone();
                if full && *valid && self.best_score.is_none_or(|b| *score > b) {
                    self.best_score = Some(*score);
                    self.best_id = Some(*candidate);
                }
            }
            EventBody::Inserted { candidate, .. } => self.node(*candidate).inserted = true,
            EventBody::Migrated { moves } => {
                for m in moves {
                    let src = self.node(m.source).clone();
                    let mut copy = src;
                    copy.id = m.copy;
                    copy.parent = None;
                    copy.migrated_from = Some(m.source);
                    copy.island = m.to_island;
                    copy.generation = ev.iteration;
                    copy.inserted = true;
                    self.nodes.insert(m.copy, copy);
                    self.next_id = self.next_id.max(m.copy + 1);
                }
            }
            EventBody::Plateau { .. } => self.plateau_anchor = ev.iteration,
            EventBody::PhaseSwitch { hint } => {
                self.phase = Phase::Hinted;
                if let Some(pos) = self.hint_bank.iter().position(|h| h == hint) {
                    self.hint_bank.remove(pos);
                }
                self.pending_hints.push(hint.clone());
            }
            EventBody::Meta { text } => self.meta_recommendations = text.clone(),
            EventBody::Hint { text } => self.pending_hints.push(text.clone()),
            EventBody::Pause {} => self.paused = true,
            EventBody::Resume {} => self.paused = false,
            EventBody::Rollback { candidate } => self.rollback = Some(*candidate),
            EventBody::Lock { region } => {
                self.locked_regions.insert(*region);
            }
            EventBody::Checkpoint { .. } => {}
            EventBody::Finished { status, .. } => {
                self.close_through(self.iteration + 1);
                self.finished = Some(*status);
            }
        }
    }
}

pub fn fold(config: RunConfig, hint_bank: Vec<String>, events: &[RunEvent]) -> RunState {
    let mut s = RunState::new(config, hint_bank);
    for ev in events {
        s.apply(ev);
    }
    s
}

/// True iff the history holds at least `window + 1` entries and the best
/// score improved by less than `epsilon` over the last `window` of them.
pub fn detect_plateau(best_history: &[f64], window: usize, epsilon: f64) -> bool {
    assert!(window >= 1, "plateau window must be positive");
    let n = best_history.len();
    n > window && best_history[n - 1] - best_history[n - 1 - window] < epsilon
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub status: String,
    pub reason: Option<String>,
    pub iterations: u64,
    pub best_id: Option<CandidateId>,
    pub best_score: Option<f64>,
    /// Best score after each iteration, seeds first.
    pub trajectory: Vec<f64>,
    pub event_counts: BTreeMap<String, usize>,
    pub evaluator_invocations: usize,
    pub candidates: usize,
}

impl RunReport {
    pub fn from_events(state: &RunState, events: &[RunEvent]) -> Self {
        let mut event_counts = BTreeMap::new();
        let mut evaluator_invocations = 0;
        let mut reason = None;
        for ev in events {
            *event_counts.entry(ev.body.kind().to_string()).or_insert(0) += 1;
            match &ev.body {
                EventBody::Evaluated { seeds, .. } => evaluator_invocations += seeds.len(),
                EventBody::Finished { reason: r, .. } => reason = r.clone(),
                _ => {}
            }
        }
        let status = match state.finished {
            Some(FinishStatus::Completed) => "completed",
            Some(FinishStatus::Aborted) => "aborted",
            None => "interrupted",
        };
        let trajectory = if state.finished.is_some() {
            state.best_history.clone()
        } else {
            state.history()
        };
        Self {
            status: status.into(),
            reason,
            iterations: state.iteration,
            best_id: state.best_id,
            best_score: state.best_score,
            trajectory,
            event_counts,
            evaluator_invocations,
            candidates: state.nodes.len(),
        }
    }

    pub fn render(&self) -> String {
        let mut out = format!("status: {}\n", self.status);
        if let Some(r) = &self.reason {
            out += &format!("reason: {r}\n");
        }
        out += &format!("iterations: {}\ncandidates: {}\n", self.iterations, self.candidates);
        match (self.best_id, self.best_score) {
            (Some(id), Some(s)) => out += &format!("best: candidate {id} score {s:.6}\n"),
            _ => out += "best: none\n",
        }
        out += &format!("evaluator invocations: {}\nevents:\n", self.evaluator_invocations);
        for (k, n) in &self.event_counts {
            out += &format!("  {k}: {n}\n");
        }
        let traj: Vec<String> = self.trajectory.iter().map(|s| format!("{s:.4}")).collect();
        out += &format!("trajectory: {}\n", traj.join(" "));
        out
    }
}
