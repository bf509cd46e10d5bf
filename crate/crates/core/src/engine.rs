//! The evolution loop.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candidate::{count_loc, find_regions, region_texts, CandidateId, RegionError};
use crate::config::{ConfigError, RunConfig, SelectionStrategy};
use crate::control::{Command, LiveRun};
use crate::events::{
    detect_plateau, EventBody, FinishStatus, Gate, GenStatus, Origin, RunEvent, RunReport, RunState,
};
use crate::generator::{generate, Generator};
use crate::harness::{cascade_passes, score_with_resilience, EvalOutcome, Evaluate};
use crate::patch::{apply_diff, apply_full_rewrite, choose_patch_type, crossover, EditScript, PatchError, PatchKind};
use crate::population::{
    select_parent_island, select_parent_pareto, select_parent_weighted, Member, Population,
};
use crate::prompt::{assemble, ProblemSpec, PromptBundle};
use crate::rng::Streams;
use crate::score::{apply_loc_penalty, combined_score};
use crate::store::{RunMeta, RunStore, StoreError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("no seed programs")]
    NoSeeds,
    #[error("seed {index}: {source}")]
    Seed { index: usize, source: RegionError },
    #[error("seeds disagree on evolve region count ({0} vs {1})")]
    SeedShape(usize, usize),
    #[error("problem section `{0}` is empty")]
    Problem(&'static str),
}

pub struct RunSetup {
    pub config: RunConfig,
    pub problem: ProblemSpec,
    pub seeds: Vec<String>,
    pub hint_bank: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Snapshot {
    population: Population,
    minibatch: BTreeMap<CandidateId, f64>,
    generator_cursor: u64,
    summarizer_cursor: Option<u64>,
}

enum Flow {
    Continue,
    Abort(String),
}

enum Produced {
    Child(CandidateId, String),
    /// Logged; no candidate.
    Nothing,
    /// The generator is unusable.
    Fatal(String),
}

struct GenRecord {
    candidate: Option<CandidateId>,
    requested: PatchKind,
    patch: Option<PatchKind>,
    status: GenStatus,
    attempts: usize,
    truncated: usize,
    error: Option<String>,
}

impl GenRecord {
    fn new(requested: PatchKind) -> Self {
        Self {
            candidate: None,
            requested,
            patch: None,
            status: GenStatus::Ok,
            attempts: 0,
            truncated: 0,
            error: None,
        }
    }
}

struct Scored {
    outcome: EvalOutcome,
    score: f64,
}

pub struct Engine<'a> {
    cfg: RunConfig,
    meta: RunMeta,
    evaluator: &'a dyn Evaluate,
    generator: Box<dyn Generator + 'a>,
    summarizer: Option<Box<dyn Generator + 'a>>,
    store: RunStore,
    state: RunState,
    pop: Population,
    minibatch: BTreeMap<CandidateId, f64>,
    streams: Streams,
    live: Arc<LiveRun>,
    seeds: Vec<String>,
    halt_after: Option<u64>,
}

impl<'a> Engine<'a> {
    /// Starts a new run in `dir`, which must not already hold events.
    pub fn create(
        dir: &Path,
        id: &str,
        setup: RunSetup,
        evaluator: &'a dyn Evaluate,
        generator: Box<dyn Generator + 'a>,
        summarizer: Option<Box<dyn Generator + 'a>>,
    ) -> Result<Self, EngineError> {
        let RunSetup {
            config,
            problem,
            seeds,
            hint_bank,
        } = setup;
        config.validate()?;
        for (name, text) in [
            ("statement", &problem.statement),
            ("criteria", &problem.criteria),
            ("context", &problem.context),
        ] {
            if text.trim().is_empty() {
                return Err(EngineError::Problem(name));
            }
        }
        if seeds.is_empty() {
            return Err(EngineError::NoSeeds);
        }
        let mut regions = None;
        for (index, s) in seeds.iter().enumerate() {
            let n = find_regions(s, &config.comment_prefix)
                .map_err(|source| EngineError::Seed { index, source })?
                .len();
            match regions {
                Some(r) if r != n => return Err(EngineError::SeedShape(r, n)),
                _ => regions = Some(n),
            }
        }
        let meta = RunMeta {
            problem,
            hint_bank,
            regions: regions.expect("nonempty seeds"),
        };
        std::fs::create_dir_all(dir).map_err(|source| StoreError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let store = RunStore::create(dir, &config, &meta)?;
        let state = RunState::new(config.clone(), meta.hint_bank.clone());
        let live = LiveRun::new(id, dir, state.clone(), Vec::new(), meta.regions);
        Ok(Self {
            pop: Population::new(config.num_islands, config.archive_size),
            streams: Streams::new(config.random_seed),
            cfg: config,
            meta,
            evaluator,
            generator,
            summarizer,
            store,
            state,
            minibatch: BTreeMap::new(),
            live,
            seeds,
            halt_after: None,
        })
    }

    /// Reopens the run a checkpoint directory belongs to. The generators are
    /// moved to the positions they held at the checkpoint.
    pub fn resume(
        checkpoint: &Path,
        id: &str,
        evaluator: &'a dyn Evaluate,
        mut generator: Box<dyn Generator + 'a>,
        mut summarizer: Option<Box<dyn Generator + 'a>>,
    ) -> Result<Self, EngineError> {
        let (store, run, cp) = RunStore::resume::<Snapshot>(checkpoint)?;
        run.config.validate()?;
        let snap = cp.engine;
        generator.seek(snap.generator_cursor);
        if let (Some(s), Some(c)) = (summarizer.as_mut(), snap.summarizer_cursor) {
            s.seek(c);
        }
        let mut state = RunState::new(run.config.clone(), run.meta.hint_bank.clone());
        for ev in &run.events {
            state.apply(ev);
        }
        store.prune_candidates(state.next_id)?;
        let live = LiveRun::new(id, &run.dir, state.clone(), run.events, run.meta.regions);
        Ok(Self {
            streams: Streams::new(run.config.random_seed),
            cfg: run.config,
            meta: run.meta,
            evaluator,
            generator,
            summarizer,
            store,
            state,
            pop: snap.population,
            minibatch: snap.minibatch,
            live,
            seeds: Vec::new(),
            halt_after: None,
        })
    }

    /// Stops after the given iteration without a finished event, as if the
    /// process had been killed there.
    pub fn halt_after(mut self, iteration: u64) -> Self {
        self.halt_after = Some(iteration);
        self
    }

    pub fn live(&self) -> Arc<LiveRun> {
        Arc::clone(&self.live)
    }

    pub fn run(mut self) -> Result<RunReport, EngineError> {
        if self.state.event_count == 0 {
            self.seed()?;
            if self.pop.members.is_empty() {
                return self.finish(0, FinishStatus::Aborted, Some("no seed program passed evaluation".into()));
            }
        }
        let first = self.state.iteration + 1;
        for it in first..=self.cfg.max_iterations {
            self.process_commands(it)?;
            if let Flow::Abort(reason) = self.iterate(it)? {
                return self.finish(it, FinishStatus::Aborted, Some(reason));
            }
            self.end_of_iteration(it)?;
            if self.halt_after == Some(it) {
                self.live.close();
                self.live.seal();
                return Ok(RunReport::from_events(&self.state, &self.live.events()));
            }
        }
        let it = self.state.iteration.max(self.cfg.max_iterations);
        self.finish(it, FinishStatus::Completed, None)
    }

    fn finish(mut self, it: u64, status: FinishStatus, reason: Option<String>) -> Result<RunReport, EngineError> {
        for cmd in self.live.close() {
            self.apply_command(it, cmd)?;
        }
        self.emit(it, EventBody::Finished { status, reason }, None)?;
        self.live.seal();
        log::info!("run finished: {:?}", status);
        Ok(RunReport::from_events(&self.state, &self.live.events()))
    }

    fn emit(&mut self, iteration: u64, body: EventBody, wall_time: Option<f64>) -> Result<(), EngineError> {
        let ev = RunEvent {
            seq: self.state.event_count,
            iteration,
            body,
        };
        self.store.append(&ev, wall_time)?;
        self.state.apply(&ev);
        self.live.publish(&ev);
        Ok(())
    }

    fn floor(&self) -> f64 {
        self.cfg.score.invalid_floor
    }

    fn locked(&self) -> Vec<usize> {
        self.state.locked_regions.iter().copied().collect()
    }

    fn text(&self, id: CandidateId) -> Result<String, EngineError> {
        Ok(self.store.read_candidate(id)?)
    }

    fn region_text(&self, text: &str) -> String {
        find_regions(text, &self.cfg.comment_prefix)
            .map(|r| region_texts(text, &r).concat())
            .unwrap_or_default()
    }

    fn loc(&self, text: &str) -> usize {
        find_regions(text, &self.cfg.comment_prefix).map_or(0, |r| count_loc(text, &r))
    }

    fn score(&self, text: &str, split: &str, seeds: &[u64]) -> Scored {
        let floor = self.floor();
        let mut outcome = score_with_resilience(
            self.evaluator,
            text,
            split,
            seeds,
            floor,
            self.cfg.parallel_evaluations,
        );
        if !outcome.valid {
            return Scored { outcome, score: floor };
        }
        let base = if self.cfg.score.weights.is_empty() {
            Ok(outcome.combined_score)
        } else {
            combined_score(&outcome.metrics, &self.cfg.score)
        };
        match base {
            Ok(b) if b.is_finite() => {
                let score = apply_loc_penalty(b, self.loc(text), &self.cfg.score);
                Scored { outcome, score }
            }
            Ok(b) => {
                outcome.valid = false;
                outcome.feedback = format!("non-finite score {b}\n{}", outcome.feedback);
                Scored { outcome, score: floor }
            }
            Err(e) => {
                outcome.valid = false;
                outcome.feedback = format!("{e}\n{}", outcome.feedback);
                Scored { outcome, score: floor }
            }
        }
    }

    fn evaluated(
        &mut self,
        it: u64,
        candidate: CandidateId,
        split: &str,
        seeds: Vec<u64>,
        s: &Scored,
        gate: Option<Gate>,
    ) -> Result<(), EngineError> {
        let o = &s.outcome;
        self.emit(
            it,
            EventBody::Evaluated {
                candidate,
                split: split.into(),
                seeds,
                exit: o.exit_kind,
                valid: o.valid,
                raw_score: o.combined_score,
                score: s.score,
                metrics: o.metrics.clone(),
                per_instance: o.per_instance.clone(),
                feedback: o.feedback.clone(),
                gate,
            },
            Some(o.wall_time),
        )
    }

    fn minibatch_seeds(&self) -> Vec<u64> {
        self.streams.seeds("minibatch", 0, self.cfg.score.resilience_k)
    }

    /// Runs the configured evaluation pipeline on a stored candidate and
    /// inserts it if it qualifies. Returns the failure text when the
    /// candidate came out invalid.
    fn evaluate_and_insert(
        &mut self,
        it: u64,
        id: CandidateId,
        parent: Option<CandidateId>,
        island: usize,
        text: &str,
    ) -> Result<Option<String>, EngineError> {
        if self.cfg.cascade_enabled {
            let seeds = self.minibatch_seeds();
            let mb = self.score(text, "minibatch", &seeds);
            self.minibatch.insert(id, mb.score);
            let gate = parent.map(|p| {
                let parent_score = self.minibatch.get(&p).copied().unwrap_or(self.floor());
                Gate {
                    parent: p,
                    parent_score,
                    passed: cascade_passes(mb.score, parent_score),
                }
            });
            self.evaluated(it, id, "minibatch", seeds, &mb, gate)?;
            if gate.is_some_and(|g| !g.passed) {
                if let Some(p) = parent {
                    self.pop.credit_child(p);
                }
                return Ok((!mb.outcome.valid).then_some(mb.outcome.feedback));
            }
        }
        let seeds = self.streams.seeds("eval", id, self.cfg.score.resilience_k);
        let full = self.score(text, "full", &seeds);
        self.evaluated(it, id, "full", seeds, &full, None)?;
        let valid = full.outcome.valid;
        if valid || !self.cfg.correctness_gate {
            let ins = self.pop.insert(Member {
                id,
                parent_id: parent,
                island,
                score: full.score,
                per_instance: full.outcome.per_instance.clone(),
                region_text: self.region_text(text),
                children: 0,
                migrated_from: None,
            });
            self.emit(
                it,
                EventBody::Inserted {
                    candidate: id,
                    island,
                    score: full.score,
                    entered_archive: ins.entered_archive,
                    evicted: ins.evicted,
                },
                None,
            )?;
        } else if let Some(p) = parent {
            self.pop.credit_child(p);
        }
        Ok((!valid).then_some(full.outcome.feedback))
    }

    /// Island `i` gets seed `i mod seeds`; extra seeds go round the ring.
    fn seed(&mut self) -> Result<(), EngineError> {
        let seeds = std::mem::take(&mut self.seeds);
        let n = self.cfg.num_islands;
        for c in 0..n.max(seeds.len()) {
            let id = c as CandidateId;
            let island = c % n;
            let text = seeds[c % seeds.len()].clone();
            self.store.write_candidate(id, &text)?;
            self.emit(
                0,
                EventBody::Generated {
                    candidate: Some(id),
                    parent: None,
                    island,
                    origin: Origin::Seed,
                    requested: None,
                    patch: None,
                    status: GenStatus::Ok,
                    attempts: 0,
                    truncated: 0,
                    error: None,
                },
                None,
            )?;
            self.evaluate_and_insert(0, id, None, island, &text)?;
        }
        Ok(())
    }

    fn process_commands(&mut self, it: u64) -> Result<(), EngineError> {
        loop {
            for cmd in self.live.take_commands() {
                self.apply_command(it, cmd)?;
            }
            if !self.state.paused {
                return Ok(());
            }
            self.live.wait_for_command();
        }
    }

    fn apply_command(&mut self, it: u64, cmd: Command) -> Result<(), EngineError> {
        let body = match cmd {
            Command::Hint(text) => EventBody::Hint { text },
            Command::Pause => EventBody::Pause {},
            Command::Resume => EventBody::Resume {},
            Command::Rollback(candidate) => {
                self.pop.rollback(candidate);
                EventBody::Rollback { candidate }
            }
            Command::Lock(region) => EventBody::Lock { region },
        };
        self.emit(it, body, None)
    }

    fn nonempty_island(&self, from: usize, archive: bool) -> Option<usize> {
        let n = self.pop.islands.len();
        (0..n).map(|d| (from + d) % n).find(|&i| {
            let isl = &self.pop.islands[i];
            if archive {
                !isl.archive.is_empty()
            } else {
                !isl.members.is_empty()
            }
        })
    }

    fn select_parent(&self, it: u64) -> Option<(CandidateId, usize)> {
        let mut rng = self.streams.stream("select", it);
        let home = ((it - 1) % self.cfg.num_islands as u64) as usize;
        match self.cfg.selection_strategy {
            SelectionStrategy::Pareto if !self.pop.front.is_empty() => {
                let id = select_parent_pareto(&self.pop.front, &mut rng);
                return Some((id, self.pop.members[&id].island));
            }
            SelectionStrategy::WeightedArchive => {
                if let Some(i) = self.nonempty_island(home, true) {
                    let entries = self.pop.archive_entries(i);
                    let id = select_parent_weighted(&entries, self.cfg.archive_size, &mut rng);
                    return Some((id, i));
                }
            }
            _ => {}
        }
        let i = self.nonempty_island(home, false)?;
        let id = select_parent_island(
            &self.pop.islands[i],
            self.cfg.exploration_ratio,
            self.cfg.exploitation_ratio,
            &mut rng,
        );
        Some((id, i))
    }

    fn inspirations(&self, island: usize, parent: CandidateId) -> Result<Vec<(String, f64)>, EngineError> {
        let k = (self.cfg.elite_ratio * self.cfg.archive_size as f64).ceil() as usize;
        self.pop
            .top_of_island(island, k, parent)
            .into_iter()
            .map(|id| Ok((self.text(id)?, self.pop.members[&id].score)))
            .collect()
    }

    fn donor(&self, island: usize, parent: CandidateId, it: u64) -> CandidateId {
        use rand::Rng;
        let isl = &self.pop.islands[island];
        let pool: Vec<CandidateId> = if isl.archive.iter().any(|&c| c != parent) {
            isl.archive.iter().copied().filter(|&c| c != parent).collect()
        } else {
            isl.members.iter().copied().filter(|&c| c != parent).collect()
        };
        if pool.is_empty() {
            return parent;
        }
        let mut rng = self.streams.stream("crossover", it);
        pool[rng.random_range(0..pool.len())]
    }

    fn apply_script(&self, it: u64, parent_text: &str, script: &EditScript) -> Result<String, PatchError> {
        let prefix = &self.cfg.comment_prefix;
        let locked = self.locked();
        let max = self.cfg.max_code_length;
        match script {
            EditScript::Diff(hunks) => apply_diff(parent_text, prefix, &locked, hunks, max),
            EditScript::Full(replacement) => apply_full_rewrite(parent_text, prefix, &locked, replacement, max),
            EditScript::Crossover { donor_id } => {
                if *donor_id >= self.state.next_id {
                    return Err(PatchError::Unsupported(format!("no candidate {donor_id}")));
                }
                let donor = self
                    .store
                    .read_candidate(*donor_id)
                    .map_err(|e| PatchError::Unsupported(e.to_string()))?;
                crossover(parent_text, &donor, prefix, &locked, &mut self.streams.stream("crossover", it))
            }
        }
    }

    fn generated(
        &mut self,
        it: u64,
        parent: CandidateId,
        island: usize,
        origin: Origin,
        rec: GenRecord,
    ) -> Result<(), EngineError> {
        self.emit(
            it,
            EventBody::Generated {
                candidate: rec.candidate,
                parent: Some(parent),
                island,
                origin,
                requested: Some(rec.requested),
                patch: rec.patch,
                status: rec.status,
                attempts: rec.attempts,
                truncated: rec.truncated,
                error: rec.error,
            },
            None,
        )
    }

    /// Stores `text` as the next candidate and logs its generation.
    fn new_child(
        &mut self,
        it: u64,
        parent: CandidateId,
        island: usize,
        origin: Origin,
        text: &str,
        mut rec: GenRecord,
    ) -> Result<Produced, EngineError> {
        let id = self.state.next_id;
        self.store.write_candidate(id, text)?;
        rec.candidate = Some(id);
        self.generated(it, parent, island, origin, rec)?;
        Ok(Produced::Child(id, text.to_string()))
    }

    /// Prompt, generation and patch for one child.
    fn produce(
        &mut self,
        it: u64,
        parent: CandidateId,
        parent_text: &str,
        island: usize,
        origin: Origin,
        kind: PatchKind,
        repair_error: Option<String>,
    ) -> Result<Produced, EngineError> {
        let parent_node = &self.state.nodes[&parent];
        let bundle = PromptBundle {
            problem: self.meta.problem.clone(),
            parent_text: parent_text.to_string(),
            parent_score: parent_node.score.or(parent_node.minibatch_score),
            inspirations: self.inspirations(island, parent)?,
            hints: self.state.pending_hints.clone(),
            feedback: parent_node.feedback.clone(),
            meta_recommendations: self.state.meta_recommendations.clone(),
            repair_error,
            kind,
        };
        let assembled = assemble(bundle, 4 * self.cfg.max_code_length);
        let name = match origin {
            Origin::Repair => format!("{it}-repair"),
            _ => it.to_string(),
        };
        self.store.write_prompt(&name, &assembled.text)?;
        let mut rec = GenRecord::new(kind);
        rec.truncated = assembled.truncated;
        let g = match generate(self.generator.as_mut(), &assembled.text, self.cfg.max_patch_resamples) {
            Ok(g) => g,
            Err(e) => {
                rec.status = GenStatus::Failed;
                rec.attempts = e.attempts;
                rec.error = Some(e.reason.clone());
                self.generated(it, parent, island, origin, rec)?;
                return Ok(if e.fatal { Produced::Fatal(e.reason) } else { Produced::Nothing });
            }
        };
        rec.attempts = g.attempts;
        rec.patch = Some(g.script.kind());
        match self.apply_script(it, parent_text, &g.script) {
            Ok(text) => self.new_child(it, parent, island, origin, &text, rec),
            Err(e) => {
                rec.status = GenStatus::PatchError;
                rec.error = Some(e.to_string());
                self.generated(it, parent, island, origin, rec)?;
                Ok(Produced::Nothing)
            }
        }
    }

    fn iterate(&mut self, it: u64) -> Result<Flow, EngineError> {
        let Some((parent, island)) = self.select_parent(it) else {
            return Ok(Flow::Abort("selection pool is empty".into()));
        };
        let parent_text = self.text(parent)?;
        let kind = choose_patch_type(self.cfg.patch_type_probs, &mut self.streams.stream("patch", it));
        let produced = if kind == PatchKind::Crossover {
            let donor = self.donor(island, parent, it);
            let donor_text = self.text(donor)?;
            let locked = self.locked();
            let mut rng = self.streams.stream("crossover", it);
            let mut rec = GenRecord::new(kind);
            rec.patch = Some(kind);
            match crossover(&parent_text, &donor_text, &self.cfg.comment_prefix, &locked, &mut rng) {
                Ok(text) => self.new_child(it, parent, island, Origin::Mutation, &text, rec)?,
                Err(e) => {
                    rec.status = GenStatus::PatchError;
                    rec.error = Some(e.to_string());
                    self.generated(it, parent, island, Origin::Mutation, rec)?;
                    Produced::Nothing
                }
            }
        } else {
            self.produce(it, parent, &parent_text, island, Origin::Mutation, kind, None)?
        };
        let (id, text) = match produced {
            Produced::Fatal(reason) => return Ok(Flow::Abort(format!("generator failed: {reason}"))),
            Produced::Nothing => return Ok(Flow::Continue),
            Produced::Child(id, text) => (id, text),
        };
        let failure = self.evaluate_and_insert(it, id, Some(parent), island, &text)?;
        if let (true, Some(error)) = (self.cfg.repair_enabled, failure) {
            match self.produce(it, id, &text, island, Origin::Repair, PatchKind::Diff, Some(error))? {
                Produced::Fatal(reason) => return Ok(Flow::Abort(format!("generator failed: {reason}"))),
                Produced::Child(rid, fixed) => {
                    self.evaluate_and_insert(it, rid, Some(id), island, &fixed)?;
                }
                Produced::Nothing => {}
            }
        }
        Ok(Flow::Continue)
    }

    fn meta_summary(&self) -> String {
        let mut top: Vec<(CandidateId, f64)> = self
            .pop
            .islands
            .iter()
            .flat_map(|i| i.archive.iter().map(|&id| (id, self.pop.members[&id].score)))
            .collect();
        top.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        top.truncate(self.cfg.archive_size);
        let mut out = String::from(
            "Summarize what distinguishes the stronger programs below and recommend directions for the next edits.\n\n",
        );
        for (id, score) in top {
            let text = self.store.read_candidate(id).unwrap_or_default();
            let firsts: Vec<String> = find_regions(&text, &self.cfg.comment_prefix)
                .map(|r| {
                    region_texts(&text, &r)
                        .iter()
                        .map(|t| t.lines().find(|l| !l.trim().is_empty()).unwrap_or("").trim().to_string())
                        .collect()
                })
                .unwrap_or_default();
            out += &format!("candidate {id} score {score:.6}: {}\n", firsts.join(" | "));
        }
        out
    }

    fn end_of_iteration(&mut self, it: u64) -> Result<(), EngineError> {
        let mi = self.cfg.migration_interval;
        if mi > 0 && it % mi == 0 && self.cfg.num_islands > 1 {
            let mut next = self.state.next_id;
            let moves = self.pop.migrate(self.cfg.migration_rate, &mut next);
            for m in &moves {
                let text = self.text(m.source)?;
                self.store.write_candidate(m.copy, &text)?;
                if let Some(&s) = self.minibatch.get(&m.source) {
                    self.minibatch.insert(m.copy, s);
                }
            }
            if !moves.is_empty() {
                self.emit(it, EventBody::Migrated { moves }, None)?;
            }
        }

        let meta = self.cfg.meta_interval;
        if meta > 0 && it % meta == 0 && self.summarizer.is_some() {
            let prompt = self.meta_summary();
            self.store.write_prompt(&format!("{it}-meta"), &prompt)?;
            let reply = self.summarizer.as_mut().expect("checked").complete(&prompt);
            match reply {
                Ok(text) => {
                    self.emit(
                        it,
                        EventBody::Meta {
                            text: text.trim().to_string(),
                        },
                        None,
                    )?;
                }
                Err(e) => log::warn!("iteration {it}: summarizer failed, skipping: {e}"),
            }
        }

        let history = self.state.history();
        let anchor = self.state.plateau_anchor as usize;
        let window = self.cfg.plateau_window;
        if window > 0 && detect_plateau(&history[anchor..], window, self.cfg.plateau_epsilon) {
            let best = history[history.len() - 1];
            let window_start = history[history.len() - 1 - window];
            self.emit(
                it,
                EventBody::Plateau {
                    best,
                    window_start,
                    bank_left: self.state.hint_bank.len(),
                },
                None,
            )?;
            if let Some(hint) = self.state.hint_bank.first().cloned() {
                self.emit(it, EventBody::PhaseSwitch { hint }, None)?;
            }
        }

        let ci = self.cfg.checkpoint_interval;
        if ci > 0 && it % ci == 0 {
            let path = format!("checkpoints/{it}");
            self.emit(it, EventBody::Checkpoint { path }, None)?;
            let snap = Snapshot {
                population: self.pop.clone(),
                minibatch: self.minibatch.clone(),
                generator_cursor: self.generator.cursor(),
                summarizer_cursor: self.summarizer.as_ref().map(|s| s.cursor()),
            };
            self.store.checkpoint(it, &snap)?;
        }
        Ok(())
    }
}
