//! Transaction scheduling under a unit-time dispatch model.
//!
//! Transactions are dispatched in schedule order, at most one per time step.
//! A transaction starts once the previous one has been dispatched and every
//! key it touches has been released; it then holds its keys for `duration`
//! steps. The makespan is the time the last transaction finishes.

use std::collections::{BTreeMap, HashMap};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::doc::{Doc, DocError};
use crate::protocol::{InstanceScore, Report};
use crate::seeded_rng;
use crate::stats::median;

pub const INVALID_FLOOR: f64 = -1.0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TxnError {
    #[error("schedule has {got} entries for {want} transactions")]
    Length { got: usize, want: usize },
    #[error("transaction {0} scheduled twice or unknown")]
    NotPermutation(usize),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    pub id: usize,
    pub keys: Vec<u32>,
    pub duration: u32,
}

impl Transaction {
    pub fn new(id: usize, mut keys: Vec<u32>, duration: u32) -> Self {
        keys.sort_unstable();
        keys.dedup();
        assert!(duration >= 1 && !keys.is_empty(), "transaction needs keys and work");
        Self { id, keys, duration }
    }
}

/// Transactions indexed by id (`txns[i].id == i`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workload {
    pub txns: Vec<Transaction>,
}

impl Workload {
    pub fn new(txns: Vec<Transaction>) -> Self {
        debug_assert!(txns.iter().enumerate().all(|(i, t)| t.id == i));
        Self { txns }
    }

    pub fn len(&self) -> usize {
        self.txns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.txns.is_empty()
    }

    /// Reads `id, duration, key1 key2 ...` lines. Ids must be 0..n in order.
    pub fn parse(text: &str) -> Result<Self, TxnError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let mut txns = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let err = |msg: String| TxnError::Parse { line: i + 1, msg };
            let rec = rec.map_err(|e| err(e.to_string()))?;
            if rec.len() != 3 {
                return Err(err(format!("expected 3 fields, found {}", rec.len())));
            }
            let id: usize = rec[0].parse().map_err(|_| err(format!("bad id `{}`", &rec[0])))?;
            if id != txns.len() {
                return Err(err(format!("expected id {}, found {id}", txns.len())));
            }
            let duration: u32 = rec[1]
                .parse()
                .ok()
                .filter(|d| *d >= 1)
                .ok_or_else(|| err(format!("bad duration `{}`", &rec[1])))?;
            let keys = rec[2]
                .split_whitespace()
                .map(|k| k.parse::<u32>().map_err(|_| err(format!("bad key `{k}`"))))
                .collect::<Result<Vec<_>, _>>()?;
            if keys.is_empty() {
                return Err(err("no keys".into()));
            }
            txns.push(Transaction::new(id, keys, duration));
        }
        Ok(Self { txns })
    }

    pub fn to_text(&self) -> String {
        self.txns
            .iter()
            .map(|t| {
                let keys: Vec<String> = t.keys.iter().map(u32::to_string).collect();
                format!("{}, {}, {}\n", t.id, t.duration, keys.join(" "))
            })
            .collect()
    }

    pub fn check_schedule(&self, schedule: &[usize]) -> Result<(), TxnError> {
        if schedule.len() != self.len() {
            return Err(TxnError::Length {
                got: schedule.len(),
                want: self.len(),
            });
        }
        let mut seen = vec![false; self.len()];
        for &id in schedule {
            match seen.get_mut(id) {
                Some(s) if !*s => *s = true,
                _ => return Err(TxnError::NotPermutation(id)),
            }
        }
        Ok(())
    }
}

/// Incremental form of the dispatch recurrence.
#[derive(Debug, Clone, Default)]
pub struct Dispatch {
    last_start: Option<u64>,
    free: HashMap<u32, u64>,
    makespan: u64,
}

impl Dispatch {
    pub fn makespan(&self) -> u64 {
        self.makespan
    }

    fn start_of(&self, t: &Transaction) -> u64 {
        let after_prev = self.last_start.map_or(0, |s| s + 1);
        t.keys
            .iter()
            .filter_map(|k| self.free.get(k))
            .fold(after_prev, |a, &f| a.max(f))
    }

    /// Makespan if `t` were appended next.
    pub fn peek(&self, t: &Transaction) -> u64 {
        self.makespan.max(self.start_of(t) + u64::from(t.duration))
    }

    pub fn push(&mut self, t: &Transaction) {
        let start = self.start_of(t);
        let finish = start + u64::from(t.duration);
        for &k in &t.keys {
            self.free.insert(k, finish);
        }
        self.last_start = Some(start);
        self.makespan = self.makespan.max(finish);
    }
}

pub fn makespan(schedule: &[usize], w: &Workload) -> Result<u64, TxnError> {
    w.check_schedule(schedule)?;
    Ok(cost(schedule, w))
}

/// Makespan of any sequence of ids, not necessarily covering the workload.
fn cost(seq: &[usize], w: &Workload) -> u64 {
    CostOracle::new(w).cost(seq)
}

/// Allocation-free makespan for local search: keys index a dense table.
struct CostOracle<'a> {
    w: &'a Workload,
    free: Vec<u64>,
}

impl<'a> CostOracle<'a> {
    fn new(w: &'a Workload) -> Self {
        let keys = w.txns.iter().flat_map(|t| t.keys.iter()).max().map_or(0, |k| *k as usize + 1);
        Self {
            w,
            free: vec![0; keys],
        }
    }

    fn cost(&mut self, seq: &[usize]) -> u64 {
        let mut next = 0u64;
        let mut makespan = 0u64;
        for &i in seq {
            let t = &self.w.txns[i];
            let start = t.keys.iter().fold(next, |a, &k| a.max(self.free[k as usize]));
            let finish = start + u64::from(t.duration);
            for &k in &t.keys {
                self.free[k as usize] = finish;
            }
            next = start + 1;
            makespan = makespan.max(finish);
        }
        for &i in seq {
            for &k in &self.w.txns[i].keys {
                self.free[k as usize] = 0;
            }
        }
        makespan
    }
}

pub fn random_schedule(w: &Workload, rng: &mut impl Rng) -> Vec<usize> {
    let mut s: Vec<usize> = (0..w.len()).collect();
    s.shuffle(rng);
    s
}

/// Sampled min-makespan: each step samples `k` unscheduled transactions and
/// appends the one that grows the makespan least. Ties go to the lowest id
/// when `deterministic`, otherwise to a random tied candidate.
pub fn smf(w: &Workload, k: usize, rng: &mut impl Rng, deterministic: bool) -> Vec<usize> {
    let k = k.max(1);
    let mut remaining: Vec<usize> = (0..w.len()).collect();
    let mut d = Dispatch::default();
    let mut out = Vec::with_capacity(w.len());
    while !remaining.is_empty() {
        let take = k.min(remaining.len());
        let picks: Vec<usize> = if take == remaining.len() {
            (0..remaining.len()).collect()
        } else {
            rand::seq::index::sample(rng, remaining.len(), take).into_vec()
        };
        let costs: Vec<u64> = picks.iter().map(|&p| d.peek(&w.txns[remaining[p]])).collect();
        let best = *costs.iter().min().expect("nonempty sample");
        let tied: Vec<usize> = picks
            .iter()
            .zip(&costs)
            .filter(|(_, &c)| c == best)
            .map(|(&p, _)| p)
            .collect();
        let pos = if deterministic {
            *tied.iter().min_by_key(|&&p| remaining[p]).expect("tie set")
        } else {
            *tied.choose(rng).expect("tie set")
        };
        let id = remaining.swap_remove(pos);
        d.push(&w.txns[id]);
        out.push(id);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OfflineParams {
    pub n_seqs: usize,
    pub beam_width: usize,
    /// Candidate batch for the randomized greedy starts.
    pub batch: usize,
}

impl Default for OfflineParams {
    fn default() -> Self {
        Self {
            n_seqs: 6,
            beam_width: 4,
            batch: 12,
        }
    }
}

/// Pairwise-order cost cache.
struct PairCosts<'a> {
    w: &'a Workload,
    memo: HashMap<(usize, usize), u64>,
}

impl<'a> PairCosts<'a> {
    fn new(w: &'a Workload) -> Self {
        Self {
            w,
            memo: HashMap::new(),
        }
    }

    fn get(&mut self, i: usize, j: usize) -> u64 {
        let w = self.w;
        *self.memo.entry((i, j)).or_insert_with(|| cost(&[i, j], w))
    }
}

/// Borda scores: transaction `i` collects `cost([j, i]) - cost([i, j])` from
/// every other `j`, so a high score means `i` prefers to go early.
pub fn borda_scores(w: &Workload) -> Vec<i64> {
    let mut pairs = PairCosts::new(w);
    let n = w.len();
    let mut score = vec![0i64; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                score[i] += pairs.get(j, i) as i64 - pairs.get(i, j) as i64;
            }
        }
    }
    score
}

fn borda_order(w: &Workload) -> Vec<usize> {
    let score = borda_scores(w);
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| score[b].cmp(&score[a]).then(a.cmp(&b)));
    order
}

fn beam_search(w: &Workload, width: usize) -> Vec<usize> {
    let n = w.len();
    let mut beams: Vec<(Vec<usize>, Dispatch)> = vec![(Vec::new(), Dispatch::default())];
    for _ in 0..n {
        let mut next: Vec<(u64, usize, usize)> = Vec::new();
        for (b, (seq, d)) in beams.iter().enumerate() {
            let mut used = vec![false; n];
            for &i in seq {
                used[i] = true;
            }
            for (i, t) in w.txns.iter().enumerate().filter(|(i, _)| !used[*i]) {
                next.push((d.peek(t), b, i));
            }
        }
        next.sort_unstable();
        next.truncate(width.max(1));
        beams = next
            .into_iter()
            .map(|(_, b, i)| {
                let (mut seq, mut d) = beams[b].clone();
                d.push(&w.txns[i]);
                seq.push(i);
                (seq, d)
            })
            .collect();
    }
    beams.swap_remove(0).0
}

/// Local search to a fixpoint: adjacent swaps, single-element relocations
/// and segment reversals, taking the first improving move.
pub fn polish(seq: &mut Vec<usize>, w: &Workload) -> u64 {
    let n = seq.len();
    let mut oracle = CostOracle::new(w);
    let mut best = oracle.cost(seq);
    loop {
        let mut improved = false;
        for i in 0..n.saturating_sub(1) {
            seq.swap(i, i + 1);
            let c = oracle.cost(seq);
            if c < best {
                best = c;
                improved = true;
            } else {
                seq.swap(i, i + 1);
            }
        }
        'reloc: for from in 0..n {
            for to in 0..n {
                if from == to {
                    continue;
                }
                let x = seq.remove(from);
                seq.insert(to, x);
                let c = oracle.cost(seq);
                if c < best {
                    best = c;
                    improved = true;
                    break 'reloc;
                }
                let x = seq.remove(to);
                seq.insert(from, x);
            }
        }
        'rev: for i in 0..n {
            for j in i + 2..n {
                seq[i..=j].reverse();
                let c = oracle.cost(seq);
                if c < best {
                    best = c;
                    improved = true;
                    break 'rev;
                }
                seq[i..=j].reverse();
            }
        }
        if !improved {
            return best;
        }
    }
}

/// Multi-start offline search: randomized greedy, beam and Borda starts, each
/// polished, perturbed by one random segment reversal and polished again.
pub fn offline_multistart(w: &Workload, params: OfflineParams, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = w.len();
    if n < 2 {
        return (0..n).collect();
    }
    let mut best: Option<(u64, Vec<usize>)> = None;
    let borda = borda_order(w);
    for start in 0..params.n_seqs.max(6) {
        let mut seq = match start % 3 {
            0 => smf(w, params.batch.min(n), rng, false),
            1 => beam_search(w, params.beam_width),
            _ => borda.clone(),
        };
        let mut c = polish(&mut seq, w);
        let mut kicked = seq.clone();
        let i = rng.random_range(0..n - 1);
        let j = rng.random_range(i + 1..n);
        kicked[i..=j].reverse();
        let kc = polish(&mut kicked, w);
        if kc < c {
            seq = kicked;
            c = kc;
        }
        if best.as_ref().is_none_or(|(b, _)| c < *b) {
            best = Some((c, seq));
        }
    }
    best.expect("at least one start").1
}

/// Every permutation, in lexicographic order; for oracles on tiny inputs.
pub fn brute_force_optimum(w: &Workload) -> u64 {
    fn rec(seq: &mut Vec<usize>, used: &mut [bool], w: &mut CostOracle, best: &mut u64) {
        if seq.len() == used.len() {
            *best = (*best).min(w.cost(seq));
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                seq.push(i);
                rec(seq, used, w, best);
                seq.pop();
                used[i] = false;
            }
        }
    }
    let mut best = u64::MAX;
    rec(&mut Vec::new(), &mut vec![false; w.len()], &mut CostOracle::new(w), &mut best);
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkloadShape {
    pub n: usize,
    pub keys: u32,
    pub hot_keys: u32,
    /// Probability that a key access goes to the hot set.
    pub hot_prob: f64,
    pub max_keys: u32,
    pub max_duration: u32,
}

impl WorkloadShape {
    pub fn high_contention(n: usize) -> Self {
        Self {
            n,
            keys: 200,
            hot_keys: 6,
            hot_prob: 0.7,
            max_keys: 4,
            max_duration: 6,
        }
    }
}

pub fn synthetic(shape: WorkloadShape, rng: &mut impl Rng) -> Workload {
    let txns = (0..shape.n)
        .map(|id| {
            let nkeys = rng.random_range(1..=shape.max_keys);
            let keys = (0..nkeys)
                .map(|_| {
                    if rng.random_bool(shape.hot_prob) {
                        rng.random_range(0..shape.hot_keys)
                    } else {
                        rng.random_range(shape.hot_keys..shape.keys)
                    }
                })
                .collect();
            Transaction::new(id, keys, rng.random_range(1..=shape.max_duration))
        })
        .collect();
    Workload::new(txns)
}

const SUITE_SEED: u64 = 0x7c0;

/// The shipped suites: three workloads of 50 and two of 100 transactions,
/// with hot-key skew from mild to severe; `large` holds five of 500.
pub fn suite(split: &str, seed: u64) -> Option<Vec<(String, Workload)>> {
    let shapes: Vec<WorkloadShape> = match split {
        "full" | "validation" | "minibatch" => [(50, 0.5), (50, 0.7), (50, 0.85), (100, 0.6), (100, 0.8)]
            .into_iter()
            .map(|(n, p)| WorkloadShape {
                hot_prob: p,
                ..WorkloadShape::high_contention(n)
            })
            .collect(),
        "large" => vec![WorkloadShape::high_contention(500); 5],
        _ => return None,
    };
    let mut rng = seeded_rng(SUITE_SEED, 0);
    let mut all: Vec<(String, Workload)> = shapes
        .into_iter()
        .enumerate()
        .map(|(i, s)| (format!("w{i}-n{}-hot{:.0}", s.n, s.hot_prob * 100.0), synthetic(s, &mut rng)))
        .collect();
    if split == "minibatch" {
        let mut pick = seeded_rng(seed, 0x7c0);
        all.shuffle(&mut pick);
        all.truncate(2);
        all.sort_by(|a, b| a.0.cmp(&b.0));
    }
    Some(all)
}

#[derive(Debug, Clone, PartialEq)]
pub enum TxnPolicy {
    Random,
    Smf { k: usize, deterministic: bool },
    Offline(OfflineParams),
}

impl TxnPolicy {
    pub fn parse(text: &str) -> Result<Self, DocError> {
        let doc = Doc::parse(text)?;
        doc.reject_unknown(&["policy", "k", "deterministic", "n_seqs", "beam_width", "batch"])?;
        match doc.require_str("policy")? {
            "random" => Ok(Self::Random),
            "smf" => Ok(Self::Smf {
                k: doc.get_or("k", 8)?,
                deterministic: doc.get_or("deterministic", true)?,
            }),
            "offline" => {
                let d = OfflineParams::default();
                Ok(Self::Offline(OfflineParams {
                    n_seqs: doc.get_or("n_seqs", d.n_seqs)?,
                    beam_width: doc.get_or("beam_width", d.beam_width)?,
                    batch: doc.get_or("batch", d.batch)?,
                }))
            }
            other => Err(DocError::BadValue {
                key: "policy".into(),
                value: other.into(),
            }),
        }
    }

    pub fn schedule(&self, w: &Workload, rng: &mut ChaCha8Rng) -> Vec<usize> {
        match self {
            Self::Random => random_schedule(w, rng),
            Self::Smf { k, deterministic } => smf(w, *k, rng, *deterministic),
            Self::Offline(p) => offline_multistart(w, *p, rng),
        }
    }
}

/// Median makespan of eleven random schedules with fixed seeds.
pub fn random_median(w: &Workload) -> f64 {
    let costs: Vec<f64> = (0..11)
        .map(|s| cost(&random_schedule(w, &mut seeded_rng(s, 0x7a4d)), w) as f64)
        .collect();
    median(&costs).expect("eleven samples")
}

pub fn evaluate(text: &str, split: &str, seed: u64) -> Report {
    let policy = match TxnPolicy::parse(text) {
        Ok(p) => p,
        Err(e) => return Report::invalid(INVALID_FLOOR, format!("candidate document: {e}")),
    };
    let Some(suite) = suite(split, seed) else {
        return Report::invalid(INVALID_FLOOR, format!("unknown split `{split}`"));
    };
    let schedules: Vec<Vec<usize>> = suite
        .iter()
        .enumerate()
        .map(|(i, (_, w))| policy.schedule(w, &mut seeded_rng(seed, i as u64)))
        .collect();
    score_schedules(&suite, &schedules)
}

/// Scores one schedule per workload against the random baseline.
pub fn score_schedules(suite: &[(String, Workload)], schedules: &[Vec<usize>]) -> Report {
    let mut per_instance = Vec::with_capacity(suite.len());
    let mut total_makespan = 0.0;
    for ((name, w), s) in suite.iter().zip(schedules) {
        let m = match makespan(s, w) {
            Ok(m) => m as f64,
            Err(e) => return Report::invalid(INVALID_FLOOR, format!("{name}: {e}")),
        };
        let base = random_median(w);
        total_makespan += m;
        per_instance.push(InstanceScore::new(name, (base - m) / base));
    }
    let n = per_instance.len() as f64;
    let score = per_instance.iter().map(|p| p.score).sum::<f64>() / n;
    let worst = per_instance
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.score.total_cmp(&b.1.score).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .expect("nonempty suite");
    let mut metrics = BTreeMap::new();
    metrics.insert("improvement".into(), score);
    metrics.insert("mean_makespan".into(), total_makespan / n);
    Report {
        valid: true,
        combined_score: score,
        metrics,
        feedback: contention_summary(&suite[worst].0, &suite[worst].1, per_instance[worst].score),
        per_instance,
    }
}

fn contention_summary(name: &str, w: &Workload, score: f64) -> String {
    let mut touches: BTreeMap<u32, (u32, u64)> = BTreeMap::new();
    for t in &w.txns {
        for &k in &t.keys {
            let e = touches.entry(k).or_default();
            e.0 += 1;
            e.1 += u64::from(t.duration);
        }
    }
    let mut hot: Vec<(u32, (u32, u64))> = touches.into_iter().collect();
    hot.sort_by(|a, b| b.1 .1.cmp(&a.1 .1).then(a.0.cmp(&b.0)));
    let top: Vec<String> = hot
        .iter()
        .take(5)
        .map(|(k, (n, busy))| format!("key {k}: {n} txns, {busy} busy steps"))
        .collect();
    let work: u64 = w.txns.iter().map(|t| u64::from(t.duration)).sum();
    format!(
        "worst workload {name} ({} txns, {work} total work): improvement {:.3}; hottest keys: {}",
        w.len(),
        score,
        top.join("; ")
    )
}
