//! Expert replica allocation and placement for mixture-of-experts serving.
//!
//! Every expert gets one or more replicas; replicas fill `packs` GPUs with
//! `slots_per_pack` slots each. An expert's load is split evenly across its
//! replicas, and a plan is scored by its balance factor: mean pack load over
//! max pack load.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::doc::{Doc, DocError};
use crate::protocol::{fmt3, InstanceScore, Report};
use crate::seeded_rng;
use crate::stats::median;

pub const INVALID_FLOOR: f64 = -1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EplbError {
    #[error("{items} items cannot fill {packs} packs of {slots} slots")]
    Capacity {
        items: usize,
        packs: usize,
        slots: usize,
    },
    #[error("{slots} slots cannot hold one replica of each of {experts} experts")]
    TooFewSlots { slots: usize, experts: usize },
    #[error("expert {0} has no replica")]
    NoReplica(usize),
    #[error("replica counts sum to {got}, expected {want}")]
    ReplicaSum { got: u64, want: u64 },
    #[error("pack {pack} holds {got} replicas, expected {want}")]
    PackSize { pack: usize, got: usize, want: usize },
    #[error("plan has {got} packs, expected {want}")]
    PackCount { got: usize, want: usize },
    #[error("expert {expert} placed {placed} times but has {counted} replicas")]
    Placement {
        expert: usize,
        placed: u32,
        counted: u32,
    },
    #[error("load of expert {0} is negative or not finite")]
    BadLoad(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacementInstance {
    pub loads: Vec<f64>,
    pub packs: usize,
    pub slots_per_pack: usize,
}

impl PlacementInstance {
    pub fn total_slots(&self) -> usize {
        self.packs * self.slots_per_pack
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacementPlan {
    pub replica_counts: Vec<u32>,
    /// Expert id in every slot, per pack.
    pub packs: Vec<Vec<usize>>,
}

impl PlacementPlan {
    pub fn validate(&self, inst: &PlacementInstance) -> Result<(), EplbError> {
        if let Some(e) = self.replica_counts.iter().position(|&c| c == 0) {
            return Err(EplbError::NoReplica(e));
        }
        let sum: u64 = self.replica_counts.iter().map(|&c| u64::from(c)).sum();
        if sum != inst.total_slots() as u64 {
            return Err(EplbError::ReplicaSum {
                got: sum,
                want: inst.total_slots() as u64,
            });
        }
        let mut placed = vec![0u32; self.replica_counts.len()];
        for (p, pack) in self.packs.iter().enumerate() {
            if pack.len() != inst.slots_per_pack {
                return Err(EplbError::PackSize {
                    pack: p,
                    got: pack.len(),
                    want: inst.slots_per_pack,
                });
            }
            for &e in pack {
                match placed.get_mut(e) {
                    Some(n) => *n += 1,
                    None => return Err(EplbError::NoReplica(e)),
                }
            }
        }
        if self.packs.len() != inst.packs {
            return Err(EplbError::PackCount {
                got: self.packs.len(),
                want: inst.packs,
            });
        }
        for (e, (&p, &c)) in placed.iter().zip(&self.replica_counts).enumerate() {
            if p != c {
                return Err(EplbError::Placement {
                    expert: e,
                    placed: p,
                    counted: c,
                });
            }
        }
        Ok(())
    }

    pub fn pack_loads(&self, loads: &[f64]) -> Vec<f64> {
        self.packs
            .iter()
            .map(|pack| {
                pack.iter()
                    .map(|&e| loads[e] / f64::from(self.replica_counts[e]))
                    .sum()
            })
            .collect()
    }
}

/// Mean over max of pack loads; 1 when every pack is empty.
pub fn balance_factor(pack_loads: &[f64]) -> f64 {
    let max = pack_loads.iter().copied().fold(0.0, f64::max);
    if pack_loads.is_empty() || max <= 0.0 {
        return 1.0;
    }
    let mean = pack_loads.iter().sum::<f64>() / pack_loads.len() as f64;
    mean / max
}

/// Indices of `items` by descending weight, ties by index.
fn descending(items: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[b].total_cmp(&items[a]).then(a.cmp(&b)));
    order
}

fn check_capacity(n: usize, packs: usize, slots: usize, exact: bool) -> Result<(), EplbError> {
    let cap = packs * slots;
    if packs == 0 || n > cap || (exact && n != cap) {
        return Err(EplbError::Capacity {
            items: n,
            packs,
            slots,
        });
    }
    Ok(())
}

/// Puts each item, heaviest first, on the least-loaded pack that still has
/// a free slot; ties go to the lower pack. Returns item indices per pack.
pub fn greedy_pack(items: &[f64], packs: usize, slots_per_pack: usize) -> Result<Vec<Vec<usize>>, EplbError> {
    check_capacity(items.len(), packs, slots_per_pack, false)?;
    let mut out = vec![Vec::with_capacity(slots_per_pack); packs];
    let mut load = vec![0.0f64; packs];
    for i in descending(items) {
        let p = (0..packs)
            .filter(|&p| out[p].len() < slots_per_pack)
            .min_by(|&a, &b| load[a].total_cmp(&load[b]).then(a.cmp(&b)))
            .expect("capacity checked");
        out[p].push(i);
        load[p] += items[i];
    }
    Ok(out)
}

/// Snake order: sorted item `i` goes to pack `i mod P` on even rounds and
/// `P - 1 - i mod P` on odd rounds. Needs exactly `P * slots` items.
pub fn zigzag_assign(items: &[f64], packs: usize, slots_per_pack: usize) -> Result<Vec<Vec<usize>>, EplbError> {
    check_capacity(items.len(), packs, slots_per_pack, true)?;
    let mut out = vec![Vec::with_capacity(slots_per_pack); packs];
    for (rank, i) in descending(items).into_iter().enumerate() {
        let offset = rank % packs;
        let p = if (rank / packs) % 2 == 0 {
            offset
        } else {
            packs - 1 - offset
        };
        out[p].push(i);
    }
    Ok(out)
}

/// Largest-remainder apportionment of `total_slots` replicas by load, with
/// every expert lifted to at least one replica.
pub fn allocate_replicas(loads: &[f64], total_slots: usize) -> Result<Vec<u32>, EplbError> {
    apportion(loads, total_slots, true)
}

/// Plain largest-remainder apportionment; experts can end up with no replica.
pub fn allocate_replicas_unclamped(loads: &[f64], total_slots: usize) -> Result<Vec<u32>, EplbError> {
    apportion(loads, total_slots, false)
}

fn check_loads(loads: &[f64], total_slots: usize) -> Result<f64, EplbError> {
    if total_slots < loads.len() {
        return Err(EplbError::TooFewSlots {
            slots: total_slots,
            experts: loads.len(),
        });
    }
    if let Some(e) = loads.iter().position(|l| !l.is_finite() || *l < 0.0) {
        return Err(EplbError::BadLoad(e));
    }
    Ok(loads.iter().sum())
}

fn apportion(loads: &[f64], total_slots: usize, clamp: bool) -> Result<Vec<u32>, EplbError> {
    let sum = check_loads(loads, total_slots)?;
    let n = loads.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let quota: Vec<f64> = if sum > 0.0 {
        loads.iter().map(|l| l * total_slots as f64 / sum).collect()
    } else {
        vec![total_slots as f64 / n as f64; n]
    };
    let floor = |q: f64| q.floor() as i64;
    let mut counts: Vec<i64> = quota
        .iter()
        .map(|&q| if clamp { floor(q).max(1) } else { floor(q) })
        .collect();
    // Lifting experts to one replica can overshoot; take the excess back
    // from the experts furthest above their quota.
    let mut assigned: i64 = counts.iter().sum();
    while assigned > total_slots as i64 {
        let e = (0..n)
            .filter(|&e| counts[e] > 1)
            .max_by(|&a, &b| {
                (counts[a] as f64 - quota[a])
                    .total_cmp(&(counts[b] as f64 - quota[b]))
                    .then(b.cmp(&a))
            })
            .expect("total_slots >= experts");
        counts[e] -= 1;
        assigned -= 1;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let ra = quota[a] - counts[a] as f64;
        let rb = quota[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &e in order.iter().cycle().take((total_slots as i64 - assigned) as usize) {
        counts[e] += 1;
    }
    Ok(counts.into_iter().map(|c| c as u32).collect())
}

/// One replica each, then every spare slot to the expert with the highest
/// per-replica load.
pub fn greedy_replicas(loads: &[f64], total_slots: usize) -> Result<Vec<u32>, EplbError> {
    check_loads(loads, total_slots)?;
    let mut counts = vec![1u32; loads.len()];
    for _ in loads.len()..total_slots {
        let e = (0..loads.len())
            .max_by(|&a, &b| {
                (loads[a] / f64::from(counts[a]))
                    .total_cmp(&(loads[b] / f64::from(counts[b])))
                    .then(b.cmp(&a))
            })
            .expect("nonempty");
        counts[e] += 1;
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Allocation {
    Hamilton,
    GreedyReplicas,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    Greedy,
    Zigzag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pipeline {
    pub allocation: Allocation,
    pub assignment: Assignment,
    pub min_replica_clamp: bool,
}

impl Pipeline {
    pub const GREEDY: Pipeline = Pipeline {
        allocation: Allocation::GreedyReplicas,
        assignment: Assignment::Greedy,
        min_replica_clamp: true,
    };

    pub fn parse(text: &str) -> Result<Self, DocError> {
        let doc = Doc::parse(text)?;
        doc.reject_unknown(&["allocation", "assignment", "min_replica_clamp"])?;
        let bad = |key: &str, value: &str| DocError::BadValue {
            key: key.into(),
            value: value.into(),
        };
        let allocation = match doc.require_str("allocation")? {
            "hamilton" => Allocation::Hamilton,
            "greedy-repl" => Allocation::GreedyReplicas,
            v => return Err(bad("allocation", v)),
        };
        let assignment = match doc.require_str("assignment")? {
            "greedy" => Assignment::Greedy,
            "zigzag" => Assignment::Zigzag,
            v => return Err(bad("assignment", v)),
        };
        Ok(Self {
            allocation,
            assignment,
            min_replica_clamp: doc.get_or("min_replica_clamp", true)?,
        })
    }

    /// Builds a plan. Only shape errors are reported here; plan invariants
    /// are checked separately by [`PlacementPlan::validate`].
    pub fn plan(&self, inst: &PlacementInstance) -> Result<PlacementPlan, EplbError> {
        let total = inst.total_slots();
        let counts = match (self.allocation, self.min_replica_clamp) {
            (Allocation::Hamilton, true) => allocate_replicas(&inst.loads, total)?,
            (Allocation::Hamilton, false) => allocate_replicas_unclamped(&inst.loads, total)?,
            (Allocation::GreedyReplicas, _) => greedy_replicas(&inst.loads, total)?,
        };
        let mut owner = Vec::with_capacity(total);
        let mut items = Vec::with_capacity(total);
        for (e, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                owner.push(e);
                items.push(inst.loads[e] / f64::from(c));
            }
        }
        let slots = match self.assignment {
            Assignment::Greedy => greedy_pack(&items, inst.packs, inst.slots_per_pack)?,
            Assignment::Zigzag => zigzag_assign(&items, inst.packs, inst.slots_per_pack)?,
        };
        Ok(PlacementPlan {
            replica_counts: counts,
            packs: slots
                .into_iter()
                .map(|p| p.into_iter().map(|i| owner[i]).collect())
                .collect(),
        })
    }
}

pub const EXPERTS: usize = 64;
pub const PACKS: usize = 8;
pub const SLOTS_PER_PACK: usize = 10;
const TRACE_SEED: u64 = 0xe91b;
const SHIFTS: usize = 50;
const TOKENS: f64 = 100_000.0;

/// The shipped load-shift trace: blocks of five shifts alternating between
/// Zipf skews 0.8 and 1.2, over a fresh expert ranking each shift.
pub fn load_trace() -> Vec<Vec<f64>> {
    let mut rng = seeded_rng(TRACE_SEED, 0);
    (0..SHIFTS)
        .map(|i| {
            let s = if (i / 5) % 2 == 0 { 0.8 } else { 1.2 };
            let mut rank: Vec<usize> = (0..EXPERTS).collect();
            rank.shuffle(&mut rng);
            let weights: Vec<f64> = rank
                .iter()
                .map(|&r| (r as f64 + 1.0).powf(-s) * rng.random_range(0.8..1.2))
                .collect();
            let total: f64 = weights.iter().sum();
            weights.iter().map(|w| (w / total * TOKENS).round()).collect()
        })
        .collect()
}

pub fn instance(loads: Vec<f64>) -> PlacementInstance {
    PlacementInstance {
        loads,
        packs: PACKS,
        slots_per_pack: SLOTS_PER_PACK,
    }
}

fn shifts_for(split: &str, seed: u64) -> Option<Vec<Vec<f64>>> {
    let trace = load_trace();
    match split {
        "full" | "validation" => Some(trace),
        "minibatch" => {
            let mut rng = seeded_rng(seed, 0xe91b);
            let mut idx = rand::seq::index::sample(&mut rng, trace.len(), 15).into_vec();
            idx.sort_unstable();
            Some(idx.into_iter().map(|i| trace[i].clone()).collect())
        }
        _ => None,
    }
}

/// Median over five repetitions of the mean wall time per rearrangement.
fn time_pipeline(p: &Pipeline, instances: &[PlacementInstance]) -> f64 {
    let reps: Vec<f64> = (0..5)
        .map(|_| {
            let start = Instant::now();
            for inst in instances {
                std::hint::black_box(p.plan(std::hint::black_box(inst)).ok());
            }
            start.elapsed().as_secs_f64() / instances.len() as f64
        })
        .collect();
    median(&reps).unwrap_or(0.0)
}

pub fn combined_score(mean_balance: f64, time: f64, time_ref: f64) -> f64 {
    let ratio = if time_ref > 0.0 { time / time_ref } else { 0.0 };
    0.5 * mean_balance + 0.5 / (1.0 + ratio)
}

pub fn evaluate(text: &str, split: &str, seed: u64) -> Report {
    let pipeline = match Pipeline::parse(text) {
        Ok(p) => p,
        Err(e) => return Report::invalid(INVALID_FLOOR, format!("candidate document: {e}")),
    };
    let Some(shifts) = shifts_for(split, seed) else {
        return Report::invalid(INVALID_FLOOR, format!("unknown split `{split}`"));
    };
    let instances: Vec<PlacementInstance> = shifts.into_iter().map(instance).collect();
    let mut balances = Vec::with_capacity(instances.len());
    let mut plans = Vec::with_capacity(instances.len());
    for (i, inst) in instances.iter().enumerate() {
        let plan = match pipeline.plan(inst).and_then(|p| p.validate(inst).map(|_| p)) {
            Ok(p) => p,
            Err(e) => return Report::invalid(INVALID_FLOOR, format!("shift {i}: {e}")),
        };
        balances.push(balance_factor(&plan.pack_loads(&inst.loads)));
        plans.push(plan);
    }
    let mean_balance = balances.iter().sum::<f64>() / balances.len() as f64;
    let time = time_pipeline(&pipeline, &instances);
    let time_ref = time_pipeline(&Pipeline::GREEDY, &instances);

    let worst = (0..balances.len())
        .min_by(|&a, &b| balances[a].total_cmp(&balances[b]).then(a.cmp(&b)))
        .expect("nonempty trace");
    let per_instance = expert_residuals(&plans[worst], &instances[worst]);
    let mut metrics = BTreeMap::new();
    metrics.insert("balance".into(), mean_balance);
    metrics.insert("worst_balance".into(), balances[worst]);
    metrics.insert("time_ms".into(), time * 1e3);
    metrics.insert("time_ref_ms".into(), time_ref * 1e3);
    let feedback = worst_shift_feedback(worst, &plans[worst], &instances[worst]);
    Report {
        valid: true,
        combined_score: combined_score(mean_balance, time, time_ref),
        metrics,
        per_instance,
        feedback,
    }
}

/// For each expert, mean pack load over the heaviest pack holding one of its
/// replicas.
pub fn expert_residuals(plan: &PlacementPlan, inst: &PlacementInstance) -> Vec<InstanceScore> {
    let loads = plan.pack_loads(&inst.loads);
    let mean = loads.iter().sum::<f64>() / loads.len() as f64;
    let mut heaviest = vec![0.0f64; inst.loads.len()];
    for (p, pack) in plan.packs.iter().enumerate() {
        for &e in pack {
            heaviest[e] = heaviest[e].max(loads[p]);
        }
    }
    heaviest
        .iter()
        .enumerate()
        .map(|(e, &h)| InstanceScore::new(format!("expert-{e}"), if h > 0.0 { mean / h } else { 1.0 }))
        .collect()
}

fn worst_shift_feedback(shift: usize, plan: &PlacementPlan, inst: &PlacementInstance) -> String {
    let loads = plan.pack_loads(&inst.loads);
    let (hot, hot_load) = loads
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |acc, (p, &l)| if l > acc.1 { (p, l) } else { acc });
    let mut experts = plan.packs[hot].clone();
    experts.sort_unstable();
    experts.dedup();
    let detail: Vec<String> = experts
        .iter()
        .map(|&e| format!("e{e}: load {} x{}", inst.loads[e], plan.replica_counts[e]))
        .collect();
    format!(
        "worst shift {shift}: balance {}; pack {hot} carries {} against mean {} ({})",
        fmt3(balance_factor(&loads)),
        fmt3(hot_load),
        fmt3(loads.iter().sum::<f64>() / loads.len() as f64),
        detail.join(", ")
    )
}
