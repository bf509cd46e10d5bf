//! `bench-cbl`: scores a policy document by its savings over uniform progress.
//!
//! ```text
//! # EVOLVE-BLOCK-START
//! policy = adaptive
//! wait_cap = 0.9
//! # EVOLVE-BLOCK-END
//! ```

use std::collections::BTreeMap;

use rand::seq::index::sample;

use super::suite;
use super::{
    simulate, AdaptiveParams, AdaptivePolicy, CostReport, GreedyPolicy, MultiRoundRobinPolicy,
    Policy, Scenario, UniformProgressPolicy, UrgencyExplorerPolicy, UrgencyParams,
};
use crate::doc::{Doc, DocError};
use crate::protocol::{fmt3, InstanceScore, Report};
use crate::seeded_rng;

pub const INVALID_FLOOR: f64 = -1.0;

const KEYS: &[&str] = &[
    "policy",
    "strict",
    "recent_window",
    "lock_scale",
    "unlock_scale",
    "wait_cap",
    "safety",
    "explore",
    "lag",
];

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyKind {
    Greedy,
    Uniform,
    Adaptive(AdaptiveParams),
    MultiRoundRobin,
    Urgency(UrgencyParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub kind: PolicyKind,
    /// SPOT requests without capacity make the candidate invalid.
    pub strict: bool,
}

impl Candidate {
    pub fn parse(text: &str) -> Result<Self, DocError> {
        let doc = Doc::parse(text)?;
        doc.reject_unknown(KEYS)?;
        let name = doc.require_str("policy")?;
        let kind = match name {
            "greedy" => PolicyKind::Greedy,
            "uniform" => PolicyKind::Uniform,
            "adaptive" => {
                let d = AdaptiveParams::default();
                PolicyKind::Adaptive(AdaptiveParams {
                    recent_window: doc.get_or("recent_window", d.recent_window)?,
                    lock_scale: doc.get_or("lock_scale", d.lock_scale)?,
                    unlock_scale: doc.get_or("unlock_scale", d.unlock_scale)?,
                    wait_cap: doc.get_or("wait_cap", d.wait_cap)?,
                })
            }
            "multi-rr" => PolicyKind::MultiRoundRobin,
            "urgency" => {
                let d = UrgencyParams::default();
                PolicyKind::Urgency(UrgencyParams {
                    safety: doc.get_or("safety", d.safety)?,
                    explore: doc.get_or("explore", d.explore)?,
                    lag: doc.get_or("lag", d.lag)?,
                })
            }
            other => {
                return Err(DocError::BadValue {
                    key: "policy".into(),
                    value: other.into(),
                })
            }
        };
        Ok(Self {
            kind,
            strict: doc.get_or("strict", true)?,
        })
    }

    pub fn policy(&self) -> Box<dyn Policy> {
        match &self.kind {
            PolicyKind::Greedy => Box::new(GreedyPolicy),
            PolicyKind::Uniform => Box::new(UniformProgressPolicy),
            PolicyKind::Adaptive(p) => Box::new(AdaptivePolicy::new(*p)),
            PolicyKind::MultiRoundRobin => Box::new(MultiRoundRobinPolicy),
            PolicyKind::Urgency(p) => Box::new(UrgencyExplorerPolicy::new(*p)),
        }
    }
}

/// Scenarios for a split. Minibatch splits sample 30% of their suite.
pub fn scenarios_for(split: &str, seed: u64) -> Option<Vec<Scenario>> {
    let (all, sampled) = match split {
        "full" | "validation" => (suite::single_region(), false),
        "minibatch" => (suite::single_region(), true),
        "multi" => (suite::multi_region(), false),
        "multi-minibatch" => (suite::multi_region(), true),
        "available" => (suite::all_available(), false),
        _ => return None,
    };
    if !sampled {
        return Some(all);
    }
    let k = (all.len() * 3).div_ceil(10);
    let mut rng = seeded_rng(seed, 0xcb1);
    let mut idx = sample(&mut rng, all.len(), k).into_vec();
    idx.sort_unstable();
    Some(idx.into_iter().map(|i| all[i].clone()).collect())
}

pub fn savings(baseline: f64, cost: f64) -> f64 {
    (baseline - cost) / baseline
}

struct TraceResult<'a> {
    scenario: &'a Scenario,
    report: CostReport,
    baseline: f64,
}

pub fn evaluate(text: &str, split: &str, seed: u64) -> Report {
    let candidate = match Candidate::parse(text) {
        Ok(c) => c,
        Err(e) => return Report::invalid(INVALID_FLOOR, format!("candidate document: {e}")),
    };
    let Some(scenarios) = scenarios_for(split, seed) else {
        return Report::invalid(INVALID_FLOOR, format!("unknown split `{split}`"));
    };
    let mut policy = candidate.policy();
    let results: Vec<TraceResult> = scenarios
        .iter()
        .map(|s| TraceResult {
            scenario: s,
            report: simulate(policy.as_mut(), s),
            baseline: simulate(&mut UniformProgressPolicy, s).total_cost,
        })
        .collect();
    score(&candidate, &results)
}

fn score(candidate: &Candidate, results: &[TraceResult]) -> Report {
    let n = results.len() as f64;
    let misses: Vec<&str> = results
        .iter()
        .filter(|r| !r.report.met_deadline)
        .map(|r| r.scenario.name.as_str())
        .collect();
    let violations: u32 = results.iter().map(|r| r.report.violations).sum();
    let per_instance: Vec<InstanceScore> = results
        .iter()
        .map(|r| InstanceScore::new(&r.scenario.name, savings(r.baseline, r.report.total_cost)))
        .collect();
    let mean_savings = per_instance.iter().map(|p| p.score).sum::<f64>() / n;
    let od_savings = results
        .iter()
        .map(|r| savings(r.scenario.ondemand_only_cost(), r.report.total_cost))
        .sum::<f64>()
        / n;

    let mut metrics = BTreeMap::new();
    metrics.insert("savings".into(), mean_savings);
    metrics.insert("savings_vs_ondemand".into(), od_savings);
    metrics.insert(
        "mean_cost".into(),
        results.iter().map(|r| r.report.total_cost).sum::<f64>() / n,
    );
    metrics.insert(
        "baseline_cost".into(),
        results.iter().map(|r| r.baseline).sum::<f64>() / n,
    );
    metrics.insert("deadline_misses".into(), misses.len() as f64);
    metrics.insert("violations".into(), f64::from(violations));
    metrics.insert(
        "migrations".into(),
        results.iter().map(|r| f64::from(r.report.migrations)).sum::<f64>(),
    );

    let mut feedback = worst_five(results, &per_instance);
    let mut valid = misses.is_empty();
    if !misses.is_empty() {
        feedback = format!("missed deadline on: {}\n{feedback}", misses.join(", "));
    }
    if candidate.strict && violations > 0 {
        valid = false;
        feedback = format!("{violations} SPOT requests without capacity\n{feedback}");
    }
    Report {
        valid,
        combined_score: if valid { mean_savings } else { INVALID_FLOOR },
        metrics,
        per_instance,
        feedback,
    }
}

fn worst_five(results: &[TraceResult], scores: &[InstanceScore]) -> String {
    let mut order: Vec<usize> = (0..results.len()).collect();
    order.sort_by(|&a, &b| scores[a].score.total_cmp(&scores[b].score).then(a.cmp(&b)));
    let mut lines = vec!["worst traces (savings, availability, mean spot run):".to_string()];
    for &i in order.iter().take(5) {
        let r = &results[i];
        let stats: Vec<String> = r
            .scenario
            .traces
            .iter()
            .map(|t| {
                let runs = t.runs();
                let mean_run = if runs.is_empty() {
                    0.0
                } else {
                    runs.iter().map(|x| f64::from(*x)).sum::<f64>() / runs.len() as f64
                };
                format!("{} avail {} run {}", t.region, fmt3(t.availability_rate()), fmt3(mean_run))
            })
            .collect();
        lines.push(format!(
            "  {}: {} ({}; switches {}, migrations {})",
            r.scenario.name,
            fmt3(scores[i].score),
            stats.join(", "),
            r.report.switches,
            r.report.migrations
        ));
    }
    lines.join("\n")
}
