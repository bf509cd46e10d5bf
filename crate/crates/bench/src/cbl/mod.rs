//! Deadline-driven jobs on spot and on-demand instances.
//!
//! Time is discrete. A job needs `duration` units of work before `deadline`
//! steps elapse. Each step a policy picks SPOT, ON_DEMAND or NONE (and, with
//! several regions, where to run). Switching instance type, region, or
//! restarting after idling or preemption costs a changeover of
//! `changeover` steps, billed at the target's price with no progress.
//! Moving between regions adds `migration_delay` on top.

pub mod eval;
pub mod policy;
pub mod suite;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use policy::{
    AdaptiveParams, AdaptivePolicy, GreedyPolicy, MultiRoundRobinPolicy, OnDemandOnly, Policy, StepView,
    UniformProgressPolicy, UrgencyExplorerPolicy, UrgencyParams,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CblError {
    #[error("job duration {duration} must be positive and at most the deadline {deadline}")]
    BadJob { duration: u32, deadline: u32 },
    #[error("no traces given")]
    NoTraces,
    #[error("trace `{region}` covers {len} steps but the deadline is {deadline}")]
    ShortTrace {
        region: String,
        len: usize,
        deadline: u32,
    },
    #[error("trace `{region}`: need 0 < spot price < on-demand price, got {spot} / {ondemand}")]
    BadPrices {
        region: String,
        spot: f64,
        ondemand: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSpec {
    pub duration: u32,
    pub deadline: u32,
    pub changeover: u32,
}

impl JobSpec {
    pub fn new(duration: u32, deadline: u32, changeover: u32) -> Result<Self, CblError> {
        if duration == 0 || duration > deadline {
            return Err(CblError::BadJob { duration, deadline });
        }
        Ok(Self {
            duration,
            deadline,
            changeover,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotTrace {
    pub region: String,
    pub availability: Vec<bool>,
    pub spot_price: f64,
    pub ondemand_price: f64,
}

impl SpotTrace {
    pub fn availability_rate(&self) -> f64 {
        if self.availability.is_empty() {
            return 0.0;
        }
        self.availability.iter().filter(|a| **a).count() as f64 / self.availability.len() as f64
    }

    /// Lengths of the maximal runs of available steps.
    pub fn runs(&self) -> Vec<u32> {
        runs_of(&self.availability)
    }
}

pub(crate) fn runs_of(flags: &[bool]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut cur = 0;
    for &f in flags {
        if f {
            cur += 1;
        } else if cur > 0 {
            runs.push(cur);
            cur = 0;
        }
    }
    if cur > 0 {
        runs.push(cur);
    }
    runs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    Spot,
    OnDemand,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub action: Action,
    pub region: usize,
}

impl Decision {
    pub fn spot(region: usize) -> Self {
        Self {
            action: Action::Spot,
            region,
        }
    }
    pub fn ondemand(region: usize) -> Self {
        Self {
            action: Action::OnDemand,
            region,
        }
    }
    pub fn none(region: usize) -> Self {
        Self {
            action: Action::None,
            region,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub action: Action,
    pub region: usize,
    pub progress: u32,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub total_cost: f64,
    pub met_deadline: bool,
    pub steps: Vec<StepLog>,
    pub switches: u32,
    pub migrations: u32,
    pub preemptions: u32,
    /// SPOT requests in regions without capacity, coerced to NONE.
    pub violations: u32,
    pub progress: u32,
}

/// A world the simulator runs in: one job over one or more regional traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub job: JobSpec,
    pub traces: Vec<SpotTrace>,
    pub migration_delay: u32,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), CblError> {
        JobSpec::new(self.job.duration, self.job.deadline, self.job.changeover)?;
        if self.traces.is_empty() {
            return Err(CblError::NoTraces);
        }
        for t in &self.traces {
            if t.availability.len() < self.job.deadline as usize {
                return Err(CblError::ShortTrace {
                    region: t.region.clone(),
                    len: t.availability.len(),
                    deadline: self.job.deadline,
                });
            }
            if !(t.spot_price > 0.0 && t.spot_price < t.ondemand_price) {
                return Err(CblError::BadPrices {
                    region: t.region.clone(),
                    spot: t.spot_price,
                    ondemand: t.ondemand_price,
                });
            }
        }
        Ok(())
    }

    pub fn ondemand_only_cost(&self) -> f64 {
        simulate(&mut policy::OnDemandOnly, self).total_cost
    }
}

/// Runs `policy` over the scenario. Pure given a freshly reset policy.
pub fn simulate(policy: &mut dyn Policy, scenario: &Scenario) -> CostReport {
    policy.reset(scenario.traces.len());
    let job = scenario.job;
    let regions = scenario.traces.len();
    let mut state = Action::None;
    let mut region = 0usize;
    let mut started = false;
    let mut changeover_left = 0u32;
    let mut progress = 0u32;
    let mut report = CostReport {
        total_cost: 0.0,
        met_deadline: false,
        steps: Vec::with_capacity(job.deadline as usize),
        switches: 0,
        migrations: 0,
        preemptions: 0,
        violations: 0,
        progress: 0,
    };
    let mut has_spot = vec![false; regions];

    for t in 0..job.deadline {
        if progress >= job.duration {
            break;
        }
        for (flag, trace) in has_spot.iter_mut().zip(&scenario.traces) {
            *flag = trace.availability[t as usize];
        }
        if state == Action::Spot && !has_spot[region] {
            state = Action::None;
            changeover_left = 0;
            report.preemptions += 1;
        }
        let view = StepView {
            elapsed: t,
            progress,
            job,
            state,
            region,
            started,
            changeover_left,
            migration_delay: scenario.migration_delay,
            has_spot: &has_spot,
        };
        let mut decision = policy.decide(&view);
        if decision.region >= regions {
            report.violations += 1;
            decision = Decision::none(region);
        }
        if decision.action == Action::Spot && !has_spot[decision.region] {
            report.violations += 1;
            decision.action = Action::None;
        }

        let mut step_cost = 0.0;
        match decision.action {
            Action::None => {
                state = Action::None;
                changeover_left = 0;
            }
            action => {
                if action != state || decision.region != region {
                    if started {
                        report.switches += 1;
                        changeover_left = job.changeover;
                        if decision.region != region {
                            report.migrations += 1;
                            changeover_left += scenario.migration_delay;
                        }
                    } else {
                        changeover_left = 0;
                    }
                    state = action;
                    region = decision.region;
                    started = true;
                }
                let trace = &scenario.traces[region];
                step_cost = if action == Action::Spot {
                    trace.spot_price
                } else {
                    trace.ondemand_price
                };
                if changeover_left > 0 {
                    changeover_left -= 1;
                } else {
                    progress += 1;
                }
            }
        }
        report.total_cost += step_cost;
        report.steps.push(StepLog {
            action: decision.action,
            region,
            progress,
            cost: step_cost,
        });
    }
    report.progress = progress;
    report.met_deadline = progress >= job.duration;
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn single(avail: Vec<bool>, job: JobSpec, prices: (f64, f64)) -> Scenario {
        Scenario {
            name: "t".into(),
            job,
            traces: vec![SpotTrace {
                region: "r0".into(),
                availability: avail,
                spot_price: prices.0,
                ondemand_price: prices.1,
            }],
            migration_delay: 0,
        }
    }

    #[test]
    fn greedy_two_spot_steps() {
        let s = single(vec![true; 4], JobSpec::new(2, 4, 0).unwrap(), (1.0, 3.0));
        let r = simulate(&mut GreedyPolicy, &s);
        assert_eq!(r.total_cost, 2.0);
        assert!(r.met_deadline);
        assert_eq!(r.steps.len(), 2);
    }

    #[test]
    fn uniform_progress_without_spot_is_pure_ondemand() {
        let s = single(vec![false; 4], JobSpec::new(2, 4, 0).unwrap(), (1.0, 3.0));
        let r = simulate(&mut UniformProgressPolicy, &s);
        assert_eq!(r.total_cost, 6.0);
        assert!(r.met_deadline);
        assert!(r.steps.iter().all(|s| s.action != Action::Spot));
    }

    #[test]
    fn rejects_duration_past_deadline() {
        assert_eq!(
            JobSpec::new(4, 3, 0),
            Err(CblError::BadJob {
                duration: 4,
                deadline: 3
            })
        );
        assert!(JobSpec::new(0, 3, 0).is_err());
    }

    #[test]
    fn changeover_bills_target_price_without_progress() {
        // Spot for two steps, then preempted. Greedy idles while it still has
        // slack, then restarts on demand and pays one changeover step.
        let s = single(
            vec![true, true, false, false, false, false],
            JobSpec::new(4, 6, 1).unwrap(),
            (1.0, 3.0),
        );
        let r = simulate(&mut GreedyPolicy, &s);
        assert!(r.met_deadline);
        assert_eq!(r.preemptions, 1);
        let progress: Vec<u32> = r.steps.iter().map(|s| s.progress).collect();
        assert_eq!(progress, vec![1, 2, 2, 2, 3, 4]);
        assert_eq!(r.total_cost, 2.0 + 3.0 * 3.0);
    }

    struct AlwaysSpot;
    impl Policy for AlwaysSpot {
        fn decide(&mut self, view: &StepView) -> Decision {
            Decision::spot(view.region)
        }
    }

    #[test]
    fn spot_without_capacity_is_coerced_and_counted() {
        let s = single(vec![false, true, true], JobSpec::new(2, 3, 0).unwrap(), (1.0, 3.0));
        let r = simulate(&mut AlwaysSpot, &s);
        assert_eq!(r.violations, 1);
        assert_eq!(r.steps[0].action, Action::None);
        assert!(r.met_deadline);
        assert_eq!(r.total_cost, 2.0);
    }

    #[test]
    fn validation_catches_bad_traces() {
        let mut s = single(vec![true; 2], JobSpec::new(2, 4, 0).unwrap(), (1.0, 3.0));
        assert!(matches!(s.validate(), Err(CblError::ShortTrace { .. })));
        s.traces[0].availability = vec![true; 4];
        s.traces[0].spot_price = 4.0;
        assert!(matches!(s.validate(), Err(CblError::BadPrices { .. })));
    }
}
