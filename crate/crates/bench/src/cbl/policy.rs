//! Scheduling policies for the spot/on-demand simulator.
//!
//! All policies reason in terms of slack: remaining steps minus remaining
//! work. Entering an instance costs a changeover (see [`StepView::entry_cost`]),
//! and a policy that leaves on-demand capacity must keep enough slack to pay
//! one more changeover later.

use serde::{Deserialize, Serialize};

use super::{runs_of, Action, Decision, JobSpec};
use crate::stats::percentile;

/// What a policy sees at one time step.
#[derive(Debug, Clone, Copy)]
pub struct StepView<'a> {
    pub elapsed: u32,
    pub progress: u32,
    pub job: JobSpec,
    pub state: Action,
    pub region: usize,
    /// False until the first instance has been launched.
    pub started: bool,
    pub changeover_left: u32,
    pub migration_delay: u32,
    pub has_spot: &'a [bool],
}

impl StepView<'_> {
    pub fn remaining_time(&self) -> i64 {
        i64::from(self.job.deadline) - i64::from(self.elapsed)
    }

    pub fn remaining_work(&self) -> i64 {
        i64::from(self.job.duration) - i64::from(self.progress)
    }

    pub fn slack(&self) -> i64 {
        self.remaining_time() - self.remaining_work()
    }

    /// Steps without progress before `action` in `region` starts producing work.
    pub fn entry_cost(&self, action: Action, region: usize) -> i64 {
        if action == Action::None {
            return 0;
        }
        if action == self.state && region == self.region {
            return i64::from(self.changeover_left);
        }
        if !self.started {
            return 0;
        }
        let mut cost = i64::from(self.job.changeover);
        if region != self.region {
            cost += i64::from(self.migration_delay);
        }
        cost
    }

    /// Whether taking spot capacity in `region` still leaves room to fall back
    /// to on-demand after a preemption.
    pub fn spot_affordable(&self, region: usize) -> bool {
        self.has_spot[region]
            && self.slack() - self.entry_cost(Action::Spot, region) >= i64::from(self.job.changeover)
    }

    /// Expected progress under a uniform rate of duration / deadline.
    pub fn expected_progress(&self) -> f64 {
        f64::from(self.elapsed) * f64::from(self.job.duration) / f64::from(self.job.deadline)
    }
}

pub trait Policy {
    /// Called before every simulation.
    fn reset(&mut self, _regions: usize) {}
    fn decide(&mut self, view: &StepView) -> Decision;
}

/// Reference point for savings: never touches spot capacity.
pub struct OnDemandOnly;

impl Policy for OnDemandOnly {
    fn decide(&mut self, view: &StepView) -> Decision {
        Decision::ondemand(view.region)
    }
}

/// Spot whenever it is safe, on-demand only under deadline pressure.
#[derive(Debug, Clone, Copy, Default)]
pub struct GreedyPolicy;

impl Policy for GreedyPolicy {
    fn decide(&mut self, view: &StepView) -> Decision {
        greedy_step(view, view.region)
    }
}

fn greedy_step(view: &StepView, region: usize) -> Decision {
    if view.spot_affordable(region) {
        return Decision::spot(region);
    }
    // Deadline pressure: remaining steps minus one changeover no longer
    // exceed the remaining work.
    if view.slack() <= i64::from(view.job.changeover) {
        Decision::ondemand(view.region)
    } else {
        Decision::none(view.region)
    }
}

/// Tracks a uniform progress line and runs whenever it falls behind.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformProgressPolicy;

impl UniformProgressPolicy {
    /// The uniform-progress rule on its own, without the deadline guard.
    pub fn track(&self, view: &StepView) -> Decision {
        let here = view.region;
        let has_spot = view.has_spot[here];
        let expected = view.expected_progress();
        let actual = f64::from(view.progress);
        if actual < expected {
            return if has_spot {
                Decision::spot(here)
            } else {
                Decision::ondemand(here)
            };
        }
        if view.state == Action::OnDemand {
            let buffer = expected + 2.0 * f64::from(view.job.changeover);
            if actual < buffer {
                return Decision::ondemand(here);
            }
        }
        if has_spot {
            Decision::spot(here)
        } else {
            Decision::none(here)
        }
    }
}

impl Policy for UniformProgressPolicy {
    fn decide(&mut self, view: &StepView) -> Decision {
        let d = self.track(view);
        // Deadline guard: never idle or take spot once a later preemption
        // could no longer be absorbed by one on-demand changeover.
        let changeover = i64::from(view.job.changeover);
        match d.action {
            Action::Spot if !view.spot_affordable(d.region) => Decision::ondemand(view.region),
            Action::None if view.slack() <= changeover => Decision::ondemand(view.region),
            _ => d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveParams {
    /// Window for the recent-availability average used in the trend.
    pub recent_window: usize,
    pub lock_scale: f64,
    pub unlock_scale: f64,
    pub wait_cap: f64,
}

impl Default for AdaptiveParams {
    fn default() -> Self {
        Self {
            recent_window: 10,
            lock_scale: 1.0,
            unlock_scale: 1.0,
            wait_cap: 0.9,
        }
    }
}

/// History-aware policy: seals on-demand under tight slack, waits out short
/// gaps in spot availability when there is room to do so.
#[derive(Debug, Clone, Default)]
pub struct AdaptivePolicy {
    pub params: AdaptiveParams,
    history: Vec<bool>,
    gaps: Vec<bool>,
    sealed: bool,
    od_dwell: u32,
    wait_time: u32,
}

impl AdaptivePolicy {
    pub fn new(params: AdaptiveParams) -> Self {
        Self {
            params,
            ..Self::default()
        }
    }

    fn lock_margin(&self, d: f64, stable: f64) -> f64 {
        2.0 * d + self.params.lock_scale * stable
    }

    fn unlock_margin(&self, d: f64, recover: f64) -> f64 {
        3.0 * d + self.params.unlock_scale * recover
    }

    fn min_dwell(d: u32) -> u32 {
        d + 1
    }

    fn retry_buffer(d: f64) -> f64 {
        2.0 * d + 1.0
    }

    fn switch_threshold(avail: f64, trend: f64) -> u32 {
        (((1.0 - avail - trend) * 4.0).ceil()).max(1.0) as u32
    }

    fn wait_factor(&self, avail: f64, trend: f64) -> f64 {
        (0.5 * avail + 0.5 * trend.max(0.0)).clamp(0.0, self.params.wait_cap.min(0.9))
    }

    fn decide_inner(&mut self, view: &StepView) -> Action {
        let here = view.region;
        let has_spot = view.has_spot[here];
        let d = f64::from(view.job.changeover);

        self.history.push(has_spot);
        self.gaps.push(!has_spot);
        let avail = self.history.iter().filter(|h| **h).count() as f64 / self.history.len() as f64;
        let window = self.params.recent_window.max(1).min(self.history.len());
        let recent = &self.history[self.history.len() - window..];
        let trend = recent.iter().filter(|h| **h).count() as f64 / window as f64 - avail;

        let runs = runs_of(&self.history);
        // Margins are sized by how long spot capacity tends to stay away.
        let gaps = runs_of(&self.gaps);
        let stable = percentile(&gaps, 25.0);
        let recover = percentile(&gaps, 50.0);
        let cur_run = self.history.iter().rev().take_while(|h| **h).count() as f64;

        // Switching onto on-demand costs a changeover unless already there.
        let needed = view.remaining_work()
            + if view.state == Action::OnDemand {
                i64::from(view.changeover_left)
            } else {
                i64::from(view.job.changeover)
            };
        let slack = (view.remaining_time() - needed) as f64;

        if view.state == Action::OnDemand {
            self.od_dwell += 1;
        } else {
            self.od_dwell = 0;
        }

        if slack <= 0.0 {
            return Action::OnDemand;
        }
        if slack <= self.lock_margin(d, stable) {
            self.sealed = true;
        }
        if self.sealed {
            if has_spot && cur_run >= recover && slack > self.unlock_margin(d, recover) {
                self.sealed = false;
            }
            if self.sealed {
                return Action::OnDemand;
            }
        }
        if view.state == Action::OnDemand && self.od_dwell < Self::min_dwell(view.job.changeover) {
            return Action::OnDemand;
        }
        if slack <= Self::retry_buffer(d) {
            return if has_spot { Action::Spot } else { Action::OnDemand };
        }
        if has_spot {
            if view.state == Action::OnDemand {
                let thresh = Self::switch_threshold(avail, trend);
                let longest = runs.iter().copied().max().unwrap_or(0);
                return if longest >= thresh {
                    Action::Spot
                } else {
                    Action::OnDemand
                };
            }
            return Action::Spot;
        }
        if view.state == Action::OnDemand {
            return Action::OnDemand;
        }
        let wait = slack * self.wait_factor(avail, trend);
        if f64::from(self.wait_time) < wait {
            Action::None
        } else {
            Action::OnDemand
        }
    }
}

impl Policy for AdaptivePolicy {
    fn reset(&mut self, _regions: usize) {
        self.history.clear();
        self.gaps.clear();
        self.sealed = false;
        self.od_dwell = 0;
        self.wait_time = 0;
    }

    fn decide(&mut self, view: &StepView) -> Decision {
        let action = self.decide_inner(view);
        if action == Action::None {
            self.wait_time += 1;
        } else {
            self.wait_time = 0;
        }
        Decision {
            action,
            region: view.region,
        }
    }
}

/// Multi-region baseline: uniform progress, taking local spot first and
/// otherwise the next region in round-robin order that has spot capacity.
#[derive(Debug, Clone, Copy, Default)]
pub struct MultiRoundRobinPolicy;

impl Policy for MultiRoundRobinPolicy {
    fn decide(&mut self, view: &StepView) -> Decision {
        let n = view.has_spot.len();
        let here = view.region;
        let target = (0..n)
            .map(|k| (here + k) % n)
            .find(|&r| view.spot_affordable(r));
        if target == Some(here) {
            return Decision::spot(here);
        }
        let expected = view.expected_progress();
        let actual = f64::from(view.progress);
        if actual < expected {
            return target.map_or(Decision::ondemand(here), Decision::spot);
        }
        if view.state == Action::OnDemand && actual < expected + 2.0 * f64::from(view.job.changeover) {
            return Decision::ondemand(here);
        }
        match target {
            Some(r) => Decision::spot(r),
            None if view.slack() <= i64::from(view.job.changeover) => Decision::ondemand(here),
            None => Decision::none(here),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UrgencyParams {
    /// Slack multiple of the migration changeover that counts as deadline
    /// pressure.
    pub safety: f64,
    /// Exploration weight in the region score.
    pub explore: f64,
    /// Lag behind the uniform line, in changeovers, tolerated before the job
    /// counts as behind schedule.
    pub lag: f64,
}

impl Default for UrgencyParams {
    fn default() -> Self {
        Self {
            safety: 2.0,
            explore: 0.5,
            lag: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Urgency {
    Relaxed,
    /// Behind the uniform progress line.
    Behind,
    /// Too little slack left to risk a migration.
    Pressed,
}

/// Explores other regions while the job has slack. Behind schedule it takes
/// spot wherever it can get it; under deadline pressure it only runs locally.
#[derive(Debug, Clone, Default)]
pub struct UrgencyExplorerPolicy {
    pub params: UrgencyParams,
    succ: Vec<u32>,
    fail: Vec<u32>,
    visits: Vec<u32>,
}

impl UrgencyExplorerPolicy {
    pub fn new(params: UrgencyParams) -> Self {
        Self {
            params,
            ..Self::default()
        }
    }

    /// Success-rate estimate plus an exploration bonus.
    pub fn region_score(&self, r: usize) -> f64 {
        let total: u32 = self.visits.iter().sum();
        let rate = f64::from(self.succ[r] + 1) / f64::from(self.succ[r] + self.fail[r] + 2);
        let bonus = (f64::from(total.max(1)).ln() / f64::from(self.visits[r] + 1)).sqrt();
        rate + self.params.explore * bonus
    }

    pub fn urgency(&self, view: &StepView) -> Urgency {
        let pressure = (view.slack() as f64)
            <= self.params.safety * f64::from(view.job.changeover + view.migration_delay);
        if pressure {
            return Urgency::Pressed;
        }
        let lag = self.params.lag * f64::from(view.job.changeover);
        if f64::from(view.progress) + lag < view.expected_progress() {
            Urgency::Behind
        } else {
            Urgency::Relaxed
        }
    }
}

impl Policy for UrgencyExplorerPolicy {
    fn reset(&mut self, regions: usize) {
        self.succ = vec![0; regions];
        self.fail = vec![0; regions];
        self.visits = vec![0; regions];
        if regions > 0 {
            self.visits[0] = 1;
        }
    }

    fn decide(&mut self, view: &StepView) -> Decision {
        let here = view.region;
        if view.started {
            if view.has_spot[here] {
                self.succ[here] += 1;
            } else {
                self.fail[here] += 1;
            }
        }
        if view.spot_affordable(here) {
            return Decision::spot(here);
        }
        let urgency = self.urgency(view);
        if urgency == Urgency::Pressed {
            return Decision::ondemand(here);
        }
        let target = (0..view.has_spot.len())
            .filter(|&r| r != here && view.spot_affordable(r))
            .max_by(|&a, &b| {
                self.region_score(a)
                    .total_cmp(&self.region_score(b))
                    .then(b.cmp(&a))
            });
        match (target, urgency) {
            (Some(r), _) => {
                self.visits[r] += 1;
                Decision::spot(r)
            }
            (None, Urgency::Behind) => Decision::ondemand(here),
            (None, _) => greedy_step(view, here),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{simulate, Scenario, SpotTrace};
    use super::*;

    fn view<'a>(job: JobSpec, elapsed: u32, progress: u32, state: Action, has_spot: &'a [bool]) -> StepView<'a> {
        StepView {
            elapsed,
            progress,
            job,
            state,
            region: 0,
            started: elapsed > 0,
            changeover_left: 0,
            migration_delay: 0,
            has_spot,
        }
    }

    fn scenario(regions: Vec<Vec<bool>>, job: JobSpec, migration_delay: u32) -> Scenario {
        Scenario {
            name: "t".into(),
            job,
            traces: regions
                .into_iter()
                .enumerate()
                .map(|(i, a)| SpotTrace {
                    region: format!("r{i}"),
                    availability: a,
                    spot_price: 1.0,
                    ondemand_price: 3.0,
                })
                .collect(),
            migration_delay,
        }
    }

    #[test]
    fn greedy_never_leaves_spot_on_full_availability() {
        let s = scenario(vec![vec![true; 20]], JobSpec::new(12, 20, 2).unwrap(), 0);
        let r = simulate(&mut GreedyPolicy, &s);
        assert!(r.steps.iter().all(|s| s.action == Action::Spot));
        assert_eq!(r.total_cost, 12.0);
    }

    #[test]
    fn greedy_zero_slack_never_idles() {
        let s = scenario(vec![vec![false, true, false, true, true, false]], JobSpec::new(6, 6, 1).unwrap(), 0);
        let r = simulate(&mut GreedyPolicy, &s);
        assert!(r.steps.iter().all(|s| s.action != Action::None));
        assert!(r.met_deadline);
    }

    #[test]
    fn uniform_progress_idles_at_start_without_spot() {
        let job = JobSpec::new(5, 10, 1).unwrap();
        let d = UniformProgressPolicy.decide(&view(job, 0, 0, Action::None, &[false]));
        assert_eq!(d.action, Action::None);
    }

    #[test]
    fn uniform_progress_rate_one_never_idles() {
        let s = scenario(vec![vec![false, true, true, false, false, true, false, true]], JobSpec::new(8, 8, 0).unwrap(), 0);
        let r = simulate(&mut UniformProgressPolicy, &s);
        assert!(r.steps.iter().all(|s| s.action != Action::None));
    }

    #[test]
    fn uniform_progress_without_changeover_leaves_ondemand_once_caught_up() {
        let job = JobSpec::new(5, 10, 0).unwrap();
        // On demand, exactly on schedule: buffer = expected, so it stops.
        let d = UniformProgressPolicy.decide(&view(job, 4, 2, Action::OnDemand, &[false]));
        assert_eq!(d.action, Action::None);
        let job = JobSpec::new(5, 10, 1).unwrap();
        let d = UniformProgressPolicy.decide(&view(job, 4, 2, Action::OnDemand, &[false]));
        assert_eq!(d.action, Action::OnDemand);
    }

    #[test]
    fn adaptive_forces_ondemand_without_slack() {
        let job = JobSpec::new(10, 12, 1).unwrap();
        let mut p = AdaptivePolicy::default();
        p.reset(1);
        // remaining 4, work 3, changeover 1: slack 0.
        let d = p.decide(&view(job, 8, 7, Action::None, &[true]));
        assert_eq!(d.action, Action::OnDemand);
    }

    #[test]
    fn adaptive_sealed_without_spot_stays_ondemand() {
        let job = JobSpec::new(10, 20, 1).unwrap();
        let mut p = AdaptivePolicy::default();
        p.reset(1);
        // slack = 10 - 7 - 1 = 2 <= lock margin 2: sealed.
        assert_eq!(p.decide(&view(job, 10, 3, Action::None, &[false])).action, Action::OnDemand);
        assert!(p.sealed);
        assert_eq!(p.decide(&view(job, 11, 3, Action::OnDemand, &[false])).action, Action::OnDemand);
    }

    #[test]
    fn round_robin_single_region_matches_uniform_progress() {
        let avail = vec![true, false, false, true, true, false, true, false, false, false, true, true];
        let s = scenario(vec![avail], JobSpec::new(7, 12, 1).unwrap(), 0);
        assert_eq!(simulate(&mut MultiRoundRobinPolicy, &s), simulate(&mut UniformProgressPolicy, &s));
    }

    #[test]
    fn round_robin_alternates_between_regions() {
        let even: Vec<bool> = (0..6).map(|t| t % 2 == 0).collect();
        let odd: Vec<bool> = (0..6).map(|t| t % 2 == 1).collect();
        let s = scenario(vec![even, odd], JobSpec::new(6, 6, 0).unwrap(), 0);
        let r = simulate(&mut MultiRoundRobinPolicy, &s);
        let regions: Vec<usize> = r.steps.iter().map(|s| s.region).collect();
        assert_eq!(regions, vec![0, 1, 0, 1, 0, 1]);
        assert_eq!(r.migrations, 5);
        assert!(r.steps.iter().all(|s| s.action == Action::Spot));
    }

    #[test]
    fn round_robin_without_capacity_is_pure_ondemand() {
        let s = scenario(vec![vec![false; 8], vec![false; 8]], JobSpec::new(8, 8, 1).unwrap(), 1);
        let r = simulate(&mut MultiRoundRobinPolicy, &s);
        assert!(r.steps.iter().all(|s| s.action == Action::OnDemand));
        assert!(r.met_deadline);
    }

    #[test]
    fn unvisited_region_has_the_largest_score() {
        let mut p = UrgencyExplorerPolicy::default();
        p.reset(3);
        p.visits = vec![4, 1, 0];
        p.succ = vec![3, 1, 0];
        p.fail = vec![1, 0, 0];
        // total 5: r1 = 2/3 + 0.5*sqrt(ln5/2), r2 = 1/2 + 0.5*sqrt(ln5/1)
        let s1 = 2.0 / 3.0 + 0.5 * (5f64.ln() / 2.0).sqrt();
        let s2 = 0.5 + 0.5 * 5f64.ln().sqrt();
        assert!((p.region_score(1) - s1).abs() < 1e-12);
        assert!((p.region_score(2) - s2).abs() < 1e-12);
        assert!(p.region_score(2) > p.region_score(1));
        assert!(p.region_score(2) > p.region_score(0));
    }

    #[test]
    fn urgency_takes_local_spot_when_urgent() {
        let job = JobSpec::new(8, 16, 0).unwrap();
        let mut p = UrgencyExplorerPolicy::default();
        p.reset(2);
        // Behind the uniform line by more than the tolerated lag.
        let v = view(job, 6, 1, Action::None, &[true, true]);
        assert_eq!(p.urgency(&v), Urgency::Behind);
        assert_eq!(p.decide(&v), Decision::spot(0));
        // Behind without local capacity: spot elsewhere still beats on-demand.
        assert_eq!(p.decide(&view(job, 6, 1, Action::None, &[false, true])), Decision::spot(1));
    }

    #[test]
    fn urgency_under_pressure_stays_local() {
        let job = JobSpec::new(10, 16, 1).unwrap();
        let mut p = UrgencyExplorerPolicy::default();
        p.reset(2);
        let mut v = view(job, 8, 6, Action::None, &[false, true]);
        v.migration_delay = 1;
        // slack 4 <= 2 * (1 + 1)
        assert_eq!(p.urgency(&v), Urgency::Pressed);
        assert_eq!(p.decide(&v), Decision::ondemand(0));
    }

    #[test]
    fn urgency_single_region_never_migrates() {
        let avail: Vec<bool> = (0..30).map(|t| (t / 3) % 2 == 0).collect();
        let s = scenario(vec![avail], JobSpec::new(15, 30, 1).unwrap(), 1);
        let r = simulate(&mut UrgencyExplorerPolicy::default(), &s);
        assert_eq!(r.migrations, 0);
        assert!(r.met_deadline);
    }
}
