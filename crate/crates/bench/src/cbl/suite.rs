//! Seeded synthetic trace suites.
//!
//! Availability follows a two-state Markov chain parameterized by its
//! stationary availability and the mean length of an available run.

use rand::Rng;

use super::{JobSpec, Scenario, SpotTrace};
use crate::seeded_rng;

const SUITE_SEED: u64 = 0x5eed_cb1;
const SPOT_PRICE: f64 = 1.0;
const ONDEMAND_PRICE: f64 = 3.0;

/// Availability levels crossed with run-length regimes.
pub const AVAILABILITY: [f64; 3] = [0.2, 0.5, 0.8];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Bursty,
    Steady,
}

impl Regime {
    pub fn mean_run(self) -> f64 {
        match self {
            Regime::Bursty => 3.0,
            Regime::Steady => 16.0,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Regime::Bursty => "bursty",
            Regime::Steady => "steady",
        }
    }
}

/// Markov availability trace with stationary rate `avail` and mean available
/// run `mean_run`.
pub fn markov_trace(len: usize, avail: f64, mean_run: f64, rng: &mut impl Rng) -> Vec<bool> {
    let leave = (1.0 / mean_run).clamp(0.0, 1.0);
    let enter = (avail * leave / (1.0 - avail).max(1e-9)).clamp(0.0, 1.0);
    let mut state = rng.random_bool(avail.clamp(0.0, 1.0));
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(state);
        state = if state {
            !rng.random_bool(leave)
        } else {
            rng.random_bool(enter)
        };
    }
    out
}

fn trace(region: String, availability: Vec<bool>) -> SpotTrace {
    SpotTrace {
        region,
        availability,
        spot_price: SPOT_PRICE,
        ondemand_price: ONDEMAND_PRICE,
    }
}

/// The 20-trace single-region suite.
pub fn single_region() -> Vec<Scenario> {
    let mut rng = seeded_rng(SUITE_SEED, 1);
    let regimes = [Regime::Bursty, Regime::Steady];
    (0..20)
        .map(|i| {
            let avail = AVAILABILITY[i % 3];
            let regime = regimes[(i / 3) % 2];
            let deadline = 96 + 8 * (i as u32 % 4);
            // Work fraction between 0.55 and 0.75 of the deadline.
            let duration = deadline * (55 + 5 * (i as u32 % 5)) / 100;
            let changeover = 1 + (i as u32 % 2);
            let avail_flags = markov_trace(deadline as usize, avail, regime.mean_run(), &mut rng);
            Scenario {
                name: format!("s{i:02}-a{:.0}-{}", avail * 100.0, regime.tag()),
                job: JobSpec::new(duration, deadline, changeover).expect("suite job"),
                traces: vec![trace("r0".into(), avail_flags)],
                migration_delay: changeover,
            }
        })
        .collect()
}

/// The 12-trace multi-region suite, two or three regions each. Regions
/// differ in quality so that where a job migrates matters.
pub fn multi_region() -> Vec<Scenario> {
    let mut rng = seeded_rng(SUITE_SEED, 2);
    let profiles: [&[(f64, Regime)]; 4] = [
        &[(0.3, Regime::Bursty), (0.8, Regime::Steady)],
        &[(0.5, Regime::Bursty), (0.2, Regime::Bursty)],
        &[(0.2, Regime::Bursty), (0.5, Regime::Bursty), (0.8, Regime::Steady)],
        &[(0.5, Regime::Steady), (0.3, Regime::Bursty), (0.2, Regime::Bursty)],
    ];
    (0..12)
        .map(|i| {
            let profile = profiles[i % 4];
            let deadline = 120 + 10 * (i as u32 % 3);
            let duration = deadline * (55 + 5 * (i as u32 % 3)) / 100;
            let changeover = 1 + (i as u32 % 2);
            let traces = profile
                .iter()
                .enumerate()
                .map(|(r, &(a, regime))| {
                    trace(format!("r{r}"), markov_trace(deadline as usize, a, regime.mean_run(), &mut rng))
                })
                .collect::<Vec<_>>();
            Scenario {
                name: format!("m{i:02}-{}r", traces.len()),
                job: JobSpec::new(duration, deadline, changeover).expect("suite job"),
                traces,
                migration_delay: changeover,
            }
        })
        .collect()
}

/// Traces where spot capacity never disappears.
pub fn all_available() -> Vec<Scenario> {
    (0..4)
        .map(|i| {
            let deadline = 50 + 10 * i;
            Scenario {
                name: format!("full-avail-{i}"),
                job: JobSpec::new(deadline * 3 / 5, deadline, 1 + i % 2).expect("suite job"),
                traces: vec![trace("r0".into(), vec![true; deadline as usize])],
                migration_delay: 1,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn markov_trace_hits_its_stationary_rate() {
        let mut rng = seeded_rng(1, 0);
        let t = markov_trace(200_000, 0.3, 4.0, &mut rng);
        let rate = t.iter().filter(|a| **a).count() as f64 / t.len() as f64;
        assert!((rate - 0.3).abs() < 0.01, "{rate}");
        let runs = super::super::runs_of(&t);
        let mean = runs.iter().map(|r| f64::from(*r)).sum::<f64>() / runs.len() as f64;
        assert!((mean - 4.0).abs() < 0.1, "{mean}");
    }

    #[test]
    fn suites_are_valid_and_reproducible() {
        let a = single_region();
        assert_eq!(a.len(), 20);
        assert_eq!(a, single_region());
        let m = multi_region();
        assert_eq!(m.len(), 12);
        assert!(m.iter().all(|s| (2..=3).contains(&s.traces.len())));
        for s in a.iter().chain(&m).chain(&all_available()) {
            s.validate().unwrap();
        }
    }
}
