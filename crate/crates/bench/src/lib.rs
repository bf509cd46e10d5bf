//! Benchmark worlds for the ADRS engine.
//!
//! Each benchmark is a deterministic simulator plus a library of reference
//! policies, exposed as an evaluator command that speaks the harness
//! protocol (see [`protocol`]). The four worlds are:
//!
//! - [`cbl`]: deadline-driven jobs on spot/on-demand instances, single and
//!   multi-region.
//! - [`eplb`]: MoE expert replica allocation and GPU placement.
//! - [`txn`]: transaction scheduling under a unit-time dispatch model.
//! - [`llmsql`]: table reordering for prefix-cache reuse.
//!
//! Candidates for every benchmark are small `key = value` documents whose
//! evolvable part sits inside `EVOLVE-BLOCK` markers (see [`doc`]).

pub mod cbl;
pub mod doc;
pub mod eplb;
pub mod llmsql;
pub mod protocol;
pub mod stats;
pub mod txn;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for a named purpose inside a benchmark.
pub(crate) fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
