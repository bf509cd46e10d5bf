//! Evolutionary program search over evolve regions of a text program.

pub mod candidate;
pub mod config;
pub mod generator;
pub mod harness;
pub mod patch;
pub mod population;
pub mod prompt;
pub mod rng;
pub mod score;
pub mod control;
pub mod engine;
pub mod events;
pub mod store;
#[cfg(feature = "host")]
pub mod api;
