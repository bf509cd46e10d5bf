//! Candidate programs and their evolve regions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const START_MARKER: &str = "EVOLVE-BLOCK-START";
pub const END_MARKER: &str = "EVOLVE-BLOCK-END";

pub type CandidateId = u64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegionError {
    #[error("line {0}: evolve region opened inside another region")]
    Nested(usize),
    #[error("line {0}: evolve region closed without being opened")]
    Unopened(usize),
    #[error("evolve region opened on line {0} is never closed")]
    Unclosed(usize),
    #[error("program has no evolve region")]
    None,
}

/// Half-open range of content lines between a start and an end marker
/// (marker lines excluded), zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub start: usize,
    pub end: usize,
}

fn marker_of(line: &str, prefix: &str) -> Option<&'static str> {
    let rest = line.trim().strip_prefix(prefix)?.trim();
    match rest {
        START_MARKER => Some(START_MARKER),
        END_MARKER => Some(END_MARKER),
        _ => None,
    }
}

/// Finds the evolve regions of `text`. Marker lines are full lines holding
/// the comment prefix followed by a marker word.
pub fn find_regions(text: &str, prefix: &str) -> Result<Vec<Region>, RegionError> {
    let mut out = Vec::new();
    let mut open: Option<usize> = None;
    for (i, line) in text.lines().enumerate() {
        match (marker_of(line, prefix), open) {
            (Some(START_MARKER), None) => open = Some(i),
            (Some(START_MARKER), Some(_)) => return Err(RegionError::Nested(i + 1)),
            (Some(_), Some(s)) => {
                out.push(Region { start: s + 1, end: i });
                open = None;
            }
            (Some(_), None) => return Err(RegionError::Unopened(i + 1)),
            (None, _) => {}
        }
    }
    if let Some(s) = open {
        return Err(RegionError::Unclosed(s + 1));
    }
    if out.is_empty() {
        return Err(RegionError::None);
    }
    Ok(out)
}

/// Byte offset at which each line starts, plus the text length at the end.
pub(crate) fn line_starts(text: &str) -> Vec<usize> {
    let mut starts = vec![0];
    starts.extend(text.match_indices('\n').map(|(i, _)| i + 1));
    if starts.last() != Some(&text.len()) {
        starts.push(text.len());
    }
    starts
}

/// Byte ranges of each region's content (from the first content line up to
/// the start of the end marker line).
pub fn region_spans(text: &str, regions: &[Region]) -> Vec<std::ops::Range<usize>> {
    let starts = line_starts(text);
    regions
        .iter()
        .map(|r| starts[r.start.min(starts.len() - 1)]..starts[r.end.min(starts.len() - 1)])
        .collect()
}

pub fn region_texts<'a>(text: &'a str, regions: &[Region]) -> Vec<&'a str> {
    region_spans(text, regions).into_iter().map(|s| &text[s]).collect()
}

/// Non-blank lines inside evolve regions.
pub fn count_loc(text: &str, regions: &[Region]) -> usize {
    region_texts(text, regions)
        .iter()
        .flat_map(|t| t.lines())
        .filter(|l| !l.trim().is_empty())
        .count()
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: CandidateId,
    pub parent_id: Option<CandidateId>,
    pub island: usize,
    pub text: String,
    pub evolve_regions: Vec<Region>,
    pub score: Option<f64>,
    pub valid: bool,
    pub metrics: BTreeMap<String, f64>,
    pub per_instance: Vec<InstanceScore>,
    pub feedback: String,
    pub loc: usize,
    pub generation: u64,
}

impl Candidate {
    pub fn new(
        id: CandidateId,
        parent_id: Option<CandidateId>,
        island: usize,
        text: String,
        prefix: &str,
        generation: u64,
    ) -> Result<Self, RegionError> {
        debug_assert!(parent_id.is_none_or(|p| p < id));
        let evolve_regions = find_regions(&text, prefix)?;
        let loc = count_loc(&text, &evolve_regions);
        Ok(Self {
            id,
            parent_id,
            island,
            text,
            evolve_regions,
            score: None,
            valid: false,
            metrics: BTreeMap::new(),
            per_instance: Vec::new(),
            feedback: String::new(),
            loc,
            generation,
        })
    }

    /// Evolve-region text, regions joined by newlines.
    pub fn region_text(&self) -> String {
        region_texts(&self.text, &self.evolve_regions).concat()
    }
}
