//! Edit scripts: generator reply parsing, rendering and application.
//!
//! Diff hunks use the SEARCH/REPLACE block format:
//!
//! ```text
//! <<<<<<< SEARCH
//! x = 1
//! =======
//! x = 2
//! >>>>>>> REPLACE
//! ```
//!
//! A full rewrite is a single fenced block holding the new region content.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candidate::{find_regions, region_spans, CandidateId, Region, RegionError};

pub const SEARCH_LINE: &str = "<<<<<<< SEARCH";
pub const DIVIDER_LINE: &str = "=======";
pub const REPLACE_LINE: &str = ">>>>>>> REPLACE";
const CROSSOVER_WORD: &str = "CROSSOVER";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PatchError {
    #[error("hunk {hunk}: search text not found")]
    PatchMiss { hunk: usize },
    #[error("hunk {hunk}: search text occurs {count} times")]
    PatchAmbiguous { hunk: usize, count: usize },
    #[error("hunk {hunk}: edit touches text outside the editable regions")]
    PatchOutOfBounds { hunk: usize },
    #[error("unsupported edit: {0}")]
    Unsupported(String),
    #[error("region text of {len} characters exceeds the limit of {max}")]
    CodeTooLong { len: usize, max: usize },
    #[error(transparent)]
    Regions(#[from] RegionError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("line {0}: SEARCH block is missing its divider or REPLACE line")]
    Unterminated(usize),
    #[error("reply holds {0} fenced blocks; a full rewrite needs exactly one")]
    FenceCount(usize),
    #[error("reply holds no SEARCH/REPLACE block and no fenced block")]
    Empty,
    #[error("malformed crossover line `{0}`")]
    Crossover(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hunk {
    pub search: String,
    pub replace: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchKind {
    Diff,
    Full,
    Crossover,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditScript {
    Diff(Vec<Hunk>),
    /// New region content; ends with a newline unless empty.
    Full(String),
    Crossover { donor_id: CandidateId },
}

impl EditScript {
    pub fn full(replacement: &str) -> Self {
        Self::Full(with_newline(replacement))
    }

    pub fn kind(&self) -> PatchKind {
        match self {
            Self::Diff(_) => PatchKind::Diff,
            Self::Full(_) => PatchKind::Full,
            Self::Crossover { .. } => PatchKind::Crossover,
        }
    }

    pub fn render(&self) -> String {
        match self {
            Self::Diff(hunks) => hunks
                .iter()
                .map(|h| {
                    format!(
                        "{SEARCH_LINE}\n{}\n{DIVIDER_LINE}\n{}\n{REPLACE_LINE}\n",
                        h.search, h.replace
                    )
                })
                .collect(),
            Self::Full(text) => format!("```\n{text}```\n"),
            Self::Crossover { donor_id } => format!("{CROSSOVER_WORD} {donor_id}\n"),
        }
    }

    /// Parses a generator reply. SEARCH/REPLACE blocks take precedence, then
    /// a crossover line, then a single fenced block.
    pub fn parse(reply: &str) -> Result<Self, ParseError> {
        let lines: Vec<&str> = reply.lines().collect();
        let mut hunks = Vec::new();
        let mut i = 0;
        while i < lines.len() {
            if lines[i].trim_end() != SEARCH_LINE {
                i += 1;
                continue;
            }
            let open = i;
            let divider = (open + 1..lines.len())
                .find(|&j| lines[j].trim_end() == DIVIDER_LINE)
                .ok_or(ParseError::Unterminated(open + 1))?;
            let close = (divider + 1..lines.len())
                .find(|&j| lines[j].trim_end() == REPLACE_LINE)
                .ok_or(ParseError::Unterminated(open + 1))?;
            hunks.push(Hunk {
                search: lines[open + 1..divider].join("\n"),
                replace: lines[divider + 1..close].join("\n"),
            });
            i = close + 1;
        }
        if !hunks.is_empty() {
            return Ok(Self::Diff(hunks));
        }
        if let Some(line) = lines.iter().find(|l| l.trim_start().starts_with(CROSSOVER_WORD)) {
            let id = line.trim()[CROSSOVER_WORD.len()..]
                .trim()
                .parse()
                .map_err(|_| ParseError::Crossover(line.trim().into()))?;
            return Ok(Self::Crossover { donor_id: id });
        }
        let fences: Vec<usize> = (0..lines.len())
            .filter(|&j| lines[j].trim_start().starts_with("```"))
            .collect();
        match fences.len() {
            0 => Err(ParseError::Empty),
            2 => {
                let body = &lines[fences[0] + 1..fences[1]];
                let mut text = body.join("\n");
                if !body.is_empty() {
                    text.push('\n');
                }
                Ok(Self::Full(text))
            }
            n => Err(ParseError::FenceCount(n / 2 + n % 2)),
        }
    }
}

fn with_newline(s: &str) -> String {
    if s.is_empty() || s.ends_with('\n') {
        s.to_string()
    } else {
        format!("{s}\n")
    }
}

/// All start offsets of `needle` in `hay`, overlapping ones included.
fn occurrences(hay: &str, needle: &str) -> Vec<usize> {
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(pos) = hay[from..].find(needle) {
        out.push(from + pos);
        // Step one character so overlapping matches are seen.
        from += pos + hay[from + pos..].chars().next().map_or(1, char::len_utf8);
        if from > hay.len() {
            break;
        }
    }
    out
}

struct Layout {
    spans: Vec<Range<usize>>,
}

impl Layout {
    fn of(text: &str, prefix: &str) -> Result<(Vec<Region>, Self), PatchError> {
        let regions = find_regions(text, prefix)?;
        let spans = region_spans(text, &regions);
        Ok((regions, Self { spans }))
    }

    /// Text outside every region, as the pieces between regions.
    fn outside<'a>(&self, text: &'a str) -> Vec<&'a str> {
        let mut out = Vec::with_capacity(self.spans.len() + 1);
        let mut at = 0;
        for s in &self.spans {
            out.push(&text[at..s.start]);
            at = s.end;
        }
        out.push(&text[at..]);
        out
    }
}

/// Checks that `new` keeps the marker structure of `old`, its outside text
/// byte for byte and every locked region's content.
fn check_structure(old: &str, new: &str, prefix: &str, locked: &[usize], hunk: usize) -> Result<(), PatchError> {
    let oob = PatchError::PatchOutOfBounds { hunk };
    let (_, before) = Layout::of(old, prefix)?;
    let Ok((_, after)) = Layout::of(new, prefix) else {
        return Err(oob);
    };
    if before.spans.len() != after.spans.len() || before.outside(old) != after.outside(new) {
        return Err(oob);
    }
    for &r in locked {
        if let (Some(a), Some(b)) = (before.spans.get(r), after.spans.get(r)) {
            if old[a.clone()] != new[b.clone()] {
                return Err(oob);
            }
        }
    }
    Ok(())
}

fn check_length(text: &str, prefix: &str, max: usize) -> Result<(), PatchError> {
    let (_, layout) = Layout::of(text, prefix)?;
    let len: usize = layout.spans.iter().map(|s| text[s.clone()].chars().count()).sum();
    if len > max {
        return Err(PatchError::CodeTooLong { len, max });
    }
    Ok(())
}

/// Applies hunks in order. Each search text must occur exactly once in the
/// whole program, inside an unlocked evolve region.
pub fn apply_diff(text: &str, prefix: &str, locked: &[usize], hunks: &[Hunk], max_len: usize) -> Result<String, PatchError> {
    let mut cur = text.to_string();
    for (h, hunk) in hunks.iter().enumerate() {
        if hunk.search.is_empty() {
            return Err(PatchError::PatchMiss { hunk: h });
        }
        let (_, layout) = Layout::of(&cur, prefix)?;
        let found = occurrences(&cur, &hunk.search);
        if found.is_empty() {
            return Err(PatchError::PatchMiss { hunk: h });
        }
        let editable = |at: usize| {
            let end = at + hunk.search.len();
            layout
                .spans
                .iter()
                .enumerate()
                .any(|(r, s)| !locked.contains(&r) && s.start <= at && end <= s.end)
        };
        if !found.iter().all(|&at| editable(at)) {
            return Err(PatchError::PatchOutOfBounds { hunk: h });
        }
        if found.len() > 1 {
            return Err(PatchError::PatchAmbiguous {
                hunk: h,
                count: found.len(),
            });
        }
        let at = found[0];
        let next = format!("{}{}{}", &cur[..at], hunk.replace, &cur[at + hunk.search.len()..]);
        check_structure(&cur, &next, prefix, locked, h)?;
        cur = next;
    }
    check_length(&cur, prefix, max_len)?;
    Ok(cur)
}

fn splice(text: &str, span: Range<usize>, content: &str) -> String {
    format!("{}{}{}", &text[..span.start], content, &text[span.end..])
}

/// Replaces the content of the program's only evolve region.
pub fn apply_full_rewrite(text: &str, prefix: &str, locked: &[usize], replacement: &str, max_len: usize) -> Result<String, PatchError> {
    let (regions, layout) = Layout::of(text, prefix)?;
    if regions.len() != 1 {
        return Err(PatchError::Unsupported(format!(
            "full rewrite of a program with {} evolve regions",
            regions.len()
        )));
    }
    if locked.contains(&0) {
        return Err(PatchError::PatchOutOfBounds { hunk: 0 });
    }
    let len = replacement.chars().count();
    if len > max_len {
        return Err(PatchError::CodeTooLong { len, max: max_len });
    }
    let out = splice(text, layout.spans[0].clone(), &with_newline(replacement));
    check_structure(text, &out, prefix, locked, 0)?;
    Ok(out)
}

/// Grafts one randomly chosen unlocked region of `donor` into `parent`.
pub fn crossover(parent: &str, donor: &str, prefix: &str, locked: &[usize], rng: &mut impl Rng) -> Result<String, PatchError> {
    let (pr, pl) = Layout::of(parent, prefix)?;
    let (dr, dl) = Layout::of(donor, prefix)?;
    if pr.len() != dr.len() || pl.outside(parent).len() != dl.outside(donor).len() {
        return Err(PatchError::Unsupported(format!(
            "marker mismatch: {} regions against {}",
            pr.len(),
            dr.len()
        )));
    }
    let open: Vec<usize> = (0..pr.len()).filter(|r| !locked.contains(r)).collect();
    if open.is_empty() {
        return Err(PatchError::PatchOutOfBounds { hunk: 0 });
    }
    let r = open[rng.random_range(0..open.len())];
    let out = splice(parent, pl.spans[r].clone(), &donor[dl.spans[r].clone()]);
    check_structure(parent, &out, prefix, locked, 0)?;
    Ok(out)
}

pub fn choose_patch_type(probs: [f64; 3], rng: &mut impl Rng) -> PatchKind {
    let x: f64 = rng.random();
    if x < probs[0] {
        PatchKind::Diff
    } else if x < probs[0] + probs[1] {
        PatchKind::Full
    } else {
        PatchKind::Crossover
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    const PROG: &str = "import os\nx = 1\n# EVOLVE-BLOCK-START\nx = 1\ny = 2\n# EVOLVE-BLOCK-END\nprint(y)\n";

    fn hunk(s: &str, r: &str) -> Hunk {
        Hunk {
            search: s.into(),
            replace: r.into(),
        }
    }

    #[test]
    fn diff_inside_region() {
        let out = apply_diff(PROG, "#", &[], &[hunk("y = 2", "y = 3")], 1000).unwrap();
        let changed: Vec<_> = PROG.lines().zip(out.lines()).filter(|(a, b)| a != b).collect();
        assert_eq!(changed, vec![("y = 2", "y = 3")]);
        assert_eq!(apply_diff(PROG, "#", &[], &[], 1000).unwrap(), PROG);
    }

    #[test]
    fn diff_guards() {
        assert_eq!(
            apply_diff(PROG, "#", &[], &[hunk("import os", "import sys")], 1000),
            Err(PatchError::PatchOutOfBounds { hunk: 0 })
        );
        // Also present outside the region: still out of bounds.
        assert_eq!(
            apply_diff(PROG, "#", &[], &[hunk("x = 1", "x = 5")], 1000),
            Err(PatchError::PatchOutOfBounds { hunk: 0 })
        );
        assert_eq!(
            apply_diff(PROG, "#", &[], &[hunk("z = 0", "")], 1000),
            Err(PatchError::PatchMiss { hunk: 0 })
        );
        let twice = "# EVOLVE-BLOCK-START\nv\nv\n# EVOLVE-BLOCK-END\n";
        assert_eq!(
            apply_diff(twice, "#", &[], &[hunk("v", "w")], 1000),
            Err(PatchError::PatchAmbiguous { hunk: 0, count: 2 })
        );
        // Spanning the end marker.
        assert_eq!(
            apply_diff(PROG, "#", &[], &[hunk("y = 2\n# EVOLVE", "y = 2\n# EVOLVE")], 1000),
            Err(PatchError::PatchOutOfBounds { hunk: 0 })
        );
        // Smuggling a marker in through the replacement.
        assert_eq!(
            apply_diff(PROG, "#", &[], &[hunk("y = 2", "y = 2\n# EVOLVE-BLOCK-END\nz = 1\n# EVOLVE-BLOCK-START")], 1000),
            Err(PatchError::PatchOutOfBounds { hunk: 0 })
        );
        assert_eq!(
            apply_diff(PROG, "#", &[0], &[hunk("y = 2", "y = 3")], 1000),
            Err(PatchError::PatchOutOfBounds { hunk: 0 })
        );
        assert!(matches!(
            apply_diff(PROG, "#", &[], &[hunk("y = 2", &"y".repeat(50))], 20),
            Err(PatchError::CodeTooLong { .. })
        ));
    }

    #[test]
    fn hunks_apply_in_order() {
        let out = apply_diff(PROG, "#", &[], &[hunk("y = 2", "y = 3"), hunk("y = 3", "y = 4")], 1000).unwrap();
        assert!(out.contains("y = 4\n"));
    }

    #[test]
    fn full_rewrite() {
        assert_eq!(apply_full_rewrite(PROG, "#", &[], "x = 1\ny = 2\n", 100).unwrap(), PROG);
        let thirty: String = (0..30).map(|i| format!("v{i} = {i}\n")).collect();
        let long = format!("pre\n# EVOLVE-BLOCK-START\n{thirty}# EVOLVE-BLOCK-END\npost\n");
        let out = apply_full_rewrite(&long, "#", &[], "pass", 60_000).unwrap();
        assert_eq!(out, "pre\n# EVOLVE-BLOCK-START\npass\n# EVOLVE-BLOCK-END\npost\n");
        assert_eq!(
            apply_full_rewrite(PROG, "#", &[], &"a".repeat(60_001), 60_000),
            Err(PatchError::CodeTooLong { len: 60_001, max: 60_000 })
        );
        let two = "# EVOLVE-BLOCK-START\na\n# EVOLVE-BLOCK-END\n# EVOLVE-BLOCK-START\nb\n# EVOLVE-BLOCK-END\n";
        assert!(matches!(apply_full_rewrite(two, "#", &[], "c", 100), Err(PatchError::Unsupported(_))));
    }

    #[test]
    fn crossover_grafts_a_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(crossover(PROG, PROG, "#", &[], &mut rng).unwrap(), PROG);
        let donor = PROG.replace("y = 2", "y = 9");
        let out = crossover(PROG, &donor, "#", &[], &mut rng).unwrap();
        assert_eq!(out, donor);
        let other = "# EVOLVE-BLOCK-START\na\n# EVOLVE-BLOCK-END\n# EVOLVE-BLOCK-START\nb\n# EVOLVE-BLOCK-END\n";
        assert!(matches!(crossover(PROG, other, "#", &[], &mut rng), Err(PatchError::Unsupported(_))));
    }

    #[test]
    fn reply_parsing() {
        let reply = "Here is my change:\n```\n<<<<<<< SEARCH\ny = 2\n=======\ny = 3\n>>>>>>> REPLACE\n```\n";
        assert_eq!(EditScript::parse(reply).unwrap(), EditScript::Diff(vec![hunk("y = 2", "y = 3")]));
        assert_eq!(
            EditScript::parse("```python\nx = 0\n```\n").unwrap(),
            EditScript::Full("x = 0\n".into())
        );
        assert_eq!(EditScript::parse("CROSSOVER 12").unwrap(), EditScript::Crossover { donor_id: 12 });
        assert_eq!(EditScript::parse("no code here"), Err(ParseError::Empty));
        assert_eq!(EditScript::parse("<<<<<<< SEARCH\na\n"), Err(ParseError::Unterminated(1)));
        assert_eq!(EditScript::parse("```\na\n```\n```\nb\n```\n"), Err(ParseError::FenceCount(2)));
    }

    #[test]
    fn render_round_trip() {
        for script in [
            EditScript::Diff(vec![hunk("a\nb", ""), hunk("c", "d\n")]),
            EditScript::full("x = 1"),
            EditScript::full(""),
            EditScript::Crossover { donor_id: 3 },
        ] {
            assert_eq!(EditScript::parse(&script.render()).unwrap(), script);
        }
    }

    #[test]
    fn patch_type_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert!((0..100).all(|_| choose_patch_type([1.0, 0.0, 0.0], &mut rng) == PatchKind::Diff));
        assert!((0..100).all(|_| choose_patch_type([0.0, 0.0, 1.0], &mut rng) == PatchKind::Crossover));
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            counts[choose_patch_type([0.6, 0.3, 0.1], &mut rng) as usize] += 1;
        }
        for (c, p) in counts.iter().zip([0.6, 0.3, 0.1]) {
            assert!((*c as f64 / 10_000.0 - p).abs() < 0.015, "{counts:?}");
        }
    }
}
