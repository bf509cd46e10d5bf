//! Row and field reordering for prefix-cache reuse.
//!
//! A row is serialized as its cells in that row's field order, one token per
//! cell. The prefix hit rate (PHR) of a table is the number of leading cells
//! each row shares with the row before it, summed over rows 2..n and divided
//! by the cells in those rows.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use thiserror::Error;

use crate::doc::{Doc, DocError};
use crate::protocol::{fmt3, InstanceScore, Report};
use crate::seeded_rng;

pub const INVALID_FLOOR: f64 = -1.0;
pub const DEFAULT_BASE: usize = 5000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TableError {
    #[error("row {row} has {got} cells, expected {want}")]
    Ragged { row: usize, got: usize, want: usize },
    #[error("row {row} does not use every field exactly once")]
    FieldOrder { row: usize },
    #[error("table file: {0}")]
    Parse(String),
}

/// A cell: field index plus interned value id.
pub type Cell = (u16, u32);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellTable {
    pub fields: Vec<String>,
    /// Interned cell values, indexed by value id.
    pub values: Vec<String>,
    /// Each row's cells in that row's field order.
    pub rows: Vec<Vec<Cell>>,
}

impl CellTable {
    /// Builds a table from rows of values in schema order.
    pub fn from_rows(fields: Vec<String>, rows: Vec<Vec<String>>) -> Result<Self, TableError> {
        let mut ids: BTreeMap<String, u32> = BTreeMap::new();
        let mut values = Vec::new();
        let mut out = Vec::with_capacity(rows.len());
        for (r, row) in rows.into_iter().enumerate() {
            if row.len() != fields.len() {
                return Err(TableError::Ragged {
                    row: r,
                    got: row.len(),
                    want: fields.len(),
                });
            }
            out.push(
                row.into_iter()
                    .enumerate()
                    .map(|(f, v)| {
                        let id = *ids.entry(v.clone()).or_insert_with(|| {
                            values.push(v);
                            values.len() as u32 - 1
                        });
                        (f as u16, id)
                    })
                    .collect(),
            );
        }
        Ok(Self {
            fields,
            values,
            rows: out,
        })
    }

    /// Header line of field names, then comma-separated rows.
    pub fn parse_csv(text: &str) -> Result<Self, TableError> {
        let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let fields: Vec<String> = reader
            .headers()
            .map_err(|e| TableError::Parse(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = reader
            .records()
            .map(|r| {
                r.map(|rec| rec.iter().map(str::to_string).collect())
                    .map_err(|e| TableError::Parse(e.to_string()))
            })
            .collect::<Result<Vec<Vec<String>>, _>>()?;
        Self::from_rows(fields, rows)
    }

    /// Writes the table in schema field order.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.fields).expect("in-memory write");
        for row in &self.rows {
            let mut cells = vec![""; self.fields.len()];
            for &(f, v) in row {
                cells[f as usize] = &self.values[v as usize];
            }
            w.write_record(&cells).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8 input")
    }

    pub fn validate(&self) -> Result<(), TableError> {
        let m = self.fields.len();
        for (r, row) in self.rows.iter().enumerate() {
            if row.len() != m {
                return Err(TableError::Ragged {
                    row: r,
                    got: row.len(),
                    want: m,
                });
            }
            let mut seen = vec![false; m];
            for &(f, _) in row {
                match seen.get_mut(f as usize) {
                    Some(s) if !*s => *s = true,
                    _ => return Err(TableError::FieldOrder { row: r }),
                }
            }
        }
        Ok(())
    }

    fn with_rows(&self, rows: Vec<Vec<Cell>>) -> Self {
        Self {
            fields: self.fields.clone(),
            values: self.values.clone(),
            rows,
        }
    }

    fn value_weight(&self, v: u32) -> u64 {
        let len = self.values[v as usize].chars().count() as u64;
        len * len
    }
}

fn lcp(a: &[Cell], b: &[Cell]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x.1 == y.1).count()
}

pub fn phr(table: &CellTable) -> Result<f64, TableError> {
    table.validate()?;
    let mut shared = 0usize;
    let mut total = 0usize;
    for pair in table.rows.windows(2) {
        shared += lcp(&pair[0], &pair[1]);
        total += pair[1].len();
    }
    Ok(if total == 0 {
        0.0
    } else {
        shared as f64 / total as f64
    })
}

/// True iff `output` holds the same rows as `input` (as sets of field/value
/// cells, with multiplicity), each using every field exactly once.
pub fn is_reordering(input: &CellTable, output: &CellTable) -> bool {
    if output.validate().is_err() || input.rows.len() != output.rows.len() {
        return false;
    }
    fn canon(t: &CellTable) -> Vec<Vec<(u16, &str)>> {
        let mut rows: Vec<Vec<(u16, &str)>> = t
            .rows
            .iter()
            .map(|r| {
                let mut cells: Vec<(u16, &str)> =
                    r.iter().map(|&(f, v)| (f, t.values[v as usize].as_str())).collect();
                cells.sort_unstable();
                cells
            })
            .collect();
        rows.sort_unstable();
        rows
    }
    canon(input) == canon(output)
}

/// Greedy value choice: maximize `len(v)^2 * (count(v) - 1)` over values with
/// a count above one; ties go to the lexicographically smallest value.
fn pick_value(table: &CellTable, counts: &[u32], present: impl Iterator<Item = u32>) -> Option<u32> {
    let mut best: Option<(u64, u32)> = None;
    for v in present {
        let c = counts[v as usize];
        if c <= 1 {
            continue;
        }
        let score = table.value_weight(v) * u64::from(c - 1);
        let better = match best {
            None => true,
            Some((s, b)) => {
                score > s || (score == s && table.values[v as usize] < table.values[b as usize])
            }
        };
        if better {
            best = Some((score, v));
        }
    }
    best.map(|(_, v)| v)
}

/// Moves every cell holding `v` to the front of the row, keeping the order
/// of the rest.
fn pull_forward(row: &[Cell], v: u32) -> Vec<Cell> {
    let mut out: Vec<Cell> = row.iter().copied().filter(|c| c.1 == v).collect();
    out.extend(row.iter().copied().filter(|c| c.1 != v));
    out
}

fn count_values(table: &CellTable, rows: &[Vec<Cell>]) -> Vec<u32> {
    let mut counts = vec![0u32; table.values.len()];
    for row in rows {
        for &(_, v) in row {
            counts[v as usize] += 1;
        }
    }
    counts
}

fn present_values(rows: &[Vec<Cell>], n_values: usize) -> Vec<u32> {
    let mut seen = vec![false; n_values];
    for row in rows {
        for &(_, v) in row {
            seen[v as usize] = true;
        }
    }
    (0..n_values as u32).filter(|&v| seen[v as usize]).collect()
}

/// Greedy recursive grouping. Value counts are recomputed for every
/// subtable; rows holding the chosen value are grouped first, their
/// remaining cells reordered recursively, then the rest of the table.
pub fn ggr(table: &CellTable) -> CellTable {
    let mut rows = table.rows.clone();
    let mut start = vec![0usize; rows.len()];
    let order = ggr_rec(table, &mut rows, &mut start, (0..table.rows.len()).collect());
    let mut slots: Vec<Option<Vec<Cell>>> = rows.into_iter().map(Some).collect();
    table.with_rows(order.into_iter().map(|i| slots[i].take().expect("each row once")).collect())
}

/// Orders `ids`, looking only at cells past each row's fixed prefix
/// `start[i]`. Cells are reordered in place.
fn ggr_rec(table: &CellTable, rows: &mut [Vec<Cell>], start: &mut [usize], mut ids: Vec<usize>) -> Vec<usize> {
    let mut out = Vec::with_capacity(ids.len());
    while !ids.is_empty() {
        let mut counts = vec![0u32; table.values.len()];
        for &i in &ids {
            for &(_, v) in &rows[i][start[i]..] {
                counts[v as usize] += 1;
            }
        }
        let present = (0..counts.len() as u32).filter(|&v| counts[v as usize] > 0);
        let Some(v) = pick_value(table, &counts, present) else {
            // No value repeats: keep the remaining rows as they are.
            out.extend(ids);
            break;
        };
        let (group, rest): (Vec<usize>, Vec<usize>) =
            ids.into_iter().partition(|&i| rows[i][start[i]..].iter().any(|c| c.1 == v));
        for &i in &group {
            let pulled = pull_forward(&rows[i][start[i]..], v);
            let k = pulled.iter().take_while(|c| c.1 == v).count();
            rows[i].truncate(start[i]);
            rows[i].extend(pulled);
            start[i] += k;
        }
        out.extend(ggr_rec(table, rows, start, group));
        ids = rest;
    }
    out
}

/// Prefix-aware reordering: value statistics are computed once for the whole
/// table, each chosen value's rows are grouped with that value pulled to the
/// front, and only the remainder is searched further. Tables above `base`
/// rows are split in half first.
pub fn prefix_aware(table: &CellTable, base: usize) -> CellTable {
    let counts = count_values(table, &table.rows);
    let rows = prefix_rows(table, &counts, table.rows.clone(), base.max(1));
    table.with_rows(rows)
}

fn prefix_rows(table: &CellTable, counts: &[u32], rows: Vec<Vec<Cell>>, base: usize) -> Vec<Vec<Cell>> {
    if rows.len() > base {
        let mut top = rows;
        let bottom = top.split_off(top.len() / 2);
        let mut out = prefix_rows(table, counts, top, base);
        out.extend(prefix_rows(table, counts, bottom, base));
        return out;
    }
    let mut out = Vec::with_capacity(rows.len());
    let mut rows = rows;
    while !rows.is_empty() {
        let Some(v) = pick_value(table, counts, present_values(&rows, table.values.len()).into_iter()) else {
            out.extend(rows);
            break;
        };
        let (group, rest): (Vec<_>, Vec<_>) = rows.into_iter().partition(|r| r.iter().any(|c| c.1 == v));
        out.extend(group.iter().map(|r| pull_forward(r, v)));
        rows = rest;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reorder {
    Original,
    Ggr,
    PrefixAware { base: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SqlCandidate {
    pub policy: Reorder,
    /// Drops repeated rows before reordering; the evaluator rejects this.
    pub drop_duplicates: bool,
}

impl SqlCandidate {
    pub fn parse(text: &str) -> Result<Self, DocError> {
        let doc = Doc::parse(text)?;
        doc.reject_unknown(&["policy", "base_threshold", "drop_duplicates"])?;
        let policy = match doc.require_str("policy")? {
            "original" => Reorder::Original,
            "ggr" => Reorder::Ggr,
            "prefix-aware" => Reorder::PrefixAware {
                base: doc.get_or("base_threshold", DEFAULT_BASE)?,
            },
            other => {
                return Err(DocError::BadValue {
                    key: "policy".into(),
                    value: other.into(),
                })
            }
        };
        Ok(Self {
            policy,
            drop_duplicates: doc.get_or("drop_duplicates", false)?,
        })
    }

    pub fn apply(&self, table: &CellTable) -> CellTable {
        let mut input = table.clone();
        if self.drop_duplicates {
            let mut seen = std::collections::HashSet::new();
            input.rows.retain(|r| seen.insert(r.clone()));
        }
        match self.policy {
            Reorder::Original => input,
            Reorder::Ggr => ggr(&input),
            Reorder::PrefixAware { base } => prefix_aware(&input, base),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableShape {
    pub rows: usize,
    /// Zipf exponent for value popularity.
    pub skew: f64,
}

const SUITE_SEED: u64 = 0x5e1;
pub const SIZES: [usize; 3] = [100, 400, 1600];
pub const SKEWS: [f64; 3] = [0.6, 1.0, 1.4];

fn zipf_pick(rng: &mut impl Rng, n: usize, s: f64) -> usize {
    let weights: f64 = (1..=n).map(|k| (k as f64).powf(-s)).sum();
    let mut x = rng.random::<f64>() * weights;
    for k in 1..=n {
        x -= (k as f64).powf(-s);
        if x <= 0.0 {
            return k - 1;
        }
    }
    n - 1
}

/// A recommendation-style table: a genre, a unique title, a studio with a
/// dependent country, a free-text description drawn from a small pool and a
/// rating.
pub fn synthetic(shape: TableShape, rng: &mut impl Rng) -> CellTable {
    let fields = ["genre", "title", "studio", "studio_country", "description", "rating"]
        .map(str::to_string)
        .to_vec();
    let genres = 12;
    let studios = 30;
    let blurbs = (shape.rows / 8).max(4);
    let rows = (0..shape.rows)
        .map(|i| {
            let g = zipf_pick(rng, genres, shape.skew);
            let s = zipf_pick(rng, studios, shape.skew);
            let b = zipf_pick(rng, blurbs, shape.skew);
            vec![
                format!("genre-{g:02}"),
                format!("title #{i:05} {}", rng.random_range(1000..9999)),
                format!("studio {s:02} pictures"),
                format!("country-{}", s % 7),
                format!("a story about subject {b:03} told across many long evenings"),
                format!("{}", rng.random_range(1..=5)),
            ]
        })
        .collect();
    CellTable::from_rows(fields, rows).expect("rectangular by construction")
}

/// Nine shipped tables: three sizes by three skews.
pub fn suite() -> Vec<(String, CellTable)> {
    let mut rng = seeded_rng(SUITE_SEED, 0);
    let mut out = Vec::new();
    for &rows in &SIZES {
        for &skew in &SKEWS {
            out.push((
                format!("t{rows}-s{skew:.1}"),
                synthetic(TableShape { rows, skew }, &mut rng),
            ));
        }
    }
    out
}

fn tables_for(split: &str, seed: u64) -> Option<Vec<(String, CellTable)>> {
    let all = suite();
    match split {
        "full" | "validation" => Some(all),
        "minibatch" => {
            let mut rng = seeded_rng(seed, 0x5e1);
            let mut idx = rand::seq::index::sample(&mut rng, all.len(), 3).into_vec();
            idx.sort_unstable();
            Some(idx.into_iter().map(|i| all[i].clone()).collect())
        }
        _ => None,
    }
}

pub fn combined_score(mean_phr: f64, runtime_secs: f64) -> f64 {
    0.95 * mean_phr + 0.05 / (1.0 + runtime_secs)
}

pub fn evaluate(text: &str, split: &str, seed: u64) -> Report {
    let candidate = match SqlCandidate::parse(text) {
        Ok(c) => c,
        Err(e) => return Report::invalid(INVALID_FLOOR, format!("candidate document: {e}")),
    };
    let Some(tables) = tables_for(split, seed) else {
        return Report::invalid(INVALID_FLOOR, format!("unknown split `{split}`"));
    };
    let mut runtime = 0.0;
    let mut per_instance = Vec::with_capacity(tables.len());
    for (name, table) in &tables {
        let start = Instant::now();
        let out = candidate.apply(table);
        runtime += start.elapsed().as_secs_f64();
        if !is_reordering(table, &out) {
            return Report::invalid(
                INVALID_FLOOR,
                format!("{name}: output is not a reordering of the input rows and fields"),
            );
        }
        let p = phr(&out).expect("validated by is_reordering");
        per_instance.push(InstanceScore::new(name, p));
    }
    let mean_phr = per_instance.iter().map(|p| p.score).sum::<f64>() / per_instance.len() as f64;
    let worst = (0..per_instance.len())
        .min_by(|&a, &b| per_instance[a].score.total_cmp(&per_instance[b].score).then(a.cmp(&b)))
        .expect("nonempty suite");
    let mut metrics = BTreeMap::new();
    metrics.insert("phr".into(), mean_phr);
    metrics.insert("runtime".into(), runtime);
    Report {
        valid: true,
        combined_score: combined_score(mean_phr, runtime),
        metrics,
        feedback: value_summary(&tables[worst].0, &tables[worst].1, per_instance[worst].score),
        per_instance,
    }
}

fn value_summary(name: &str, table: &CellTable, score: f64) -> String {
    let counts = count_values(table, &table.rows);
    let mut order: Vec<usize> = (0..counts.len()).filter(|&v| counts[v] > 1).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(table.values[a].cmp(&table.values[b])));
    let top: Vec<String> = order
        .iter()
        .take(5)
        .map(|&v| format!("{:?} x{}", table.values[v], counts[v]))
        .collect();
    format!(
        "lowest PHR: {name} ({} rows) at {}; most repeated values: {}",
        table.rows.len(),
        fmt3(score),
        top.join(", ")
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[&[&str]]) -> CellTable {
        let m = rows.first().map_or(0, |r| r.len());
        CellTable::from_rows(
            (0..m).map(|i| format!("f{i}")).collect(),
            rows.iter()
                .map(|r| r.iter().map(|s| s.to_string()).collect())
                .collect(),
        )
        .unwrap()
    }

    fn values(t: &CellTable) -> Vec<Vec<&str>> {
        t.rows
            .iter()
            .map(|r| r.iter().map(|&(_, v)| t.values[v as usize].as_str()).collect())
            .collect()
    }

    #[test]
    fn phr_hand_examples() {
        assert_eq!(phr(&table(&[&["x", "a"], &["x", "b"]])).unwrap(), 0.5);
        assert_eq!(phr(&table(&[&["x", "a"], &["x", "a"], &["x", "a"]])).unwrap(), 1.0);
        assert_eq!(phr(&table(&[&["x", "a"], &["y", "a"], &["z", "a"]])).unwrap(), 0.0);
        assert_eq!(phr(&table(&[&["x", "a"]])).unwrap(), 0.0);
    }

    #[test]
    fn ggr_groups_the_repeated_value() {
        let t = table(&[&["x", "a"], &["y", "c"], &["x", "b"]]);
        assert_eq!(phr(&t).unwrap(), 0.0);
        let g = ggr(&t);
        assert_eq!(values(&g), vec![vec!["x", "a"], vec!["x", "b"], vec!["y", "c"]]);
        assert_eq!(phr(&g).unwrap(), 0.25);
        assert!(is_reordering(&t, &g));
    }

    #[test]
    fn ggr_pulls_the_value_to_the_front_and_recurses() {
        let t = table(&[&["p", "k", "zz"], &["q", "k", "zz"], &["r", "m", "n"]]);
        // "zz" scores 4 * 1 over "k" at 1 * 1.
        let g = ggr(&t);
        assert_eq!(
            values(&g),
            vec![vec!["zz", "k", "p"], vec!["zz", "k", "q"], vec!["r", "m", "n"]]
        );
        assert!((phr(&g).unwrap() - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn prefix_aware_matches_ggr_choices_on_a_small_table() {
        let t = table(&[&["x", "a"], &["y", "c"], &["x", "b"], &["y", "d"]]);
        let p = prefix_aware(&t, DEFAULT_BASE);
        assert_eq!(values(&p), values(&ggr(&t)));
        assert_eq!(values(&p), vec![vec!["x", "a"], vec!["x", "b"], vec!["y", "c"], vec!["y", "d"]]);
    }

    #[test]
    fn prefix_aware_splits_large_tables() {
        let t = table(&[&["x", "a"], &["y", "b"], &["x", "c"], &["y", "d"]]);
        // Halves [xa, yb] and [xc, yd]: nothing repeats within... but global
        // counts still see x and y twice, so each half is grouped on its own.
        let p = prefix_aware(&t, 2);
        assert!(is_reordering(&t, &p));
        assert_eq!(values(&p), vec![vec!["x", "a"], vec!["y", "b"], vec!["x", "c"], vec!["y", "d"]]);
    }

    #[test]
    fn conservation_check_catches_dropped_and_edited_rows() {
        let t = table(&[&["x", "a"], &["x", "a"], &["y", "b"]]);
        let c = SqlCandidate {
            policy: Reorder::Ggr,
            drop_duplicates: true,
        };
        assert!(!is_reordering(&t, &c.apply(&t)));
        let mut edited = t.clone();
        edited.rows[2][1] = edited.rows[0][1];
        assert!(!is_reordering(&t, &edited));
        let mut swapped = t.clone();
        swapped.rows[2].swap(0, 1);
        assert!(is_reordering(&t, &swapped));
    }

    #[test]
    fn csv_round_trip() {
        let t = table(&[&["x", "a,b"], &["y", "c"]]);
        let text = t.to_csv();
        assert_eq!(text, "f0,f1\nx,\"a,b\"\ny,c\n");
        assert_eq!(CellTable::parse_csv(&text).unwrap(), t);
        assert!(matches!(CellTable::parse_csv("a,b\n1\n"), Err(TableError::Parse(_))));
    }

    #[test]
    fn evaluator_score_formula() {
        let r = evaluate("# EVOLVE-BLOCK-START\npolicy = ggr\n# EVOLVE-BLOCK-END", "minibatch", 2);
        assert!(r.valid, "{}", r.feedback);
        assert_eq!(r.per_instance.len(), 3);
        let expected = combined_score(r.metrics["phr"], r.metrics["runtime"]);
        assert!((r.combined_score - expected).abs() < 1e-12);
        let r = evaluate("policy = original\ndrop_duplicates = true", "full", 0);
        assert!(r.valid, "suite rows are unique so nothing is dropped");
    }
}
