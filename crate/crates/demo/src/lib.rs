//! WebAssembly entry points for the static demo page in `www/`.
//!
//! Every function takes and returns strings; results are JSON objects with
//! either the payload fields or an `error` field.

use adrs_bench::llmsql::{ggr, phr, CellTable};
use adrs_core::patch::{apply_diff, apply_full_rewrite, EditScript};
use serde_json::json;
use wasm_bindgen::prelude::*;

const MAX_REGION_LEN: usize = 20_000;

/// Reorders a CSV table with the greedy group recursion and reports the
/// prefix hit rate before and after.
#[wasm_bindgen]
pub fn reorder_table(csv: &str) -> String {
    let table = match CellTable::parse_csv(csv) {
        Ok(t) => t,
        Err(e) => return json!({ "error": e.to_string() }).to_string(),
    };
    let out = ggr(&table);
    match (phr(&table), phr(&out)) {
        (Ok(before), Ok(after)) => json!({
            "phr_before": before,
            "phr_after": after,
            "csv": out.to_csv(),
        })
        .to_string(),
        (Err(e), _) | (_, Err(e)) => json!({ "error": e.to_string() }).to_string(),
    }
}

/// Applies a generator reply (SEARCH/REPLACE blocks or one fenced block) to
/// a program with `#` EVOLVE-BLOCK markers.
#[wasm_bindgen]
pub fn apply_edit(program: &str, reply: &str) -> String {
    let script = match EditScript::parse(reply) {
        Ok(s) => s,
        Err(e) => return json!({ "error": e.to_string() }).to_string(),
    };
    let result = match &script {
        EditScript::Diff(hunks) => apply_diff(program, "#", &[], hunks, MAX_REGION_LEN),
        EditScript::Full(text) => apply_full_rewrite(program, "#", &[], text, MAX_REGION_LEN),
        EditScript::Crossover { .. } => return json!({ "error": "crossover needs a population" }).to_string(),
    };
    match result {
        Ok(text) => json!({ "text": text }).to_string(),
        Err(e) => json!({ "error": e.to_string() }).to_string(),
    }
}

/// Scores a spot-scheduling policy document on a named trace set
/// (`full`, `multi` or `available`) and returns the evaluator report.
#[wasm_bindgen]
pub fn simulate_policy(policy: &str, split: &str) -> String {
    adrs_bench::cbl::eval::evaluate(policy, split, 0).to_line()
}
