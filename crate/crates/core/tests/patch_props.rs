use adrs_core::candidate::{find_regions, region_spans};
use adrs_core::patch::{apply_diff, apply_full_rewrite, crossover, EditScript, Hunk, PatchError};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const START: &str = "# EVOLVE-BLOCK-START\n";
const END: &str = "# EVOLVE-BLOCK-END\n";

fn lines(max: usize) -> impl Strategy<Value = String> {
    prop::collection::vec("[ab= ]{0,5}", 0..max).prop_map(|ls| ls.iter().map(|l| format!("{l}\n")).collect())
}

/// Outside chunks interleaved with one to three regions.
fn program() -> impl Strategy<Value = String> {
    (lines(4), prop::collection::vec((lines(5), lines(4)), 1..4)).prop_map(|(head, parts)| {
        let mut s = head;
        for (inside, after) in parts {
            s.push_str(START);
            s.push_str(&inside);
            s.push_str(END);
            s.push_str(&after);
        }
        s
    })
}

fn outside(text: &str) -> Vec<String> {
    let regions = find_regions(text, "#").unwrap();
    let mut out = Vec::new();
    let mut at = 0;
    for s in region_spans(text, &regions) {
        out.push(text[at..s.start].to_string());
        at = s.end;
    }
    out.push(text[at..].to_string());
    out
}

fn inside(text: &str) -> Vec<String> {
    let regions = find_regions(text, "#").unwrap();
    region_spans(text, &regions).into_iter().map(|s| text[s].to_string()).collect()
}

/// A substring of `text` between two char boundaries.
fn slice(text: &str, a: usize, b: usize) -> &str {
    let n = text.len();
    let (mut a, mut b) = (a % (n + 1), b % (n + 1));
    if a > b {
        std::mem::swap(&mut a, &mut b);
    }
    &text[a..b]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn diffs_never_change_outside_text(
        text in program(),
        picks in prop::collection::vec((any::<usize>(), any::<usize>(), "[ab=\n ]{0,8}"), 1..3),
    ) {
        let hunks: Vec<Hunk> = picks
            .iter()
            .map(|(a, b, r)| Hunk { search: slice(&text, *a, *b).to_string(), replace: r.clone() })
            .collect();
        if let Ok(out) = apply_diff(&text, "#", &[], &hunks, 10_000) {
            prop_assert_eq!(outside(&out), outside(&text));
        }
    }

    #[test]
    fn searches_in_outside_text_are_out_of_bounds(
        text in program(),
        k in any::<usize>(),
        a in any::<usize>(),
        b in any::<usize>(),
        replace in "[ab]{0,4}",
    ) {
        // The chunk after a start marker always holds that marker line.
        let chunks = outside(&text);
        let chunk = &chunks[1 + k % (chunks.len() - 1)];
        let bytes: Vec<usize> = chunk.char_indices().map(|(i, _)| i).chain([chunk.len()]).collect();
        let from = a % (bytes.len() - 1);
        let to = from + 1 + b % (bytes.len() - 1 - from);
        let search = &chunk[bytes[from]..bytes[to]];
        let hunk = Hunk { search: search.to_string(), replace };
        prop_assert_eq!(
            apply_diff(&text, "#", &[], &[hunk], 10_000),
            Err(PatchError::PatchOutOfBounds { hunk: 0 })
        );
    }

    #[test]
    fn locked_regions_survive_every_edit(
        text in program(),
        a in any::<usize>(),
        b in any::<usize>(),
        replace in "[ab\n]{0,6}",
        seed in any::<u64>(),
    ) {
        let before = inside(&text);
        let locked = [0usize];
        let hunk = Hunk { search: slice(&text, a, b).to_string(), replace: replace.clone() };
        if let Ok(out) = apply_diff(&text, "#", &locked, &[hunk], 10_000) {
            prop_assert_eq!(&inside(&out)[0], &before[0]);
        }
        prop_assert!(apply_full_rewrite(&text, "#", &locked, &replace, 10_000).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if let Ok(out) = crossover(&text, &text.replace("a", "b"), "#", &locked, &mut rng) {
            prop_assert_eq!(&inside(&out)[0], &before[0]);
            prop_assert_eq!(outside(&out), outside(&text));
        }
    }

    #[test]
    fn full_rewrite_replaces_only_the_region(text in program(), body in "[ab=\n]{0,12}") {
        let r = apply_full_rewrite(&text, "#", &[], &body, 10_000);
        if inside(&text).len() == 1 {
            let out = r.unwrap();
            prop_assert_eq!(outside(&out), outside(&text));
            let want = if body.is_empty() || body.ends_with('\n') { body.clone() } else { format!("{body}\n") };
            prop_assert_eq!(&inside(&out)[0], &want);
        } else {
            prop_assert!(matches!(r, Err(PatchError::Unsupported(_))));
        }
    }

    #[test]
    fn rendered_scripts_parse_back(
        hunks in prop::collection::vec(("[a-z][a-z ]{0,6}", "[a-z ]{0,6}"), 1..4),
    ) {
        let script = EditScript::Diff(
            hunks.into_iter().map(|(search, replace)| Hunk { search, replace }).collect(),
        );
        prop_assert_eq!(EditScript::parse(&script.render()).unwrap(), script);
    }
}
