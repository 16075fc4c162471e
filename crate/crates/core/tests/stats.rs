//! Length statistics against values computed with numpy, and sentence
//! segmentation against a hand-split story.

use serde::Deserialize;
use std::path::{Path, PathBuf};

use flawfic_core::dataset::{dataset_stats, import_jsonl, length_stats, LengthStats};
use flawfic_core::text::{segment_sentences, word_count};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn read<T: for<'de> Deserialize<'de>>(rel: &str) -> T {
    serde_json::from_str(&std::fs::read_to_string(fixtures().join(rel)).unwrap()).unwrap()
}

#[derive(Deserialize)]
struct Case {
    lengths: Vec<usize>,
    stats: LengthStats,
}

#[derive(Deserialize)]
struct Oracle {
    synthetic_414: LengthStats,
    pipeline_dataset: Case,
    small: Vec<Case>,
}

fn assert_close(got: &LengthStats, want: &LengthStats) {
    assert_eq!(got.count, want.count);
    let pairs = [
        ("mean", got.mean, want.mean),
        ("std", got.std, want.std),
        ("min", got.min, want.min),
        ("p25", got.p25, want.p25),
        ("median", got.median, want.median),
        ("p75", got.p75, want.p75),
        ("max", got.max, want.max),
    ];
    for (name, g, w) in pairs {
        assert!((g - w).abs() < 1e-9, "{name}: {g} vs {w}");
    }
}

/// The published length row: count, mean, std, min, p25, median, p75, max.
const PUBLISHED: [f64; 8] = [414.0, 731.81, 225.51, 132.0, 569.25, 754.0, 923.50, 1236.0];

fn rounded(s: &LengthStats) -> [f64; 8] {
    let r = |x: f64| (x * 100.0).round() / 100.0;
    [s.count as f64, r(s.mean), r(s.std), r(s.min), r(s.p25), r(s.median), r(s.p75), r(s.max)]
}

#[test]
fn synthetic_lengths_match_numpy() {
    let oracle: Oracle = read("stats/numpy_oracle.json");
    let lengths: Vec<usize> = read("stats/lengths.json");
    let got = length_stats(&lengths).unwrap();
    assert_close(&got, &oracle.synthetic_414);
    assert_eq!(rounded(&got), PUBLISHED);
}

#[test]
fn small_cases_match_numpy() {
    let oracle: Oracle = read("stats/numpy_oracle.json");
    for case in &oracle.small {
        assert_close(&length_stats(&case.lengths).unwrap(), &case.stats);
    }
}

#[test]
fn golden_dataset_matches_numpy() {
    let oracle: Oracle = read("stats/numpy_oracle.json");
    let manifest = import_jsonl(&fixtures().join("pipeline/expected/dataset.jsonl")).unwrap();
    let lengths: Vec<usize> = manifest.examples.iter().map(|e| e.word_count).collect();
    assert_eq!(lengths, oracle.pipeline_dataset.lengths);
    assert_close(&dataset_stats(&manifest).unwrap(), &oracle.pipeline_dataset.stats);
}

#[test]
fn empty_input_is_an_error() {
    assert!(length_stats(&[]).is_err());
}

/// Runs only when the released benchmark file is available locally.
#[test]
fn published_manifest_reproduces_table() {
    let Ok(path) = std::env::var("FLAWFIC_PUBLISHED_MANIFEST") else {
        eprintln!("FLAWFIC_PUBLISHED_MANIFEST not set; skipping");
        return;
    };
    let manifest = import_jsonl(Path::new(&path)).unwrap();
    assert_eq!(rounded(&dataset_stats(&manifest).unwrap()), PUBLISHED);
}

#[derive(Deserialize)]
struct Segmented {
    text: String,
    sentences: Vec<String>,
    words: usize,
}

#[test]
fn segmentation_matches_hand_split() {
    let story: Segmented = read("segmentation/harbour.json");
    assert_eq!(word_count(&story.text), story.words);
    let got: Vec<String> = segment_sentences(&story.text).unwrap().into_iter().map(|s| s.text).collect();
    for (i, (g, w)) in got.iter().zip(&story.sentences).enumerate() {
        assert_eq!(g, w, "sentence {i}");
    }
    assert_eq!(got.len(), story.sentences.len());
}
