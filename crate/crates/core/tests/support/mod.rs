//! Reference implementations shared by the property tests and the acceptance
//! suite. The oracles in this file never call the code under test; loop
//! drivers live in `drivers`.
#![allow(dead_code)]

pub mod drivers;

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

/// Exponential approach of `r` toward a constant target `s`.
pub fn first_order(r: f64, s: f64, tau: f64, t: f64) -> f64 {
    s + (r - s) * (-t / tau).exp()
}

/// Relative error with an absolute floor so values near zero compare sanely.
pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1.0)
}

/// Plain Okapi BM25 evaluated document by document. Documents are
/// whitespace-separated lowercase words.
pub fn brute_bm25(docs: &[(u64, String)], query: &str, k1: f64, b: f64) -> BTreeMap<u64, f64> {
    let toks: Vec<Vec<&str>> = docs
        .iter()
        .map(|(_, d)| d.split_whitespace().collect())
        .collect();
    let n = docs.len() as f64;
    let avgdl = toks.iter().map(|t| t.len()).sum::<usize>() as f64 / n.max(1.0);
    let terms: BTreeSet<&str> = query.split_whitespace().collect();
    let mut out = BTreeMap::new();
    for (i, (id, _)) in docs.iter().enumerate() {
        let dl = toks[i].len() as f64;
        let mut score = 0.0;
        for q in &terms {
            let tf = toks[i].iter().filter(|w| *w == q).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let df = toks.iter().filter(|d| d.contains(q)).count() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl));
        }
        if score > 0.0 {
            out.insert(*id, score);
        }
    }
    out
}

pub const VOCAB: &[&str] = &[
    "magnet",
    "cycle",
    "gun",
    "phase",
    "probe",
    "hexapod",
    "parking",
    "position",
    "beam",
    "screen",
    "vacuum",
    "valve",
    "quadrupole",
    "dogleg",
    "amplitude",
    "scan",
    "energy",
    "gain",
    "laser",
    "camera",
    "interlock",
    "shift",
    "current",
    "power",
    "supply",
    "chamber",
    "venting",
    "target",
    "charge",
    "bunch",
];

/// A random corpus of at most `max_docs` documents over a small vocabulary so
/// that terms repeat across documents.
pub fn random_corpus<R: Rng>(rng: &mut R, max_docs: usize) -> Vec<(u64, String)> {
    let n = rng.gen_range(1..=max_docs);
    let vocab = rng.gen_range(3..=VOCAB.len());
    (0..n)
        .map(|i| {
            let len = rng.gen_range(1..40);
            let words: Vec<&str> = (0..len).map(|_| VOCAB[rng.gen_range(0..vocab)]).collect();
            (i as u64 + 1, words.join(" "))
        })
        .collect()
}

pub fn random_query<R: Rng>(rng: &mut R) -> String {
    let len = rng.gen_range(1..5);
    (0..len)
        .map(|_| VOCAB[rng.gen_range(0..VOCAB.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

/// Machine configuration with one magnet and one RF station, as JSON.
pub fn single_magnet_config(setpoint: f64, tau: f64, i_max: f64, ramp: f64) -> String {
    serde_json::json!({
        "seed": 7,
        "magnets": [{ "device": "T.MAG/MAGNET/M1", "setpoint": setpoint, "i_max": i_max, "ramp_rate": ramp, "tau": tau }],
    })
    .to_string()
}

/// Duration of one cycling run as the pattern dictates: ramps from the
/// setpoint to +i_max, down to -i_max, n-1 more full swings, then back.
pub fn cycle_duration(setpoint: f64, i_max: f64, ramp: f64, n: u32) -> f64 {
    let first = (i_max - setpoint).abs() / ramp;
    let swing = 2.0 * i_max / ramp;
    let swings = 1 + 2 * (n as u64 - 1);
    let back = (setpoint + i_max).abs() / ramp;
    first + swing * swings as f64 + back
}
