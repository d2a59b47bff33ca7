//! Okapi BM25 over lowercase alphanumeric tokens.
//!
//! ```text
//! score(D, Q) = Σ_{q ∈ Q} idf(q) · tf(q,D)·(k1 + 1) / (tf(q,D) + k1·(1 − b + b·|D|/avgdl))
//! idf(q)      = ln(1 + (N − n(q) + 0.5) / (n(q) + 0.5))
//! ```
//! Query terms are deduplicated. Only documents containing at least one query
//! term are scored, so every returned score is strictly positive.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedHit {
    pub id: u64,
    pub score: f64,
}

/// Lowercase, split on anything that is not alphanumeric, no stemming.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone)]
struct Doc {
    id: u64,
    len: usize,
    tf: HashMap<String, u32>,
}

/// Immutable index; rebuild to change it.
#[derive(Debug, Clone, Default)]
pub struct Bm25Index {
    params: Bm25Params,
    docs: Vec<Doc>,
    df: HashMap<String, usize>,
    avgdl: f64,
}

impl Bm25Index {
    pub fn build<'a>(docs: impl IntoIterator<Item = (u64, &'a str)>) -> Self {
        Self::with_params(Bm25Params::default(), docs)
    }

    pub fn with_params<'a>(
        params: Bm25Params,
        docs: impl IntoIterator<Item = (u64, &'a str)>,
    ) -> Self {
        let mut index = Bm25Index {
            params,
            ..Default::default()
        };
        let mut total = 0usize;
        for (id, text) in docs {
            let tokens = tokenize(text);
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for term in tf.keys() {
                *index.df.entry(term.clone()).or_default() += 1;
            }
            total += tokens.len();
            index.docs.push(Doc {
                id,
                len: tokens.len(),
                tf,
            });
        }
        index.avgdl = if index.docs.is_empty() {
            0.0
        } else {
            total as f64 / index.docs.len() as f64
        };
        index
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    fn idf(&self, term: &str) -> f64 {
        let n = self.df.get(term).copied().unwrap_or(0) as f64;
        let total = self.docs.len() as f64;
        (1.0 + (total - n + 0.5) / (n + 0.5)).ln()
    }

    fn score(&self, terms: &[(String, f64)], doc: &Doc) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let norm = if self.avgdl > 0.0 {
            doc.len as f64 / self.avgdl
        } else {
            0.0
        };
        terms
            .iter()
            .filter_map(|(term, idf)| {
                let tf = f64::from(*doc.tf.get(term)?);
                Some(idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * norm)))
            })
            .sum()
    }

    /// Top `k` documents accepted by `filter`, sorted by score descending then
    /// id ascending. Corpus statistics always cover the whole index.
    pub fn search(&self, query: &str, k: usize, filter: impl Fn(u64) -> bool) -> Vec<RankedHit> {
        let unique: BTreeSet<String> = tokenize(query).into_iter().collect();
        let terms: Vec<(String, f64)> = unique
            .into_iter()
            .filter(|t| self.df.contains_key(t))
            .map(|t| {
                let idf = self.idf(&t);
                (t, idf)
            })
            .collect();
        if terms.is_empty() || k == 0 {
            return Vec::new();
        }
        let mut hits: Vec<RankedHit> = self
            .docs
            .iter()
            .filter(|d| filter(d.id) && terms.iter().any(|(t, _)| d.tf.contains_key(t)))
            .map(|d| RankedHit {
                id: d.id,
                score: self.score(&terms, d),
            })
            .filter(|h| h.score > 0.0)
            .collect();
        hits.sort_by(rank_order);
        hits.truncate(k);
        hits
    }
}

/// Score descending, then id ascending.
pub fn rank_order(a: &RankedHit, b: &RankedHit) -> Ordering {
    b.score.total_cmp(&a.score).then(a.id.cmp(&b.id))
}
