//! Okapi BM25 over one participant's answer pool.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use crate::error::{Error, Result};

pub const K1: f64 = 1.2;
pub const B: f64 = 0.75;

/// Inverted index with `k1 = 1.2`, `b = 0.75` and the non-negative idf
/// `ln(1 + (N - df + 0.5) / (df + 0.5))`.
#[derive(Debug, Clone)]
pub struct Bm25Index<T> {
    ids: Vec<u64>,
    position: HashMap<u64, usize>,
    lengths: Vec<usize>,
    avg_len: f64,
    postings: HashMap<T, Vec<(usize, usize)>>,
}

impl<T: Eq + Hash + Clone> Bm25Index<T> {
    /// Builds the index. Duplicate answer ids keep their first document.
    pub fn build<'a, I>(docs: I) -> Self
    where
        I: IntoIterator<Item = (u64, &'a [T])>,
        T: 'a,
    {
        let mut ids = Vec::new();
        let mut position = HashMap::new();
        let mut lengths = Vec::new();
        let mut postings: HashMap<T, Vec<(usize, usize)>> = HashMap::new();
        for (aid, tokens) in docs {
            if position.contains_key(&aid) {
                continue;
            }
            let doc = ids.len();
            position.insert(aid, doc);
            ids.push(aid);
            lengths.push(tokens.len());
            let mut tf: HashMap<&T, usize> = HashMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (t, n) in tf {
                postings.entry(t.clone()).or_default().push((doc, n));
            }
        }
        let total: usize = lengths.iter().sum();
        let avg_len = if ids.is_empty() {
            0.0
        } else {
            total as f64 / ids.len() as f64
        };
        Self {
            ids,
            position,
            lengths,
            avg_len,
            postings,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn document_frequency(&self, term: &T) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn idf(&self, term: &T) -> f64 {
        let n = self.ids.len() as f64;
        let df = self.document_frequency(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, idf: f64, tf: usize, doc: usize) -> f64 {
        let tf = tf as f64;
        let norm = 1.0 - B + B * self.lengths[doc] as f64 / self.avg_len;
        idf * tf * (K1 + 1.0) / (tf + K1 * norm)
    }

    /// Score of one answer. Every query token occurrence contributes, so a
    /// repeated query term counts once per repetition.
    pub fn score(&self, query: &[T], aid: u64) -> Result<f64> {
        let doc = *self
            .position
            .get(&aid)
            .ok_or_else(|| Error::Lookup(format!("answer {aid} is not in the index")))?;
        let mut total = 0.0;
        for term in query {
            if let Some(list) = self.postings.get(term) {
                if let Some(&(_, tf)) = list.iter().find(|(d, _)| *d == doc) {
                    total += self.term_weight(self.idf(term), tf, doc);
                }
            }
        }
        Ok(total)
    }

    /// Scores of every indexed answer, accumulated through the postings.
    pub fn score_all(&self, query: &[T]) -> Vec<(u64, f64)> {
        let mut scores = vec![0.0; self.ids.len()];
        for term in query {
            if let Some(list) = self.postings.get(term) {
                let idf = self.idf(term);
                for &(doc, tf) in list {
                    scores[doc] += self.term_weight(idf, tf, doc);
                }
            }
        }
        self.ids.iter().copied().zip(scores).collect()
    }

    /// Up to `k` highest-scoring answers outside `ground_truth`, ties broken
    /// by ascending answer id.
    pub fn top_negatives(&self, query: &[T], ground_truth: &HashSet<u64>, k: usize) -> Vec<u64> {
        let mut scored: Vec<(u64, f64)> = self
            .score_all(query)
            .into_iter()
            .filter(|(aid, _)| !ground_truth.contains(aid))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        scored.into_iter().map(|(aid, _)| aid).collect()
    }
}
