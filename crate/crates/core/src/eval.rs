//! Ranking and classification metrics, significance testing, and dataset
//! difficulty measures.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::pairfeat::jaro_winkler;
use crate::store::{EmbeddingSpace, TermId};

/// Average precision over the top `k` items, normalized by `min(k, |truth|)`.
pub fn ap_at_k<T: Eq + Hash>(ranked: &[T], truth: &HashSet<T>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidInput("K must be >= 1".into()));
    }
    if truth.is_empty() {
        return Err(Error::InvalidInput("empty ground truth".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, item) in ranked.iter().take(k).enumerate() {
        if truth.contains(item) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / k.min(truth.len()) as f64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryResult {
    pub query_id: String,
    pub ranked: Vec<TermId>,
    pub truth: HashSet<TermId>,
}

impl QueryResult {
    /// Drops `exclude` (typically the seeds) from both the ranking and the truth.
    pub fn new(query_id: impl Into<String>, ranked: Vec<TermId>, truth: HashSet<TermId>, exclude: &HashSet<TermId>) -> Self {
        let mut seen = HashSet::new();
        Self {
            query_id: query_id.into(),
            ranked: ranked
                .into_iter()
                .filter(|t| !exclude.contains(t) && seen.insert(*t))
                .collect(),
            truth: truth.into_iter().filter(|t| !exclude.contains(t)).collect(),
        }
    }
}

pub fn map_at_k(results: &[QueryResult], k: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::InvalidInput("no queries".into()));
    }
    let mut total = 0.0;
    for r in results {
        total += ap_at_k(&r.ranked, &r.truth, k)?;
    }
    Ok(total / results.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub probability: f64,
    pub label: bool,
}

fn check_pairs(pairs: &[PairScore]) -> Result<(usize, usize)> {
    let pos = pairs.iter().filter(|p| p.label).count();
    let neg = pairs.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    if pairs.iter().any(|p| !p.probability.is_finite()) {
        return Err(Error::InvalidInput("non-finite score".into()));
    }
    Ok((pos, neg))
}

fn descending(pairs: &[PairScore]) -> Vec<PairScore> {
    let mut v = pairs.to_vec();
    v.sort_by(|a, b| b.probability.partial_cmp(&a.probability).unwrap_or(Ordering::Equal));
    v
}

/// Area under the precision-recall step curve; tied scores form one threshold.
pub fn average_precision(pairs: &[PairScore]) -> Result<f64> {
    let (pos, _) = check_pairs(pairs)?;
    let sorted = descending(pairs);
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].probability;
        while i < sorted.len() && sorted[i].probability == s {
            tp += usize::from(sorted[i].label);
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Probability that a random positive outscores a random negative, ties counting half.
pub fn auc(pairs: &[PairScore]) -> Result<f64> {
    let (pos, neg) = check_pairs(pairs)?;
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.probability.partial_cmp(&b.probability).unwrap_or(Ordering::Equal));
    // Sum of positive ranks with ties averaged.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].probability == sorted[i].probability {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg_rank * sorted[i..j].iter().filter(|p| p.label).count() as f64;
        i = j;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// F1 with `probability >= threshold` predicted positive; 0 when nothing is
/// predicted positive.
pub fn f1(pairs: &[PairScore], threshold: f64) -> Result<f64> {
    check_pairs(pairs)?;
    let tp = pairs.iter().filter(|p| p.label && p.probability >= threshold).count() as f64;
    let fp = pairs.iter().filter(|p| !p.label && p.probability >= threshold).count() as f64;
    let fn_ = pairs.iter().filter(|p| p.label && p.probability < threshold).count() as f64;
    if tp == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp / (2.0 * tp + fp + fn_))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-tailed p-value.
    pub p: f64,
    pub df: f64,
}

/// Paired two-tailed Student t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidInput("paired t-test needs two equal-length samples of size >= 2".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if !(var > 0.0) {
        return Err(Error::DegenerateVariance);
    }
    let t = mean / (var / n).sqrt();
    let df = n - 1.0;
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, p, df })
}

/// Indices of the `k` most cosine-similar covered terms to `term` (itself
/// included), ties by term id.
fn top_k(space: &EmbeddingSpace, term: TermId, k: usize) -> HashSet<TermId> {
    let mut scored: Vec<(f64, TermId)> = space
        .covered()
        .map(|t| (space.cosine(term, t).expect("covered"), t))
        .collect();
    let by_sim = |a: &(f64, TermId), b: &(f64, TermId)| {
        b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
    };
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_sim);
        scored.truncate(k);
    }
    scored.into_iter().map(|(_, t)| t).collect()
}

/// Mean over class members `e` of `|C \ TopK(e)| / |C|`.
pub fn set_expansion_difficulty(class: &[TermId], space: &EmbeddingSpace, k: usize) -> Result<f64> {
    if k == 0 || class.is_empty() {
        return Err(Error::InvalidInput("need k >= 1 and a non-empty class".into()));
    }
    let members: HashSet<TermId> = class.iter().copied().collect();
    let c = members.len() as f64;
    let mut total = 0.0;
    for &e in &members {
        if !space.contains(e) {
            return Err(Error::MissingVector {
                term: e.to_string(),
                space: space.name().into(),
            });
        }
        let near = top_k(space, e, k);
        total += members.iter().filter(|t| !near.contains(t)).count() as f64 / c;
    }
    Ok(total / c)
}

/// Mean `1 - jaro_winkler` over all unordered pairs within each synset.
pub fn lexical_difficulty<S: AsRef<str>>(synsets: &[Vec<S>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in synsets {
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                total += 1.0 - jaro_winkler(s[i].as_ref(), s[j].as_ref());
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::NoPairs);
    }
    Ok(total / count as f64)
}

/// Mean `1 - cosine` over all unordered pairs within each synset.
pub fn semantic_difficulty(synsets: &[Vec<TermId>], space: &EmbeddingSpace) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in synsets {
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                let c = space.cosine(s[i], s[j]).ok_or_else(|| Error::MissingVector {
                    term: s[i].to_string(),
                    space: space.name().into(),
                })?;
                total += 1.0 - c;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::NoPairs);
    }
    Ok(total / count as f64)
}
