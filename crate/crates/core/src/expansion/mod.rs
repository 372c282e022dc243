//! Set expansion model: bag-of-embedding entity features, random negative
//! sampling and an averaged ensemble of SVMs.
//!
//! Entity feature layout is space-major, then seed-major, then transform-major:
//! for each space `b` and each seed `e_j`, the triple
//! `[sgn(d) * sqrt(|d|), d, d^2]` with `d = cos(f_b(e_i), f_b(e_j))`.

pub mod svm;

use std::collections::HashSet;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use svm::{KernelKind, SvmMember, SvmParams};

use crate::error::{Error, Result};
use crate::rank::{RankEntry, RankList};
use crate::seed;
use crate::store::{EmbeddingBag, TermId};

#[derive(Debug, Clone, PartialEq)]
pub struct EntityFeature {
    pub values: Vec<f64>,
}

fn missing(bag: &EmbeddingBag, id: TermId, space: usize) -> Error {
    Error::MissingVector {
        term: id.to_string(),
        space: bag.space(space).name().to_string(),
    }
}

pub fn build_entity_feature(term: TermId, seeds: &[TermId], bag: &EmbeddingBag) -> Result<EntityFeature> {
    let mut values = Vec::with_capacity(3 * bag.len() * seeds.len());
    for (b, space) in bag.spaces().iter().enumerate() {
        if !space.contains(term) {
            return Err(missing(bag, term, b));
        }
        for &s in seeds {
            let d = space.cosine(term, s).ok_or_else(|| missing(bag, s, b))?;
            values.extend_from_slice(&[d.signum() * d.abs().sqrt(), d, d * d]);
        }
    }
    Ok(EntityFeature { values })
}

/// Negative sampling settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NegativeSampling {
    /// When set, only terms whose maximum cosine to the seeds (first space) is
    /// below this value are eligible.
    pub restricted_max_cosine: Option<f64>,
}

/// Draws `|seeds| * ratio` distinct terms uniformly from `candidates \ seeds`.
pub fn sample_negatives(
    seeds: &[TermId],
    candidates: &[TermId],
    ratio: usize,
    sampling: &NegativeSampling,
    bag: &EmbeddingBag,
    rng_seed: u64,
) -> Result<Vec<TermId>> {
    let seed_set: HashSet<TermId> = seeds.iter().copied().collect();
    let needed = seeds.len() * ratio;
    if candidates.len() <= seeds.len() * (ratio + 1) {
        return Err(Error::VocabularyTooSmall {
            needed: seeds.len() * (ratio + 1),
            available: candidates.len(),
        });
    }
    let mut pool: Vec<TermId> = candidates.iter().copied().filter(|t| !seed_set.contains(t)).collect();
    pool.sort();
    pool.dedup();
    if let Some(limit) = sampling.restricted_max_cosine {
        let space = bag.space(0);
        pool.retain(|&t| {
            seeds
                .iter()
                .filter_map(|&s| space.cosine(t, s))
                .fold(f64::NEG_INFINITY, f64::max)
                < limit
        });
    }
    if pool.len() < needed {
        return Err(Error::VocabularyTooSmall {
            needed,
            available: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok(index::sample(&mut rng, pool.len(), needed)
        .into_iter()
        .map(|i| pool[i])
        .collect())
}

/// One SVM on the seeds (positive) against sampled negatives.
pub fn train_member(
    seeds: &[TermId],
    negatives: &[TermId],
    bag: &EmbeddingBag,
    params: &SvmParams,
) -> Result<SvmMember> {
    let mut x = Vec::with_capacity(seeds.len() + negatives.len());
    let mut y = Vec::with_capacity(seeds.len() + negatives.len());
    for &t in seeds {
        x.push(build_entity_feature(t, seeds, bag)?.values);
        y.push(true);
    }
    for &t in negatives {
        x.push(build_entity_feature(t, seeds, bag)?.values);
        y.push(false);
    }
    svm::train_svm(&x, &y, params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleParams {
    /// Negatives per seed (K).
    pub negative_ratio: usize,
    /// Number of members (T).
    pub members: usize,
    pub svm: SvmParams,
    pub sampling: NegativeSampling,
}

impl Default for EnsembleParams {
    fn default() -> Self {
        Self {
            negative_ratio: 10,
            members: 50,
            svm: SvmParams::default(),
            sampling: NegativeSampling::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleModel {
    pub members: Vec<SvmMember>,
    pub seed_set: Vec<TermId>,
    pub params: EnsembleParams,
}

/// Seed of member `t` of an ensemble trained from `rng_seed`.
pub fn member_seed(rng_seed: u64, t: usize) -> u64 {
    seed::derive(rng_seed, t as u64)
}

/// Trains one member given its index; members are independent of each other.
pub fn train_indexed_member(
    seeds: &[TermId],
    candidates: &[TermId],
    bag: &EmbeddingBag,
    params: &EnsembleParams,
    rng_seed: u64,
    t: usize,
) -> Result<SvmMember> {
    let negatives = sample_negatives(
        seeds,
        candidates,
        params.negative_ratio,
        &params.sampling,
        bag,
        member_seed(rng_seed, t),
    )?;
    train_member(seeds, &negatives, bag, &params.svm)
}

/// Trains `params.members` classifiers in parallel; member `t` depends only on
/// its derived seed, so the result is independent of scheduling.
pub fn train_ensemble(
    seeds: &[TermId],
    bag: &EmbeddingBag,
    params: &EnsembleParams,
    rng_seed: u64,
) -> Result<EnsembleModel> {
    if params.members == 0 || params.negative_ratio == 0 {
        return Err(Error::Config("ensemble size and negative ratio must be >= 1".into()));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidInput("empty seed set".into()));
    }
    let candidates = bag.covered_terms();
    for &s in seeds {
        if !bag.is_covered(s) {
            let b = (0..bag.len()).find(|&b| !bag.space(b).contains(s)).unwrap_or(0);
            return Err(missing(bag, s, b));
        }
    }
    let members = (0..params.members)
        .into_par_iter()
        .map(|t| train_indexed_member(seeds, &candidates, bag, params, rng_seed, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(EnsembleModel {
        members,
        seed_set: seeds.to_vec(),
        params: params.clone(),
    })
}

impl EnsembleModel {
    /// Member probabilities for one term, in member order.
    pub fn member_probabilities(&self, term: TermId, bag: &EmbeddingBag) -> Result<Vec<f64>> {
        let x = build_entity_feature(term, &self.seed_set, bag)?;
        Ok(self.members.iter().map(|m| m.probability(&x.values)).collect())
    }

    /// Mean member probability.
    pub fn probability(&self, term: TermId, bag: &EmbeddingBag) -> Result<f64> {
        let p = self.member_probabilities(term, bag)?;
        Ok(mean(&p))
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Scores every term covered by all spaces and sorts by probability
/// (ties by id). Seeds are scored too.
pub fn score_vocabulary(model: &EnsembleModel, bag: &EmbeddingBag) -> Result<RankList> {
    let terms = bag.covered_terms();
    let omitted = bag.uncovered_terms().len();
    let entries = terms
        .par_iter()
        .map(|&t| model.probability(t, bag).map(|p| RankEntry::new(t, p)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RankList::new(entries, omitted))
}
