//! The iterative loop coupling set expansion and synonym discovery.
//!
//! Each iteration:
//!
//! 1. train the SVM ensemble on the current set `E` and rank the vocabulary (`L_se`);
//! 2. mine pseudo-labelled pairs from the top of `L_se` with the generic synonym model `M0`;
//! 3. fine-tune `M0` on them, giving the class model `Mc`;
//! 4. score candidates by `sy = max_{e in E} Mc(e_i, e)` and fuse `final = sqrt(p_set * sy)`;
//! 5. admit the top `ceil(Z / max_iter)` non-members of the fused ranking.
//!
//! Fine-tuning always restarts from `M0`. Iterations are sequential; work
//! inside an iteration runs on the rayon pool.

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::{score_vocabulary, train_ensemble, EnsembleParams, NegativeSampling, SvmParams};
use crate::gbdt::{fine_tune, BoostParams, GbdtModel};
use crate::pairfeat::FeatureContext;
use crate::rank::{RankEntry, RankList};
use crate::seed;
use crate::store::{ordered, LabeledPair, PairLabel, PairSource, SeedQuery, TermId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpanderConfig {
    /// Negatives per seed for each ensemble member (K).
    pub negative_ratio: usize,
    /// Ensemble members (T).
    pub ensemble_size: usize,
    /// Negative pseudo pairs per positive (N).
    pub pseudo_negatives: usize,
    /// Trees appended when fine-tuning (H).
    pub finetune_trees: usize,
    pub max_iter: usize,
    /// Number of entities to add over the whole run (Z); seeds do not count.
    pub target_size: usize,
    /// Pseudo positives are mined among this many top-ranked entities.
    pub top_pool: usize,
    pub pos_threshold: f64,
    pub neg_threshold: f64,
    /// Synonym scores are computed for members plus the top
    /// `rescore_factor * ceil(Z / max_iter)` non-members; `None` rescans everything.
    pub rescore_factor: Option<usize>,
    /// When false, synonym fusion and fine-tuning are skipped entirely.
    pub use_synonyms: bool,
    pub svm: SvmParams,
    pub sampling: NegativeSampling,
    pub rng_seed: u64,
}

impl Default for ExpanderConfig {
    fn default() -> Self {
        Self {
            negative_ratio: 10,
            ensemble_size: 50,
            pseudo_negatives: 10,
            finetune_trees: 10,
            max_iter: 6,
            target_size: 60,
            top_pool: 100,
            pos_threshold: 0.9,
            neg_threshold: 0.5,
            rescore_factor: Some(10),
            use_synonyms: true,
            svm: SvmParams::default(),
            sampling: NegativeSampling::default(),
            rng_seed: 0,
        }
    }
}

impl ExpanderConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("negative_ratio", self.negative_ratio),
            ("ensemble_size", self.ensemble_size),
            ("pseudo_negatives", self.pseudo_negatives),
            ("max_iter", self.max_iter),
            ("target_size", self.target_size),
            ("top_pool", self.top_pool),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        for (name, v) in [("pos_threshold", self.pos_threshold), ("neg_threshold", self.neg_threshold)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1)")));
            }
        }
        Ok(())
    }

    /// Entities admitted per iteration: `ceil(Z / max_iter)`.
    pub fn step(&self) -> usize {
        self.target_size.div_ceil(self.max_iter)
    }

    fn ensemble(&self) -> EnsembleParams {
        EnsembleParams {
            negative_ratio: self.negative_ratio,
            members: self.ensemble_size,
            svm: self.svm.clone(),
            sampling: self.sampling.clone(),
        }
    }
}

/// `sqrt(p_set * sy)`.
pub fn final_score(p_set: f64, sy: f64) -> f64 {
    (p_set * sy).sqrt()
}

/// The growing entity set, in admission order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpandedSet {
    entities: Vec<TermId>,
    /// Iteration each entity was admitted in; 0 for seeds.
    admitted_at: Vec<usize>,
    #[serde(skip)]
    members: HashSet<TermId>,
}

impl ExpandedSet {
    pub fn from_seeds(seeds: &[TermId]) -> Result<Self> {
        let mut set = Self {
            entities: Vec::new(),
            admitted_at: Vec::new(),
            members: HashSet::new(),
        };
        for &s in seeds {
            if !set.insert(s, 0) {
                return Err(Error::InvalidInput(format!("seed {s} listed twice")));
            }
        }
        if set.is_empty() {
            return Err(Error::InvalidInput("empty seed set".into()));
        }
        Ok(set)
    }

    fn insert(&mut self, t: TermId, iteration: usize) -> bool {
        if self.members.insert(t) {
            self.entities.push(t);
            self.admitted_at.push(iteration);
            true
        } else {
            false
        }
    }

    pub fn entities(&self) -> &[TermId] {
        &self.entities
    }

    pub fn admitted_at(&self) -> &[usize] {
        &self.admitted_at
    }

    pub fn contains(&self, t: TermId) -> bool {
        self.members.contains(&t)
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// Entities added after the seeds, in admission order.
    pub fn additions(&self) -> impl Iterator<Item = TermId> + '_ {
        self.entities
            .iter()
            .zip(&self.admitted_at)
            .filter(|(_, &it)| it > 0)
            .map(|(&t, _)| t)
    }
}

/// A synonym model bound to a feature context, counting how often it is queried.
pub struct SynonymScorer<'a, 'c> {
    features: &'a FeatureContext<'c>,
    model: &'a GbdtModel,
    calls: &'a AtomicU64,
}

impl<'a, 'c> SynonymScorer<'a, 'c> {
    pub fn new(features: &'a FeatureContext<'c>, model: &'a GbdtModel, calls: &'a AtomicU64) -> Self {
        Self { features, model, calls }
    }

    pub fn probability(&self, a: TermId, b: TermId) -> Result<f64> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let x = self.features.pair_vector(a, b)?;
        self.model.predict(&x)
    }
}

/// Max synonym probability of `term` against the members of `set`, skipping
/// `term` itself. Zero when no other member exists.
pub fn sy_score(term: TermId, set: &[TermId], scorer: &SynonymScorer) -> Result<f64> {
    let mut best = 0.0f64;
    for &e in set {
        if e != term {
            best = best.max(scorer.probability(term, e)?);
        }
    }
    Ok(best)
}

/// Pairs mined from an expansion ranking.
#[derive(Debug, Clone, Default)]
pub struct PseudoLabels {
    pub positives: Vec<LabeledPair>,
    pub negatives: Vec<LabeledPair>,
}

impl PseudoLabels {
    pub fn pairs(&self) -> Vec<LabeledPair> {
        let mut v = self.positives.clone();
        v.extend_from_slice(&self.negatives);
        v
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty() && self.negatives.is_empty()
    }
}

/// Positives: unordered pairs among the top `top_pool` entries of `l_se` with
/// `M0 >= pos_threshold`. For each positive, `ceil(N/2)` entities with
/// `p_set < neg_threshold` are drawn and paired with both endpoints.
pub fn generate_pseudo_labels(
    l_se: &RankList,
    scorer: &SynonymScorer,
    cfg: &ExpanderConfig,
    rng_seed: u64,
) -> Result<PseudoLabels> {
    if l_se.is_empty() {
        return Err(Error::InvalidInput("empty rank list".into()));
    }
    let pool: Vec<TermId> = l_se.terms().take(cfg.top_pool).collect();
    let candidate_pairs: Vec<(TermId, TermId)> = pool
        .iter()
        .enumerate()
        .flat_map(|(i, &x)| pool[i + 1..].iter().map(move |&y| ordered(x, y)))
        .collect();
    let scores = candidate_pairs
        .par_iter()
        .map(|&(a, b)| scorer.probability(a, b))
        .collect::<Result<Vec<_>>>()?;
    let mut positives: Vec<LabeledPair> = candidate_pairs
        .iter()
        .zip(&scores)
        .filter(|(_, &s)| s >= cfg.pos_threshold)
        .map(|(&(a, b), _)| LabeledPair::new(a, b, PairLabel::Positive, PairSource::Pseudo))
        .collect();
    positives.sort_by_key(|p| p.key());
    if positives.is_empty() {
        return Ok(PseudoLabels::default());
    }

    let low: Vec<TermId> = l_se
        .entries()
        .iter()
        .filter(|e| e.p_set < cfg.neg_threshold)
        .map(|e| e.term)
        .collect();
    if low.is_empty() {
        return Err(Error::NoNegativeCandidates {
            threshold: cfg.neg_threshold,
        });
    }
    let positive_keys: HashSet<(TermId, TermId)> = positives.iter().map(|p| p.key()).collect();
    let per_positive = cfg.pseudo_negatives.div_ceil(2);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut seen = HashSet::new();
    let mut negatives = Vec::new();
    for p in &positives {
        let eligible: Vec<TermId> = low.iter().copied().filter(|&z| z != p.a && z != p.b).collect();
        let take = per_positive.min(eligible.len());
        for i in index::sample(&mut rng, eligible.len(), take).into_iter() {
            let z = eligible[i];
            for x in [p.a, p.b] {
                let key = ordered(x, z);
                if !positive_keys.contains(&key) && seen.insert(key) {
                    negatives.push(LabeledPair::new(x, z, PairLabel::Negative, PairSource::Pseudo));
                }
            }
        }
    }
    Ok(PseudoLabels { positives, negatives })
}

/// Shared, read-only inputs of a run.
pub struct JointContext<'a, 'c> {
    pub features: &'a FeatureContext<'c>,
    /// The generic synonym model `M0`.
    pub base_model: &'a GbdtModel,
    /// Tree parameters for fine-tuning.
    pub boost: &'a BoostParams,
}

/// Everything one iteration produced.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Raw expansion ranking.
    pub expansion_ranking: RankList,
    /// Ranking after synonym fusion (equal to the raw ranking without synonyms).
    pub adjusted: RankList,
    pub pseudo: PseudoLabels,
    pub added: Vec<TermId>,
    /// Fine-tuned class model, if one was trained this iteration.
    pub class_model: Option<GbdtModel>,
}

/// Runs one iteration on the current set and returns the record; `set` is
/// extended in place with the admitted entities.
pub fn run_iteration(
    set: &mut ExpandedSet,
    ctx: &JointContext,
    cfg: &ExpanderConfig,
    iteration: usize,
    calls: &AtomicU64,
) -> Result<IterationRecord> {
    if set.is_empty() {
        return Err(Error::InvalidInput("empty expanded set".into()));
    }
    let bag = ctx.features.bag();
    let ensemble_seed = seed::derive(seed::derive(cfg.rng_seed, seed::EXPANSION), iteration as u64);
    let ensemble = train_ensemble(set.entities(), bag, &cfg.ensemble(), ensemble_seed)?;
    let l_se = score_vocabulary(&ensemble, bag)?;

    let mut pseudo = PseudoLabels::default();
    let mut class_model = None;
    let adjusted = if cfg.use_synonyms {
        let base_scorer = SynonymScorer::new(ctx.features, ctx.base_model, calls);
        let pseudo_seed = seed::derive(seed::derive(cfg.rng_seed, seed::PSEUDO_LABELS), iteration as u64);
        pseudo = generate_pseudo_labels(&l_se, &base_scorer, cfg, pseudo_seed)?;
        let pairs = pseudo.pairs();
        let has_both = !pseudo.positives.is_empty() && !pseudo.negatives.is_empty();
        if has_both {
            let rows = pairs
                .par_iter()
                .map(|p| ctx.features.pair_vector(p.a, p.b))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<bool> = pairs.iter().map(|p| p.label.is_positive()).collect();
            class_model = Some(fine_tune(ctx.base_model, &rows, &labels, cfg.finetune_trees, ctx.boost)?);
        }
        let mc = class_model.as_ref().unwrap_or(ctx.base_model);
        let scorer = SynonymScorer::new(ctx.features, mc, calls);
        fuse(&l_se, set, &scorer, cfg)?
    } else {
        l_se.clone()
    };

    let already = set.additions().count();
    let quota = cfg.step().min(cfg.target_size.saturating_sub(already));
    let mut added = Vec::with_capacity(quota);
    for e in adjusted.entries() {
        if added.len() >= quota {
            break;
        }
        if !set.contains(e.term) && ctx.features.supports(e.term) {
            added.push(e.term);
        }
    }
    for &t in &added {
        set.insert(t, iteration);
    }
    Ok(IterationRecord {
        iteration,
        expansion_ranking: l_se,
        adjusted,
        pseudo,
        added,
        class_model,
    })
}

/// Adds sy and final scores to members and the top non-member candidates.
fn fuse(l_se: &RankList, set: &ExpandedSet, scorer: &SynonymScorer, cfg: &ExpanderConfig) -> Result<RankList> {
    let cap = cfg.rescore_factor.map(|f| f * cfg.step());
    let mut taken = 0usize;
    let mut rescore = Vec::with_capacity(l_se.len());
    for e in l_se.entries() {
        let member = set.contains(e.term);
        let pick = member || cap.is_none_or(|c| taken < c);
        if !member && pick {
            taken += 1;
        }
        rescore.push(pick && scorer.features.supports(e.term));
    }
    let members = set.entities();
    let entries = l_se
        .entries()
        .par_iter()
        .zip(rescore.par_iter())
        .map(|(e, &pick)| {
            if !pick {
                return Ok(*e);
            }
            let sy = sy_score(e.term, members, scorer)?;
            Ok(RankEntry {
                sy: Some(sy),
                final_score: Some(final_score(e.p_set, sy)),
                ..*e
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankList::adjusted(entries, l_se.omitted))
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub expanded: ExpandedSet,
    /// The class model of the last iteration that fine-tuned, else `M0`.
    pub class_model: GbdtModel,
    /// The last adjusted ranking.
    pub rank_list: RankList,
    pub iterations: Vec<IterationRecord>,
    /// Number of synonym-model evaluations performed.
    pub synonym_model_calls: u64,
    pub stopped_early: bool,
}

/// Runs up to `max_iter` iterations from the query's seeds.
pub fn run(query: &SeedQuery, ctx: &JointContext, cfg: &ExpanderConfig) -> Result<RunOutput> {
    cfg.validate()?;
    if ctx.base_model.feature_count != ctx.features.feature_len() {
        return Err(Error::FeatureLength {
            expected: ctx.features.feature_len(),
            found: ctx.base_model.feature_count,
        });
    }
    let mut set = ExpandedSet::from_seeds(&query.seed_terms())?;
    let calls = AtomicU64::new(0);
    let mut iterations: Vec<IterationRecord> = Vec::with_capacity(cfg.max_iter);
    let mut stopped_early = false;
    for it in 1..=cfg.max_iter {
        let record = run_iteration(&mut set, ctx, cfg, it, &calls)?;
        let none_added = record.added.is_empty();
        iterations.push(record);
        if none_added {
            stopped_early = it < cfg.max_iter || set.additions().count() < cfg.target_size;
            break;
        }
    }
    let class_model = iterations
        .iter()
        .rev()
        .find_map(|r| r.class_model.clone())
        .unwrap_or_else(|| ctx.base_model.clone());
    let rank_list = iterations.last().map(|r| r.adjusted.clone()).unwrap_or_default();
    Ok(RunOutput {
        expanded: set,
        class_model,
        rank_list,
        iterations,
        synonym_model_calls: calls.load(Ordering::Relaxed),
        stopped_early,
    })
}

/// Final ranking used for evaluation: admitted entities in admission order,
/// then the remaining non-members of the last adjusted list.
pub fn output_ranking(out: &RunOutput) -> Vec<TermId> {
    let mut ranking: Vec<TermId> = out.expanded.additions().collect();
    ranking.extend(out.rank_list.terms().filter(|t| !out.expanded.contains(*t)));
    ranking
}
