//! Command-line driver: run configuration, cached ingestion, and the batch
//! commands `ingest`, `train-synonym`, `expand`, `synsets`, `eval`,
//! `analyze` and `synth`.
//!
//! Every command reads one JSON [`RunConfig`]; global flags override it.
//! All randomness is derived from `RunConfig::seed` with the stream
//! constants in [`crate::seed`].
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! cache/                manifest.json, pca.json, distant_pairs.tsv
//! synonym/              m0.json, m0.metrics.json
//! runs/<name>/run.json
//! runs/<name>/qNNN/     summary.json, expanded.tsv, ranking.tsv, mc.json,
//!                       iter_K/{expansion_rank,rank,pseudo_pairs,added}.tsv,
//!                       synsets.json, graph.tsv, louvain.json
//! runs/<name>/eval.json, eval.csv
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicU64;

use clap::{Args, Parser, Subcommand};
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{self, PairScore, QueryResult, TTest};
use crate::gbdt::{self, BoostParams, GbdtModel};
use crate::joint::{self, ExpanderConfig, JointContext, RunOutput, SynonymScorer};
use crate::pairfeat::{FeatureContext, SemanticSpaces};
use crate::rank::RankList;
use crate::seed;
use crate::store::{
    self, create, EmbeddingBag, LabeledPair, PcaProjector, SeedQuery, TermId, Vocabulary,
};
use crate::synset::{self, Synset};
use crate::synthbench::{self, WorldParams};

/// Environment variable overriding the cache directory.
pub const CACHE_ENV: &str = "SYNEXPAND_CACHE_DIR";

const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingPath {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistantConfig {
    /// Space whose cosine gates positives; defaults to the first.
    pub space: Option<String>,
    pub neg_per_pos: usize,
}

impl Default for DistantConfig {
    fn default() -> Self {
        Self {
            space: None,
            neg_per_pos: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcaConfig {
    pub space: Option<String>,
    pub dim: usize,
}

impl Default for PcaConfig {
    fn default() -> Self {
        Self { space: None, dim: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Fraction of distant pairs held out when training `M0`.
    pub holdout_fraction: f64,
    /// Probability threshold for F1.
    pub threshold: f64,
    /// `k` of the set-expansion difficulty.
    pub difficulty_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![10, 20, 50],
            holdout_fraction: 0.2,
            threshold: 0.5,
            difficulty_k: 10_000,
        }
    }
}

/// One serializable description of a run. Relative paths are resolved
/// against the directory holding the config file.
///
/// `expander.rng_seed` and `boost.rng_seed` are ignored: both are derived
/// from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub vocab: PathBuf,
    #[serde(default)]
    pub kb_map: Option<PathBuf>,
    pub embeddings: Vec<EmbeddingPath>,
    pub seeds: PathBuf,
    #[serde(default)]
    pub gold_classes: Option<PathBuf>,
    #[serde(default)]
    pub gold_synsets: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub distant: DistantConfig,
    #[serde(default)]
    pub pca: PcaConfig,
    #[serde(default)]
    pub semantic_spaces: SemanticSpaces,
    #[serde(default)]
    pub expander: ExpanderConfig,
    #[serde(default)]
    pub boost: BoostParams,
    #[serde(default = "default_edge_threshold")]
    pub edge_threshold: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_edge_threshold() -> f64 {
    0.5
}

impl RunConfig {
    /// Minimal config with defaults for everything but the input paths.
    pub fn new(vocab: PathBuf, embeddings: Vec<EmbeddingPath>, seeds: PathBuf) -> Self {
        Self {
            vocab,
            kb_map: None,
            embeddings,
            seeds,
            gold_classes: None,
            gold_synsets: None,
            output_dir: default_output_dir(),
            cache_dir: None,
            distant: DistantConfig::default(),
            pca: PcaConfig::default(),
            semantic_spaces: SemanticSpaces::default(),
            expander: ExpanderConfig::default(),
            boost: BoostParams::default(),
            edge_threshold: default_edge_threshold(),
            seed: 0,
            workers: None,
            eval: EvalConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.vocab);
        fix(&mut self.seeds);
        fix(&mut self.output_dir);
        for e in &mut self.embeddings {
            fix(&mut e.path);
        }
        for p in [&mut self.kb_map, &mut self.gold_classes, &mut self.gold_synsets, &mut self.cache_dir]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    /// Checks parameter ranges and that every referenced input file exists.
    pub fn validate(&self) -> Result<()> {
        let mut files = vec![&self.vocab, &self.seeds];
        files.extend(self.embeddings.iter().map(|e| &e.path));
        files.extend(self.kb_map.iter());
        files.extend(self.gold_classes.iter());
        files.extend(self.gold_synsets.iter());
        for f in files {
            if !f.is_file() {
                return Err(Error::Config(format!("input file {} does not exist", f.display())));
            }
        }
        if self.embeddings.is_empty() {
            return Err(Error::Config("at least one embedding space is required".into()));
        }
        let mut names = HashSet::new();
        for e in &self.embeddings {
            if !names.insert(e.name.as_str()) {
                return Err(Error::Config(format!("duplicate embedding name {:?}", e.name)));
            }
        }
        for (what, name) in [("distant", &self.distant.space), ("pca", &self.pca.space)] {
            if let Some(n) = name {
                if !names.contains(n.as_str()) {
                    return Err(Error::Config(format!("{what}.space {n:?} is not an embedding name")));
                }
            }
        }
        if self.distant.neg_per_pos == 0 || self.pca.dim == 0 {
            return Err(Error::Config("distant.neg_per_pos and pca.dim must be >= 1".into()));
        }
        if !(self.edge_threshold > 0.0 && self.edge_threshold <= 1.0) {
            return Err(Error::Config("edge_threshold must lie in (0, 1]".into()));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("eval.ks must be non-empty and positive".into()));
        }
        if !(self.eval.holdout_fraction > 0.0 && self.eval.holdout_fraction < 1.0) {
            return Err(Error::Config("eval.holdout_fraction must lie in (0, 1)".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        self.expander.validate()
    }

    /// Cache directory: the env var, else `cache_dir`, else `output_dir/cache`.
    pub fn cache_path(&self) -> PathBuf {
        if let Some(dir) = std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(dir);
        }
        self.cache_dir.clone().unwrap_or_else(|| self.output_dir.join("cache"))
    }

    pub fn model_path(&self) -> PathBuf {
        self.output_dir.join("synonym").join("m0.json")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.output_dir.join("runs")
    }

    /// Expander settings with the derived seed.
    pub fn expander_config(&self, use_synonyms: bool) -> ExpanderConfig {
        ExpanderConfig {
            use_synonyms,
            rng_seed: self.seed,
            ..self.expander.clone()
        }
    }

    pub fn boost_params(&self) -> BoostParams {
        BoostParams {
            rng_seed: seed::derive(self.seed, seed::SYNONYM_MODEL),
            ..self.boost.clone()
        }
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    writeln!(out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Hex SHA-256 of a file.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

// ---------------------------------------------------------------------------
// ingest

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestParams {
    pub pca_space: String,
    pub pca_dim: usize,
    pub distant_space: String,
    pub neg_per_pos: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub inputs: Vec<ManifestEntry>,
    pub params: IngestParams,
    pub outputs: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestReport {
    pub cache_dir: PathBuf,
    /// True when the manifest matched and nothing was recomputed.
    pub cache_hit: bool,
    pub positives: usize,
    pub negatives: usize,
}

fn input_entries(cfg: &RunConfig) -> Result<Vec<ManifestEntry>> {
    let mut roles: Vec<(String, &PathBuf)> = vec![("vocab".into(), &cfg.vocab)];
    if let Some(p) = &cfg.kb_map {
        roles.push(("kb_map".into(), p));
    }
    for e in &cfg.embeddings {
        roles.push((format!("embedding:{}", e.name), &e.path));
    }
    roles
        .into_iter()
        .map(|(role, path)| {
            Ok(ManifestEntry {
                role,
                path: path.clone(),
                sha256: file_sha256(path)?,
            })
        })
        .collect()
}

fn space_name(cfg: &RunConfig, name: &Option<String>) -> String {
    name.clone().unwrap_or_else(|| cfg.embeddings[0].name.clone())
}

fn ingest_params(cfg: &RunConfig) -> IngestParams {
    IngestParams {
        pca_space: space_name(cfg, &cfg.pca.space),
        pca_dim: cfg.pca.dim,
        distant_space: space_name(cfg, &cfg.distant.space),
        neg_per_pos: cfg.distant.neg_per_pos,
        seed: cfg.seed,
    }
}

/// Vocabulary and embeddings loaded from the configured files.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub vocab: Vocabulary,
    pub bag: EmbeddingBag,
}

impl Inputs {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let mut vocab = store::load_vocabulary(&cfg.vocab)?;
        if let Some(map) = &cfg.kb_map {
            let n = vocab.apply_kb_map(map)?;
            info!("kb map assigned {n} ids");
        }
        let spaces = cfg
            .embeddings
            .par_iter()
            .map(|e| store::load_embedding_space(&e.path, &e.name, &vocab))
            .collect::<Result<Vec<_>>>()?;
        for s in &spaces {
            if s.skipped() > 0 {
                info!("space {}: skipped {} unknown surfaces", s.name(), s.skipped());
            }
        }
        Ok(Self {
            vocab,
            bag: EmbeddingBag::new(spaces)?,
        })
    }

    fn space_index(&self, name: &str) -> Result<usize> {
        self.bag
            .position(name)
            .ok_or_else(|| Error::Config(format!("unknown embedding space {name:?}")))
    }
}

/// Validates inputs and fills the cache with the PCA projector and distant
/// pairs. A manifest whose inputs, parameters and outputs all match skips
/// recomputation.
pub fn cmd_ingest(cfg: &RunConfig) -> Result<IngestReport> {
    cfg.validate()?;
    let cache = cfg.cache_path();
    let inputs = input_entries(cfg)?;
    let params = ingest_params(cfg);
    let manifest_path = cache.join("manifest.json");
    if manifest_path.is_file() {
        if let Ok(old) = read_json::<Manifest>(&manifest_path) {
            if old.version == MANIFEST_VERSION && old.inputs == inputs && old.params == params && outputs_intact(&old)
            {
                let counts = count_pairs(&cache.join("distant_pairs.tsv"))?;
                info!("cache hit at {}", cache.display());
                return Ok(IngestReport {
                    cache_dir: cache,
                    cache_hit: true,
                    positives: counts.0,
                    negatives: counts.1,
                });
            }
        }
    }

    let data = Inputs::load(cfg)?;
    let pca_space = data.space_index(&params.pca_space)?;
    let distant_space = data.space_index(&params.distant_space)?;
    let pca = store::fit_pca(data.bag.space(pca_space), cfg.pca.dim)?;
    let distant = store::generate_distant_supervision(
        &data.vocab,
        data.bag.space(distant_space),
        cfg.distant.neg_per_pos,
        seed::derive(cfg.seed, seed::DISTANT_SUPERVISION),
    )?;
    if distant.positives.is_empty() {
        return Err(Error::NoPositivePairs);
    }
    info!(
        "distant supervision: {} positives, {} random and {} hard negatives ({} hard shortfall)",
        distant.positives.len(),
        distant.random_negatives.len(),
        distant.hard_negatives.len(),
        distant.hard_shortfall
    );
    fs::create_dir_all(&cache).map_err(|e| Error::io(&cache, e))?;
    let pca_path = cache.join("pca.json");
    let pairs_path = cache.join("distant_pairs.tsv");
    write_json(&pca_path, &pca)?;
    let pairs = distant.pairs();
    store::write_pairs(&pairs_path, &pairs, &data.vocab)?;
    let outputs = vec![
        ManifestEntry {
            role: "pca".into(),
            sha256: file_sha256(&pca_path)?,
            path: pca_path,
        },
        ManifestEntry {
            role: "distant_pairs".into(),
            sha256: file_sha256(&pairs_path)?,
            path: pairs_path,
        },
    ];
    write_json(
        &manifest_path,
        &Manifest {
            version: MANIFEST_VERSION,
            inputs,
            params,
            outputs,
        },
    )?;
    Ok(IngestReport {
        cache_dir: cache,
        cache_hit: false,
        positives: distant.positives.len(),
        negatives: pairs.len() - distant.positives.len(),
    })
}

fn outputs_intact(m: &Manifest) -> bool {
    m.outputs
        .iter()
        .all(|o| file_sha256(&o.path).is_ok_and(|h| h == o.sha256))
}

fn count_pairs(path: &Path) -> Result<(usize, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let pos = text.lines().filter(|l| l.split('\t').nth(2) == Some("positive")).count();
    let total = text.lines().filter(|l| !l.is_empty()).count();
    Ok((pos, total - pos))
}

/// Inputs plus the cached projector, checked against the manifest.
#[derive(Debug, Clone)]
pub struct Store {
    pub inputs: Inputs,
    pub pca: PcaProjector,
    pub pca_space: usize,
    pub semantic: Vec<usize>,
    pub cache_dir: PathBuf,
}

impl Store {
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let cache = cfg.cache_path();
        let manifest_path = cache.join("manifest.json");
        if !manifest_path.is_file() {
            return Err(Error::Config(format!(
                "no cache manifest at {}; run `ingest` first",
                manifest_path.display()
            )));
        }
        let manifest: Manifest = read_json(&manifest_path)?;
        if manifest.inputs != input_entries(cfg)? || manifest.params != ingest_params(cfg) {
            return Err(Error::Config("inputs changed since the last `ingest`; rerun it".into()));
        }
        let inputs = Inputs::load(cfg)?;
        let pca: PcaProjector = read_json(&cache.join("pca.json"))?;
        let pca_space = inputs.space_index(&manifest.params.pca_space)?;
        let semantic = cfg.semantic_spaces.resolve(&inputs.bag)?;
        Ok(Self {
            inputs,
            pca,
            pca_space,
            semantic,
            cache_dir: cache,
        })
    }

    pub fn features(&self) -> Result<FeatureContext<'_>> {
        FeatureContext::new(
            &self.inputs.vocab,
            &self.inputs.bag,
            self.semantic.clone(),
            &self.pca,
            self.pca_space,
        )
    }

    pub fn distant_pairs(&self) -> Result<Vec<LabeledPair>> {
        store::read_pairs(&self.cache_dir.join("distant_pairs.tsv"), &self.inputs.vocab)
    }
}

// ---------------------------------------------------------------------------
// train-synonym

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynonymMetrics {
    pub average_precision: f64,
    pub auc: f64,
    pub f1: f64,
    pub threshold: f64,
    pub train_pairs: usize,
    pub holdout_pairs: usize,
    pub holdout_positives: usize,
    pub trees: usize,
    pub feature_names: Vec<String>,
}

/// Splits pair indices into (train, holdout), stratified by label. Each label
/// with at least two pairs contributes at least one pair to either side.
pub fn holdout_split(labels: &[bool], fraction: f64, rng_seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut train = Vec::new();
    let mut hold = Vec::new();
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let mut n = (fraction * idx.len() as f64).round() as usize;
        if idx.len() >= 2 {
            n = n.clamp(1, idx.len() - 1);
        } else {
            n = 0;
        }
        hold.extend_from_slice(&idx[..n]);
        train.extend_from_slice(&idx[n..]);
    }
    train.sort_unstable();
    hold.sort_unstable();
    (train, hold)
}

/// Trains `M0` on the distant pairs minus a stratified holdout and writes the
/// model with a metrics sidecar.
pub fn cmd_train_synonym(cfg: &RunConfig) -> Result<SynonymMetrics> {
    let st = Store::open(cfg)?;
    let features = st.features()?;
    let pairs = st.distant_pairs()?;
    if pairs.is_empty() {
        return Err(Error::NoPairs);
    }
    let rows = pairs
        .par_iter()
        .map(|p| features.pair_vector(p.a, p.b))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<bool> = pairs.iter().map(|p| p.label.is_positive()).collect();
    let (train_idx, hold_idx) = holdout_split(
        &labels,
        cfg.eval.holdout_fraction,
        seed::derive(cfg.seed, seed::HOLDOUT_SPLIT),
    );
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<bool>) {
        (idx.iter().map(|&i| rows[i].clone()).collect(), idx.iter().map(|&i| labels[i]).collect())
    };
    let (train_x, train_y) = pick(&train_idx);
    let (hold_x, hold_y) = pick(&hold_idx);
    let model = gbdt::train(&train_x, &train_y, &cfg.boost_params())?;
    let probs = model.predict_many(&hold_x)?;
    let scored: Vec<PairScore> = probs
        .iter()
        .zip(&hold_y)
        .map(|(&probability, &label)| PairScore { probability, label })
        .collect();
    let metrics = SynonymMetrics {
        average_precision: eval::average_precision(&scored)?,
        auc: eval::auc(&scored)?,
        f1: eval::f1(&scored, cfg.eval.threshold)?,
        threshold: cfg.eval.threshold,
        train_pairs: train_x.len(),
        holdout_pairs: hold_x.len(),
        holdout_positives: hold_y.iter().filter(|&&y| y).count(),
        trees: model.tree_count(),
        feature_names: features.column_names(),
    };
    let path = cfg.model_path();
    model.save(&path)?;
    write_json(&path.with_file_name("m0.metrics.json"), &metrics)?;
    info!(
        "M0: AP {:.4} AUC {:.4} F1 {:.4} on {} held-out pairs",
        metrics.average_precision, metrics.auc, metrics.f1, metrics.holdout_pairs
    );
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// expand

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySummary {
    pub query_index: usize,
    pub class_name: String,
    pub seeds: Vec<String>,
    pub use_synonyms: bool,
    pub iterations: usize,
    pub added: Vec<String>,
    pub synonym_model_calls: u64,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub use_synonyms: bool,
    pub seed: u64,
    pub expander: ExpanderConfig,
    pub queries: Vec<RunQuery>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunQuery {
    pub index: usize,
    pub class_name: String,
    pub dir: String,
}

#[derive(Debug, Clone, Default)]
pub struct ExpandOptions {
    pub no_syn: bool,
    /// Run only this query index.
    pub query: Option<usize>,
    /// Run directory name; defaults to `joint` or `nosyn`.
    pub name: Option<String>,
}

pub fn query_dir_name(index: usize) -> String {
    format!("q{index:03}")
}

/// Runs the joint loop for the selected queries and writes per-iteration
/// artifacts. Returns the run directory.
pub fn cmd_expand(cfg: &RunConfig, opts: &ExpandOptions) -> Result<PathBuf> {
    let st = Store::open(cfg)?;
    let model_path = cfg.model_path();
    if !model_path.is_file() {
        return Err(Error::Config(format!(
            "no synonym model at {}; run `train-synonym` first",
            model_path.display()
        )));
    }
    let m0 = GbdtModel::load(&model_path)?;
    let features = st.features()?;
    let vocab = &st.inputs.vocab;
    let queries = store::load_seed_queries(&cfg.seeds, vocab)?;
    let selected: Vec<usize> = match opts.query {
        Some(i) if i >= queries.len() => {
            return Err(Error::Config(format!("query index {i} out of range ({} queries)", queries.len())))
        }
        Some(i) => vec![i],
        None => (0..queries.len()).collect(),
    };
    let use_synonyms = !opts.no_syn;
    let expander = cfg.expander_config(use_synonyms);
    let boost = cfg.boost_params();
    let ctx = JointContext {
        features: &features,
        base_model: &m0,
        boost: &boost,
    };
    let name = opts
        .name
        .clone()
        .unwrap_or_else(|| if use_synonyms { "joint" } else { "nosyn" }.to_string());
    let run_dir = cfg.runs_dir().join(&name);
    let mut listed = Vec::new();
    for &qi in &selected {
        let q = &queries[qi];
        info!("query {qi} ({}): {} seed synsets", q.class_name, q.synsets.len());
        let out = joint::run(q, &ctx, &expander)?;
        let dir = run_dir.join(query_dir_name(qi));
        write_query_outputs(&dir, qi, q, &out, vocab, use_synonyms)?;
        listed.push(RunQuery {
            index: qi,
            class_name: q.class_name.clone(),
            dir: query_dir_name(qi),
        });
    }
    write_json(
        &run_dir.join("run.json"),
        &RunManifest {
            name,
            use_synonyms,
            seed: cfg.seed,
            expander,
            queries: listed,
        },
    )?;
    Ok(run_dir)
}

fn write_surfaces(path: &Path, terms: &[TermId], vocab: &Vocabulary) -> Result<()> {
    let mut out = create(path)?;
    for &t in terms {
        writeln!(out, "{}", vocab.surface(t)).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn read_surfaces(path: &Path, vocab: &Vocabulary) -> Result<Vec<TermId>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let surface = l.split('\t').next().unwrap_or(l);
            vocab
                .lookup(surface)
                .ok_or_else(|| Error::UnknownSurface(surface.to_string()))
        })
        .collect()
}

fn write_query_outputs(
    dir: &Path,
    index: usize,
    query: &SeedQuery,
    out: &RunOutput,
    vocab: &Vocabulary,
    use_synonyms: bool,
) -> Result<()> {
    for rec in &out.iterations {
        let it = dir.join(format!("iter_{}", rec.iteration));
        rec.expansion_ranking.write_tsv(&it.join("expansion_rank.tsv"), vocab)?;
        rec.adjusted.write_tsv(&it.join("rank.tsv"), vocab)?;
        store::write_pairs(&it.join("pseudo_pairs.tsv"), &rec.pseudo.pairs(), vocab)?;
        write_surfaces(&it.join("added.tsv"), &rec.added, vocab)?;
    }
    let expanded = dir.join("expanded.tsv");
    let mut f = create(&expanded)?;
    for (t, at) in out.expanded.entities().iter().zip(out.expanded.admitted_at()) {
        writeln!(f, "{}\t{at}", vocab.surface(*t)).map_err(|e| Error::io(&expanded, e))?;
    }
    f.flush().map_err(|e| Error::io(&expanded, e))?;
    write_surfaces(&dir.join("ranking.tsv"), &joint::output_ranking(out), vocab)?;
    if use_synonyms {
        out.class_model.save(&dir.join("mc.json"))?;
    }
    let added: Vec<TermId> = out.expanded.additions().collect();
    let summary = QuerySummary {
        query_index: index,
        class_name: query.class_name.clone(),
        seeds: query
            .seed_terms()
            .iter()
            .map(|&t| vocab.surface(t).to_string())
            .collect(),
        use_synonyms,
        iterations: out.iterations.len(),
        added: added.iter().map(|&t| vocab.surface(t).to_string()).collect(),
        synonym_model_calls: out.synonym_model_calls,
        stopped_early: out.stopped_early,
    };
    write_json(&dir.join("summary.json"), &summary)
}

/// Query directories under `dir`: `dir` itself when it holds an expansion,
/// else its sorted subdirectories that do.
pub fn query_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("summary.json").is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.join("summary.json").is_file() {
            out.push(p);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::InvalidInput(format!("no expansion outputs under {}", dir.display())));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// synsets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LouvainSummary {
    pub nodes: usize,
    pub edges: usize,
    pub modularity: f64,
    pub trace: Vec<f64>,
    pub levels: usize,
    pub synsets: usize,
}

/// Builds the synonym graph over each expanded set, partitions it with
/// Louvain and writes `synsets.json`, `graph.tsv` and `louvain.json`.
pub fn cmd_synsets(cfg: &RunConfig, run_dir: &Path) -> Result<Vec<Vec<Synset>>> {
    let dirs = query_dirs(run_dir)?;
    let st = Store::open(cfg)?;
    let features = st.features()?;
    let vocab = &st.inputs.vocab;
    let mut m0 = None;
    let mut all = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let summary: QuerySummary = read_json(&dir.join("summary.json"))?;
        let entities = read_surfaces(&dir.join("expanded.tsv"), vocab)?;
        let mc_path = dir.join("mc.json");
        let model = if mc_path.is_file() {
            GbdtModel::load(&mc_path)?
        } else {
            if m0.is_none() {
                m0 = Some(GbdtModel::load(&cfg.model_path())?);
            }
            m0.clone().expect("loaded above")
        };
        let calls = AtomicU64::new(0);
        let scorer = SynonymScorer::new(&features, &model, &calls);
        let graph = synset::build_graph(&entities, &scorer, cfg.edge_threshold)?;
        let result = synset::louvain_with_trace(&graph, seed::derive(cfg.seed, seed::LOUVAIN));
        let synsets = synset::extract_synsets(&result.partition, graph.nodes(), &summary.class_name)?;
        graph.write_tsv(&dir.join("graph.tsv"), vocab)?;
        synset::write_synsets_json(&dir.join("synsets.json"), &synsets, vocab)?;
        write_json(
            &dir.join("louvain.json"),
            &LouvainSummary {
                nodes: graph.node_count(),
                edges: graph.edges().len(),
                modularity: result.modularity,
                trace: result.trace.clone(),
                levels: result.levels,
                synsets: synsets.len(),
            },
        )?;
        all.push(synsets);
    }
    Ok(all)
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub query: String,
    pub class_name: String,
    /// AP@k keyed by k.
    pub ap: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunScores {
    pub run: PathBuf,
    pub queries: Vec<QueryScore>,
    pub map: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub run: RunScores,
    pub baseline: Option<RunScores>,
    /// Paired t-test of run against baseline on per-query AP@k; `None` for a
    /// cutoff where every paired difference is identical.
    pub t_test: Option<BTreeMap<usize, Option<TTest>>>,
}

fn gold_sets(path: &Path, vocab: &Vocabulary) -> Result<BTreeMap<String, HashSet<TermId>>> {
    let classes = store::load_seed_queries(path, vocab)?;
    let mut gold: BTreeMap<String, HashSet<TermId>> = BTreeMap::new();
    for c in classes {
        gold.entry(c.class_name.clone()).or_default().extend(c.seed_terms());
    }
    Ok(gold)
}

/// Per-query results of a run against gold classes; seeds are excluded.
pub fn run_results(
    run_dir: &Path,
    gold: &BTreeMap<String, HashSet<TermId>>,
    vocab: &Vocabulary,
) -> Result<Vec<(QueryResult, String)>> {
    query_dirs(run_dir)?
        .into_iter()
        .map(|dir| {
            let summary: QuerySummary = read_json(&dir.join("summary.json"))?;
            let truth = gold
                .get(&summary.class_name)
                .ok_or_else(|| Error::InvalidInput(format!("class {:?} missing from gold", summary.class_name)))?
                .clone();
            let seeds: HashSet<TermId> = summary
                .seeds
                .iter()
                .map(|s| vocab.lookup(s).ok_or_else(|| Error::UnknownSurface(s.clone())))
                .collect::<Result<_>>()?;
            let ranked = read_surfaces(&dir.join("ranking.tsv"), vocab)?;
            let id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((QueryResult::new(id, ranked, truth, &seeds), summary.class_name))
        })
        .collect()
}

fn score_run(run_dir: &Path, ks: &[usize], gold: &BTreeMap<String, HashSet<TermId>>, vocab: &Vocabulary) -> Result<RunScores> {
    let results = run_results(run_dir, gold, vocab)?;
    let mut queries = Vec::with_capacity(results.len());
    for (r, class_name) in &results {
        let mut ap = BTreeMap::new();
        for &k in ks {
            ap.insert(k, eval::ap_at_k(&r.ranked, &r.truth, k)?);
        }
        queries.push(QueryScore {
            query: r.query_id.clone(),
            class_name: class_name.clone(),
            ap,
        });
    }
    let plain: Vec<QueryResult> = results.into_iter().map(|(r, _)| r).collect();
    let mut map = BTreeMap::new();
    for &k in ks {
        map.insert(k, eval::map_at_k(&plain, k)?);
    }
    Ok(RunScores {
        run: run_dir.to_path_buf(),
        queries,
        map,
    })
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub baseline: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    /// Report path stem; defaults to `<run>/eval` (`.json` and `.csv`).
    pub out: Option<PathBuf>,
}

/// MAP@k of a run, and a paired t-test against a baseline run when given.
pub fn cmd_eval(cfg: &RunConfig, run_dir: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let gold_path = opts
        .gold
        .clone()
        .or_else(|| cfg.gold_classes.clone())
        .ok_or_else(|| Error::Config("no gold classes given (config `gold_classes` or --gold)".into()))?;
    if !gold_path.is_file() {
        return Err(Error::Config(format!("gold file {} does not exist", gold_path.display())));
    }
    let vocab = store::load_vocabulary(&cfg.vocab)?;
    let gold = gold_sets(&gold_path, &vocab)?;
    let ks = cfg.eval.ks.clone();
    let run = score_run(run_dir, &ks, &gold, &vocab)?;
    let (baseline, t_test) = match &opts.baseline {
        None => (None, None),
        Some(b) => {
            let base = score_run(b, &ks, &gold, &vocab)?;
            let base_by_id: BTreeMap<&str, &QueryScore> = base.queries.iter().map(|q| (q.query.as_str(), q)).collect();
            let mut tests = BTreeMap::new();
            for &k in &ks {
                let mut a = Vec::new();
                let mut bv = Vec::new();
                for q in &run.queries {
                    if let Some(bq) = base_by_id.get(q.query.as_str()) {
                        a.push(q.ap[&k]);
                        bv.push(bq.ap[&k]);
                    }
                }
                let t = match eval::paired_t_test(&a, &bv) {
                    Ok(t) => Some(t),
                    Err(Error::DegenerateVariance) => None,
                    Err(e) => return Err(e),
                };
                tests.insert(k, t);
            }
            if tests.values().all(Option::is_none) {
                return Err(Error::DegenerateVariance);
            }
            (Some(base), Some(tests))
        }
    };
    let report = EvalReport {
        ks,
        run,
        baseline,
        t_test,
    };
    let stem = opts.out.clone().unwrap_or_else(|| run_dir.join("eval"));
    write_json(&stem.with_extension("json"), &report)?;
    write_eval_csv(&stem.with_extension("csv"), &report)?;
    Ok(report)
}

fn write_eval_csv(path: &Path, r: &EvalReport) -> Result<()> {
    let mut out = create(path)?;
    let io = |e| Error::io(path, e);
    let header: Vec<String> = r.ks.iter().map(|k| format!("ap@{k}")).collect();
    writeln!(out, "run,query,class,{}", header.join(",")).map_err(io)?;
    let mut runs = vec![("run", &r.run)];
    if let Some(b) = &r.baseline {
        runs.push(("baseline", b));
    }
    for (label, s) in runs {
        for q in &s.queries {
            let vals: Vec<String> = r.ks.iter().map(|k| q.ap[k].to_string()).collect();
            writeln!(out, "{label},{},{},{}", q.query, q.class_name, vals.join(",")).map_err(io)?;
        }
        let vals: Vec<String> = r.ks.iter().map(|k| s.map[k].to_string()).collect();
        writeln!(out, "{label},MAP,,{}", vals.join(",")).map_err(io)?;
    }
    out.flush().map_err(io)
}

// ---------------------------------------------------------------------------
// analyze

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDifficulty {
    pub class_name: String,
    pub terms: usize,
    /// Set-expansion difficulty per embedding space, keyed by space name.
    pub set_expansion: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyReport {
    pub k: usize,
    pub classes: Vec<ClassDifficulty>,
    pub lexical: Option<f64>,
    /// Semantic difficulty per space.
    pub semantic: Option<BTreeMap<String, f64>>,
}

/// Difficulty metrics of the gold classes and, when configured, gold synsets.
pub fn cmd_analyze(cfg: &RunConfig, out: Option<&Path>) -> Result<DifficultyReport> {
    cfg.validate()?;
    let gold_path = cfg
        .gold_classes
        .as_ref()
        .ok_or_else(|| Error::Config("`analyze` needs `gold_classes` in the config".into()))?;
    let data = Inputs::load(cfg)?;
    let k = cfg.eval.difficulty_k;
    let classes = store::load_seed_queries(gold_path, &data.vocab)?
        .into_iter()
        .map(|c| {
            let terms = c.seed_terms();
            let mut set_expansion = BTreeMap::new();
            for s in data.bag.spaces() {
                let embedded: Vec<TermId> = terms.iter().copied().filter(|&t| s.contains(t)).collect();
                set_expansion.insert(s.name().to_string(), eval::set_expansion_difficulty(&embedded, s, k)?);
            }
            Ok(ClassDifficulty {
                class_name: c.class_name,
                terms: terms.len(),
                set_expansion,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (lexical, semantic) = match &cfg.gold_synsets {
        None => (None, None),
        Some(p) => {
            let records: Vec<synset::SynsetRecord> = read_json(p)?;
            let synsets: Vec<Vec<TermId>> = records
                .iter()
                .map(|r| {
                    r.members
                        .iter()
                        .map(|s| data.vocab.lookup(s).ok_or_else(|| Error::UnknownSurface(s.clone())))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?;
            let surfaces: Vec<Vec<&str>> = records.iter().map(|r| r.members.iter().map(String::as_str).collect()).collect();
            let mut semantic = BTreeMap::new();
            for s in data.bag.spaces() {
                semantic.insert(s.name().to_string(), eval::semantic_difficulty(&synsets, s)?);
            }
            (Some(eval::lexical_difficulty(&surfaces)?), Some(semantic))
        }
    };
    let report = DifficultyReport {
        k,
        classes,
        lexical,
        semantic,
    };
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join("difficulty.json"));
    write_json(&path, &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// synth

/// Writes a planted world into `dir` together with a `config.json` whose
/// expander settings fit the world's vocabulary size.
pub fn cmd_synth(dir: &Path, params: &WorldParams) -> Result<PathBuf> {
    let world = synthbench::generate(params)?;
    world.write(dir)?;
    let embeddings = world
        .bag
        .spaces()
        .iter()
        .map(|s| EmbeddingPath {
            name: s.name().to_string(),
            path: PathBuf::from(format!("emb_{}.txt", s.name())),
        })
        .collect();
    let mut cfg = RunConfig::new(PathBuf::from("vocab.tsv"), embeddings, PathBuf::from("seeds.json"));
    cfg.gold_classes = Some(PathBuf::from("gold_classes.json"));
    cfg.gold_synsets = Some(PathBuf::from("gold_synsets.json"));
    cfg.pca.dim = params.dim.min(8);
    cfg.seed = params.seed;
    cfg.expander = synth_expander();
    let path = dir.join("config.json");
    cfg.save(&path)?;
    Ok(path)
}

/// Expander settings sized for the default planted world: with about 290
/// terms, `K = 10` cannot supply `|E| (K + 1)` candidates once `E` grows.
pub fn synth_expander() -> ExpanderConfig {
    ExpanderConfig {
        negative_ratio: 5,
        max_iter: 4,
        target_size: 40,
        ..ExpanderConfig::default()
    }
}

// ---------------------------------------------------------------------------
// argument parsing

#[derive(Debug, Parser)]
#[command(name = "synexpand", version, about = "Joint entity set expansion and synonym discovery")]
pub struct Cli {
    /// Run configuration (JSON).
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, global = true, env = CACHE_ENV)]
    pub cache_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate inputs and cache the PCA projector and distant pairs.
    Ingest,
    /// Train the generic synonym model on distant pairs.
    TrainSynonym,
    /// Run the joint expansion loop for the seed queries.
    Expand(ExpandArgs),
    /// Extract synsets from expansion outputs.
    Synsets {
        /// Run directory or a single query directory.
        #[arg(long)]
        run: PathBuf,
    },
    /// MAP@k of a run, optionally against a baseline run.
    Eval(EvalArgs),
    /// Difficulty metrics of the gold classes and synsets.
    Analyze {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a planted synthetic world and a matching config.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ExpandArgs {
    /// Disable synonym fusion and fine-tuning.
    #[arg(long)]
    pub no_syn: bool,
    #[arg(long)]
    pub query: Option<usize>,
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 40)]
    pub entities_per_class: usize,
    #[arg(long, default_value_t = 0.3)]
    pub synonym_rate: f64,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = Some(w);
    }
    if let Some(o) = &cli.output_dir {
        cfg.output_dir = o.clone();
    }
    if let Some(c) = &cli.cache_dir {
        cfg.cache_dir = Some(c.clone());
    }
    Ok(cfg)
}

fn init_pool(workers: Option<usize>) {
    if let Some(n) = workers {
        // A second initialisation in the same process is harmless to ignore.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Executes a parsed command line, printing a one-line result summary.
pub fn execute(cli: Cli) -> Result<()> {
    if let Command::Synth(a) = &cli.command {
        init_pool(cli.workers);
        let params = WorldParams {
            classes: a.classes,
            entities_per_class: a.entities_per_class,
            synonym_rate: a.synonym_rate,
            seed: cli.seed.unwrap_or(WorldParams::default().seed),
            ..WorldParams::default()
        };
        let path = cmd_synth(&a.out, &params)?;
        println!("wrote {}", path.display());
        return Ok(());
    }
    let cfg = load_config(&cli)?;
    init_pool(cfg.workers);
    match &cli.command {
        Command::Ingest => {
            let r = cmd_ingest(&cfg)?;
            println!(
                "{} {} ({} positive, {} negative pairs)",
                if r.cache_hit { "cache hit" } else { "ingested" },
                r.cache_dir.display(),
                r.positives,
                r.negatives
            );
        }
        Command::TrainSynonym => {
            let m = cmd_train_synonym(&cfg)?;
            println!("AP {:.4} AUC {:.4} F1 {:.4}", m.average_precision, m.auc, m.f1);
        }
        Command::Expand(a) => {
            let dir = cmd_expand(
                &cfg,
                &ExpandOptions {
                    no_syn: a.no_syn,
                    query: a.query,
                    name: a.name.clone(),
                },
            )?;
            println!("{}", dir.display());
        }
        Command::Synsets { run } => {
            let all = cmd_synsets(&cfg, run)?;
            println!("{} synsets over {} queries", all.iter().map(Vec::len).sum::<usize>(), all.len());
        }
        Command::Eval(a) => {
            let r = cmd_eval(
                &cfg,
                &a.run,
                &EvalOptions {
                    baseline: a.baseline.clone(),
                    gold: a.gold.clone(),
                    out: a.out.clone(),
                },
            )?;
            for (k, v) in &r.run.map {
                print!("MAP@{k} {v:.4}  ");
            }
            println!();
            if let Some(t) = &r.t_test {
                for (k, tt) in t {
                    match tt {
                        Some(tt) => println!("t-test @{k}: t {:.4} p {:.4}", tt.t, tt.p),
                        None => println!("t-test @{k}: undefined (identical differences)"),
                    }
                }
            }
        }
        Command::Analyze { out } => {
            let r = cmd_analyze(&cfg, out.as_deref())?;
            println!("{} classes analyzed", r.classes.len());
        }
        Command::Synth(_) => unreachable!("handled above"),
    }
    Ok(())
}

/// Process exit code for a command result.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_validation() => 1,
        Err(_) => 2,
    }
}

/// Loads the rank list written for one iteration.
pub fn read_iteration_rank(query_dir: &Path, iteration: usize, vocab: &Vocabulary) -> Result<RankList> {
    RankList::read_tsv(&query_dir.join(format!("iter_{iteration}")).join("rank.tsv"), vocab)
}
