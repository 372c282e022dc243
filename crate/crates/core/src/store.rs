//! Vocabulary, embedding spaces, seed queries and distant supervision.
//!
//! Everything here is loaded once and then shared read-only. Term ids are
//! dense and follow the order of the vocabulary file; terms that lack a vector
//! in some space stay in the vocabulary but are excluded from model input.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense index of a term in its vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TermId(pub u32);

impl TermId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for TermId {
    fn from(i: usize) -> Self {
        TermId(u32::try_from(i).expect("term id overflows u32"))
    }
}

impl fmt::Display for TermId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Term {
    pub id: TermId,
    pub surface: String,
    pub frequency: u64,
    pub kb_id: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    terms: Vec<Term>,
    by_surface: HashMap<String, TermId>,
}

impl Vocabulary {
    /// Builds a vocabulary from `(surface, frequency, kb_id)` triples, assigning ids in order.
    pub fn from_entries<I, S>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, u64, Option<String>)>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary::default();
        for (surface, frequency, kb_id) in entries {
            vocab.push(surface.into(), frequency, kb_id)?;
        }
        Ok(vocab)
    }

    fn push(&mut self, surface: String, frequency: u64, kb_id: Option<String>) -> Result<TermId> {
        if surface.is_empty() {
            return Err(Error::InvalidInput("empty surface".into()));
        }
        if frequency == 0 {
            return Err(Error::InvalidInput(format!("frequency of {surface:?} must be >= 1")));
        }
        if self.by_surface.contains_key(&surface) {
            return Err(Error::DuplicateSurface(surface));
        }
        let id = TermId::from(self.terms.len());
        self.by_surface.insert(surface.clone(), id);
        self.terms.push(Term {
            id,
            surface,
            frequency,
            kb_id,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn term(&self, id: TermId) -> &Term {
        &self.terms[id.index()]
    }

    pub fn surface(&self, id: TermId) -> &str {
        &self.terms[id.index()].surface
    }

    pub fn lookup(&self, surface: &str) -> Option<TermId> {
        self.by_surface.get(surface).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = TermId> + '_ {
        (0..self.terms.len()).map(TermId::from)
    }

    /// Overrides KB ids from a `surface<TAB>kb_id` table. Unknown surfaces are skipped
    /// and counted.
    pub fn apply_kb_map(&mut self, path: &Path) -> Result<usize> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut unknown = 0;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = line.split('\t');
            let (Some(surface), Some(kb), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(Error::parse(path, i + 1, "expected surface<TAB>kb_id"));
            };
            match self.by_surface.get(surface) {
                Some(id) => self.terms[id.index()].kb_id = Some(kb.to_string()),
                None => unknown += 1,
            }
        }
        Ok(unknown)
    }
}

/// Reads a vocabulary TSV: `surface<TAB>frequency[<TAB>kb_id]`, no header.
pub fn load_vocabulary(path: &Path) -> Result<Vocabulary> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut vocab = Vocabulary::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line_no = i + 1;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 2 || cols.len() > 3 {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected 2 or 3 tab-separated columns, found {}", cols.len()),
            ));
        }
        let frequency: u64 = cols[1]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, line_no, format!("bad frequency {:?}", cols[1])))?;
        let kb_id = cols.get(2).map(|s| s.trim()).filter(|s| !s.is_empty()).map(String::from);
        match vocab.push(cols[0].to_string(), frequency, kb_id) {
            Ok(_) => {}
            Err(Error::InvalidInput(msg)) => return Err(Error::parse(path, line_no, msg)),
            Err(e) => return Err(e),
        }
    }
    Ok(vocab)
}

pub fn write_vocabulary(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut out = create(path)?;
    for t in vocab.terms() {
        let res = match &t.kb_id {
            Some(kb) => writeln!(out, "{}\t{}\t{}", t.surface, t.frequency, kb),
            None => writeln!(out, "{}\t{}", t.surface, t.frequency),
        };
        res.map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// One named embedding space. Vectors are indexed by term id; terms without a
/// vector hold `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSpace {
    name: String,
    dim: usize,
    vectors: Vec<Option<Box<[f64]>>>,
    norms: Vec<f64>,
    skipped: usize,
}

impl EmbeddingSpace {
    /// Builds a space from `(term, vector)` rows over a vocabulary of `vocab_len` terms.
    pub fn from_vectors<I>(name: impl Into<String>, dim: usize, vocab_len: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (TermId, Vec<f64>)>,
    {
        let name = name.into();
        if dim == 0 {
            return Err(Error::InvalidInput(format!("space {name:?}: dim must be >= 1")));
        }
        let mut vectors: Vec<Option<Box<[f64]>>> = vec![None; vocab_len];
        for (id, v) in rows {
            if v.len() != dim {
                return Err(Error::InvalidInput(format!(
                    "space {name:?}: vector for {id} has {} entries, expected {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!("space {name:?}: non-finite entry for {id}")));
            }
            vectors[id.index()] = Some(v.into_boxed_slice());
        }
        let norms = vectors
            .iter()
            .map(|v| v.as_deref().map_or(0.0, norm))
            .collect();
        Ok(Self {
            name,
            dim,
            vectors,
            norms,
            skipped: 0,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Rows in the source file whose surface was not in the vocabulary.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn vector(&self, id: TermId) -> Option<&[f64]> {
        self.vectors.get(id.index()).and_then(|v| v.as_deref())
    }

    pub fn contains(&self, id: TermId) -> bool {
        self.vector(id).is_some()
    }

    pub fn covered(&self) -> impl Iterator<Item = TermId> + '_ {
        self.vectors
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_some())
            .map(|(i, _)| TermId::from(i))
    }

    pub fn len(&self) -> usize {
        self.vectors.iter().filter(|v| v.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cosine similarity of two covered terms; 0 when either vector is zero.
    pub fn cosine(&self, a: TermId, b: TermId) -> Option<f64> {
        let va = self.vector(a)?;
        let vb = self.vector(b)?;
        let denom = self.norms[a.index()] * self.norms[b.index()];
        Some(if denom > 0.0 { dot(va, vb) / denom } else { 0.0 })
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = norm(a) * norm(b);
    if denom > 0.0 {
        dot(a, b) / denom
    } else {
        0.0
    }
}

/// Reads a text embedding file: header `<count> <dim>`, then `surface v1 ... v_dim`.
///
/// Surfaces may contain spaces; the last `dim` fields of a row are the vector.
/// A surface not found verbatim is retried with underscores read as spaces.
pub fn load_embedding_space(path: &Path, name: &str, vocab: &Vocabulary) -> Result<EmbeddingSpace> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(line) => line.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::parse(path, 1, "missing header")),
    };
    let head: Vec<&str> = header.split_whitespace().collect();
    let (declared, dim) = match head.as_slice() {
        [count, dim] => match (count.parse::<usize>(), dim.parse::<usize>()) {
            (Ok(c), Ok(d)) if d > 0 => (c, d),
            _ => return Err(Error::parse(path, 1, format!("bad header {header:?}"))),
        },
        _ => return Err(Error::parse(path, 1, "header must be `<count> <dim>`")),
    };

    let mut rows = Vec::new();
    let mut skipped = 0;
    let mut seen = 0;
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        seen += 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let trailing = fields
            .iter()
            .rev()
            .take_while(|f| f.parse::<f64>().is_ok())
            .count()
            .min(fields.len().saturating_sub(1));
        if trailing < dim {
            return Err(Error::DimensionMismatch {
                path: path.into(),
                line: line_no,
                expected: dim,
                found: trailing,
            });
        }
        let split = fields.len() - dim;
        let surface = fields[..split].join(" ");
        let mut vector = Vec::with_capacity(dim);
        for f in &fields[split..] {
            let x: f64 = f.parse().expect("checked above");
            if !x.is_finite() {
                return Err(Error::parse(path, line_no, format!("non-finite value {f:?}")));
            }
            vector.push(x);
        }
        let id = vocab
            .lookup(&surface)
            .or_else(|| vocab.lookup(&surface.replace('_', " ")));
        match id {
            Some(id) => rows.push((id, vector)),
            None => skipped += 1,
        }
    }
    if declared != seen {
        warn!("{}: header declares {declared} rows, found {seen}", path.display());
    }
    if rows.is_empty() {
        return Err(Error::NoMatchedTerms(name.to_string()));
    }
    let mut space = EmbeddingSpace::from_vectors(name, dim, vocab.len(), rows)?;
    space.skipped = skipped;
    Ok(space)
}

pub fn write_embedding_space(path: &Path, space: &EmbeddingSpace, vocab: &Vocabulary) -> Result<()> {
    let mut out = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(out, "{} {}", space.len(), space.dim()).map_err(io)?;
    for id in space.covered() {
        write!(out, "{}", vocab.surface(id)).map_err(io)?;
        for x in space.vector(id).expect("covered") {
            write!(out, " {x}").map_err(io)?;
        }
        writeln!(out).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// The ordered list of embedding spaces describing each term.
#[derive(Debug, Clone)]
pub struct EmbeddingBag {
    spaces: Vec<EmbeddingSpace>,
}

impl EmbeddingBag {
    pub fn new(spaces: Vec<EmbeddingSpace>) -> Result<Self> {
        if spaces.is_empty() {
            return Err(Error::InvalidInput("embedding bag needs at least one space".into()));
        }
        let n = spaces[0].vectors.len();
        if spaces.iter().any(|s| s.vectors.len() != n) {
            return Err(Error::InvalidInput("embedding spaces built over different vocabularies".into()));
        }
        let mut names = HashSet::new();
        for s in &spaces {
            if !names.insert(s.name()) {
                return Err(Error::InvalidInput(format!("duplicate space name {:?}", s.name())));
            }
        }
        Ok(Self { spaces })
    }

    pub fn spaces(&self) -> &[EmbeddingSpace] {
        &self.spaces
    }

    pub fn space(&self, i: usize) -> &EmbeddingSpace {
        &self.spaces[i]
    }

    pub fn len(&self) -> usize {
        self.spaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spaces.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.spaces.iter().position(|s| s.name() == name)
    }

    /// True when the term has a vector in every space.
    pub fn is_covered(&self, id: TermId) -> bool {
        self.spaces.iter().all(|s| s.contains(id))
    }

    /// Terms usable as model input.
    pub fn covered_terms(&self) -> Vec<TermId> {
        (0..self.spaces[0].vectors.len())
            .map(TermId::from)
            .filter(|&id| self.is_covered(id))
            .collect()
    }

    /// Terms of the vocabulary missing from at least one space.
    pub fn uncovered_terms(&self) -> Vec<TermId> {
        (0..self.spaces[0].vectors.len())
            .map(TermId::from)
            .filter(|&id| !self.is_covered(id))
            .collect()
    }
}

/// A user query: a class name and its seed synsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedQuery {
    pub class_name: String,
    pub synsets: Vec<Vec<TermId>>,
}

impl SeedQuery {
    /// All seed terms in synset order.
    pub fn seed_terms(&self) -> Vec<TermId> {
        self.synsets.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SeedQueryRecord {
    class_name: String,
    synsets: Vec<Vec<String>>,
}

pub fn load_seed_queries(path: &Path, vocab: &Vocabulary) -> Result<Vec<SeedQuery>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<SeedQueryRecord> = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })?;
    records
        .into_iter()
        .map(|r| {
            if r.synsets.is_empty() {
                return Err(Error::InvalidInput(format!("query {:?} has no synsets", r.class_name)));
            }
            let mut seen = HashSet::new();
            let mut synsets = Vec::with_capacity(r.synsets.len());
            for syn in r.synsets {
                if syn.is_empty() {
                    return Err(Error::InvalidInput(format!("query {:?} has an empty synset", r.class_name)));
                }
                let mut ids = Vec::with_capacity(syn.len());
                for s in syn {
                    let id = vocab.lookup(&s).ok_or_else(|| Error::UnknownSurface(s.clone()))?;
                    if !seen.insert(id) {
                        return Err(Error::InvalidInput(format!(
                            "query {:?}: {s:?} appears in more than one synset",
                            r.class_name
                        )));
                    }
                    ids.push(id);
                }
                synsets.push(ids);
            }
            Ok(SeedQuery {
                class_name: r.class_name,
                synsets,
            })
        })
        .collect()
}

pub fn write_seed_queries(path: &Path, queries: &[SeedQuery], vocab: &Vocabulary) -> Result<()> {
    let records: Vec<SeedQueryRecord> = queries
        .iter()
        .map(|q| SeedQueryRecord {
            class_name: q.class_name.clone(),
            synsets: q
                .synsets
                .iter()
                .map(|s| s.iter().map(|&id| vocab.surface(id).to_string()).collect())
                .collect(),
        })
        .collect();
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, &records).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })?;
    out.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairLabel {
    Positive,
    Negative,
}

impl PairLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            PairLabel::Positive => "positive",
            PairLabel::Negative => "negative",
        }
    }

    pub fn is_positive(self) -> bool {
        self == PairLabel::Positive
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairSource {
    Distant,
    Pseudo,
}

impl PairSource {
    pub fn as_str(self) -> &'static str {
        match self {
            PairSource::Distant => "distant",
            PairSource::Pseudo => "pseudo",
        }
    }
}

/// A labeled term pair, stored with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LabeledPair {
    pub a: TermId,
    pub b: TermId,
    pub label: PairLabel,
    pub source: PairSource,
}

impl LabeledPair {
    /// Orders the endpoints. Panics on a self-pair.
    pub fn new(x: TermId, y: TermId, label: PairLabel, source: PairSource) -> Self {
        assert_ne!(x, y, "a pair needs two distinct terms");
        let (a, b) = if x < y { (x, y) } else { (y, x) };
        Self { a, b, label, source }
    }

    pub fn key(&self) -> (TermId, TermId) {
        (self.a, self.b)
    }
}

pub fn ordered(x: TermId, y: TermId) -> (TermId, TermId) {
    if x < y {
        (x, y)
    } else {
        (y, x)
    }
}

/// Writes pairs as `a_surface<TAB>b_surface<TAB>label<TAB>source`.
pub fn write_pairs(path: &Path, pairs: &[LabeledPair], vocab: &Vocabulary) -> Result<()> {
    let mut out = create(path)?;
    let io = |e| Error::io(path, e);
    for p in pairs {
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            vocab.surface(p.a),
            vocab.surface(p.b),
            p.label.as_str(),
            p.source.as_str()
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_pairs(path: &Path, vocab: &Vocabulary) -> Result<Vec<LabeledPair>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::parse(path, i + 1, "expected 4 tab-separated columns"));
        }
        let a = vocab.lookup(cols[0]).ok_or_else(|| Error::UnknownSurface(cols[0].into()))?;
        let b = vocab.lookup(cols[1]).ok_or_else(|| Error::UnknownSurface(cols[1].into()))?;
        let label = match cols[2] {
            "positive" => PairLabel::Positive,
            "negative" => PairLabel::Negative,
            other => return Err(Error::parse(path, i + 1, format!("bad label {other:?}"))),
        };
        let source = match cols[3] {
            "distant" => PairSource::Distant,
            "pseudo" => PairSource::Pseudo,
            other => return Err(Error::parse(path, i + 1, format!("bad source {other:?}"))),
        };
        if a == b {
            return Err(Error::parse(path, i + 1, "self pair"));
        }
        pairs.push(LabeledPair::new(a, b, label, source));
    }
    Ok(pairs)
}

/// Lowercased whitespace tokens.
pub fn tokens(surface: &str) -> Vec<String> {
    surface.split_whitespace().map(|t| t.to_lowercase()).collect()
}

/// Strict threshold on cosine for distant-supervision positives.
pub const DISTANT_COSINE_THRESHOLD: f64 = 0.5;

/// Output of [`generate_distant_supervision`], with the two negative pools kept apart.
#[derive(Debug, Clone, Default)]
pub struct DistantSupervision {
    pub positives: Vec<LabeledPair>,
    pub random_negatives: Vec<LabeledPair>,
    pub hard_negatives: Vec<LabeledPair>,
    /// Hard negatives that had to be drawn from the random pool instead.
    pub hard_shortfall: usize,
}

impl DistantSupervision {
    pub fn pairs(&self) -> Vec<LabeledPair> {
        let mut all = Vec::with_capacity(
            self.positives.len() + self.random_negatives.len() + self.hard_negatives.len(),
        );
        all.extend_from_slice(&self.positives);
        all.extend_from_slice(&self.hard_negatives);
        all.extend_from_slice(&self.random_negatives);
        all
    }
}

/// Builds synonym training pairs from KB alignment.
///
/// Positives are pairs sharing a KB id whose cosine in `space` exceeds 0.5.
/// Negatives number `neg_per_pos` per positive: the ceiling half uniformly from
/// all non-positive pairs of embedded terms, the floor half from non-positive
/// pairs sharing a token. Pairs with the same KB id are never used as negatives.
pub fn generate_distant_supervision(
    vocab: &Vocabulary,
    space: &EmbeddingSpace,
    neg_per_pos: usize,
    rng_seed: u64,
) -> Result<DistantSupervision> {
    let kb_terms: Vec<TermId> = vocab
        .ids()
        .filter(|&id| vocab.term(id).kb_id.is_some() && space.contains(id))
        .collect();
    if kb_terms.len() < 2 {
        return Err(Error::InvalidInput(
            "distant supervision needs at least two embedded terms with a kb_id".into(),
        ));
    }

    let mut by_kb: BTreeMap<&str, Vec<TermId>> = BTreeMap::new();
    for &id in &kb_terms {
        by_kb
            .entry(vocab.term(id).kb_id.as_deref().expect("filtered"))
            .or_default()
            .push(id);
    }
    let mut positives = Vec::new();
    let mut positive_keys = HashSet::new();
    for group in by_kb.values() {
        for (i, &x) in group.iter().enumerate() {
            for &y in &group[i + 1..] {
                if space.cosine(x, y).expect("embedded") > DISTANT_COSINE_THRESHOLD {
                    let p = LabeledPair::new(x, y, PairLabel::Positive, PairSource::Distant);
                    positive_keys.insert(p.key());
                    positives.push(p);
                }
            }
        }
    }
    if positives.is_empty() {
        return Err(Error::NoPositivePairs);
    }
    positives.sort_by_key(|p| p.key());

    let same_kb = |a: TermId, b: TermId| match (&vocab.term(a).kb_id, &vocab.term(b).kb_id) {
        (Some(x), Some(y)) => x == y,
        _ => false,
    };
    let eligible = |a: TermId, b: TermId| a != b && !same_kb(a, b);

    let total = neg_per_pos * positives.len();
    let random_target = total.div_ceil(2);
    let hard_target = total / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut chosen: HashSet<(TermId, TermId)> = positive_keys.clone();

    // Token-sharing candidates, in a fixed order.
    let embedded: Vec<TermId> = space.covered().collect();
    let mut by_token: BTreeMap<String, Vec<TermId>> = BTreeMap::new();
    for &id in &embedded {
        let toks: BTreeSet<String> = tokens(vocab.surface(id)).into_iter().collect();
        for t in toks {
            by_token.entry(t).or_default().push(id);
        }
    }
    let mut hard_pool: BTreeSet<(TermId, TermId)> = BTreeSet::new();
    for ids in by_token.values() {
        for (i, &x) in ids.iter().enumerate() {
            for &y in &ids[i + 1..] {
                if eligible(x, y) {
                    hard_pool.insert(ordered(x, y));
                }
            }
        }
    }
    let hard_pool: Vec<(TermId, TermId)> = hard_pool.into_iter().collect();
    let hard_take = hard_target.min(hard_pool.len());
    let mut hard_negatives = Vec::with_capacity(hard_take);
    for i in index::sample(&mut rng, hard_pool.len(), hard_take).into_iter() {
        let (a, b) = hard_pool[i];
        chosen.insert((a, b));
        hard_negatives.push(LabeledPair::new(a, b, PairLabel::Negative, PairSource::Distant));
    }
    hard_negatives.sort_by_key(|p| p.key());
    let hard_shortfall = hard_target - hard_take;
    if hard_shortfall > 0 {
        warn!("distant supervision: {hard_shortfall} hard negatives filled from the random pool");
    }

    let random_negatives = sample_random_pairs(
        &embedded,
        random_target + hard_shortfall,
        &mut chosen,
        &eligible,
        &mut rng,
    );

    Ok(DistantSupervision {
        positives,
        random_negatives,
        hard_negatives,
        hard_shortfall,
    })
}

/// Uniform sample of `want` distinct eligible pairs not yet in `chosen`.
fn sample_random_pairs(
    terms: &[TermId],
    want: usize,
    chosen: &mut HashSet<(TermId, TermId)>,
    eligible: &dyn Fn(TermId, TermId) -> bool,
    rng: &mut ChaCha8Rng,
) -> Vec<LabeledPair> {
    let n = terms.len();
    let universe = n * n.saturating_sub(1) / 2;
    let mut out = Vec::with_capacity(want);
    if want == 0 || n < 2 {
        return out;
    }
    // Enumerate when the pool is small relative to the request; reject otherwise.
    if universe <= 4 * want || universe <= 50_000 {
        let mut pool = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let key = ordered(terms[i], terms[j]);
                if eligible(key.0, key.1) && !chosen.contains(&key) {
                    pool.push(key);
                }
            }
        }
        let take = want.min(pool.len());
        if take < want {
            warn!("distant supervision: only {take} of {want} random negatives available");
        }
        for i in index::sample(rng, pool.len(), take).into_iter() {
            let (a, b) = pool[i];
            chosen.insert((a, b));
            out.push(LabeledPair::new(a, b, PairLabel::Negative, PairSource::Distant));
        }
    } else {
        while out.len() < want {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i == j {
                continue;
            }
            let key = ordered(terms[i], terms[j]);
            if eligible(key.0, key.1) && chosen.insert(key) {
                out.push(LabeledPair::new(key.0, key.1, PairLabel::Negative, PairSource::Distant));
            }
        }
    }
    out.sort_by_key(|p| p.key());
    out
}

/// Linear projection onto the leading principal directions of a space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjector {
    pub mean: Vec<f64>,
    /// Row-major `d_pca × dim`, rows orthonormal, ordered by decreasing variance.
    pub components: Vec<Vec<f64>>,
    /// Variance captured by each component.
    pub variances: Vec<f64>,
}

impl PcaProjector {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let centered: Vec<f64> = v.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        self.components.iter().map(|c| dot(c, &centered)).collect()
    }

    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &w) in self.components.iter().zip(z) {
            for (o, x) in out.iter_mut().zip(c) {
                *o += w * x;
            }
        }
        out
    }
}

/// Fits PCA on the covered vectors of a space via a symmetric eigendecomposition
/// of the sample covariance. Component signs are fixed so the largest-magnitude
/// entry of each row is positive.
pub fn fit_pca(space: &EmbeddingSpace, d_pca: usize) -> Result<PcaProjector> {
    let dim = space.dim();
    if d_pca == 0 || d_pca > dim {
        return Err(Error::InvalidInput(format!(
            "d_pca must be in 1..={dim}, got {d_pca}"
        )));
    }
    let rows: Vec<&[f64]> = space.covered().map(|id| space.vector(id).expect("covered")).collect();
    if rows.len() < d_pca + 1 {
        return Err(Error::InvalidInput(format!(
            "PCA with {d_pca} components needs at least {} vectors, have {}",
            d_pca + 1,
            rows.len()
        )));
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in &rows {
        for (m, x) in mean.iter_mut().zip(r.iter()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);

    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for r in &rows {
        for i in 0..dim {
            let di = r[i] - mean[i];
            for j in i..dim {
                cov[(i, j)] += di * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov[(i, j)] / (n - 1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
            .then(a.cmp(&b))
    });
    let mut components = Vec::with_capacity(d_pca);
    let mut variances = Vec::with_capacity(d_pca);
    for &k in order.iter().take(d_pca) {
        let mut c: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let pivot = c
            .iter()
            .copied()
            .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            c.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(c);
        variances.push(eig.eigenvalues[k].max(0.0));
    }
    Ok(PcaProjector {
        mean,
        components,
        variances,
    })
}
