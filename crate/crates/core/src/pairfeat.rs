//! Pair features for the synonym model.
//!
//! Column layout of a [`PairFeatureVector`] (also the TSV export order):
//!
//! | offset | columns |
//! |---|---|
//! | 0..9 | `is_prefix, is_initial, edit_distance, jaro_winkler, chars_in_common, tokens_in_common, token_count_diff, initial_edit_distance, longest_token_edit_distance` |
//! | 9.. | per semantic space: `cos, inv_cos, sqrt_cos, sq_cos` |
//! | tail | `pca_0 .. pca_{d-1}`: elementwise product of the PCA-reduced vectors |
//!
//! Character-level measures (edit distance, Jaro-Winkler, shared characters)
//! are case-sensitive. Prefix, initial and token measures compare lowercased text.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{create, EmbeddingBag, PcaProjector, TermId, Vocabulary};

pub const LEXICAL_FEATURES: usize = 9;
pub const SEMANTIC_PER_SPACE: usize = 4;

pub const LEXICAL_NAMES: [&str; LEXICAL_FEATURES] = [
    "is_prefix",
    "is_initial",
    "edit_distance",
    "jaro_winkler",
    "chars_in_common",
    "tokens_in_common",
    "token_count_diff",
    "initial_edit_distance",
    "longest_token_edit_distance",
];

/// Lower clamp on cosine before taking its reciprocal.
pub const RECIPROCAL_EPSILON: f64 = 1e-3;

const WINKLER_SCALE: f64 = 0.1;
const WINKLER_PREFIX_CAP: usize = 4;

/// Levenshtein distance over Unicode scalar values.
pub fn edit_distance(s1: &str, s2: &str) -> usize {
    let a: Vec<char> = s1.chars().collect();
    let b: Vec<char> = s2.chars().collect();
    levenshtein(&a, &b)
}

fn levenshtein(a: &[char], b: &[char]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Jaro similarity with a match window of `max(|a|, |b|) / 2`.
pub fn jaro(s1: &str, s2: &str) -> f64 {
    let a: Vec<char> = s1.chars().collect();
    let b: Vec<char> = s2.chars().collect();
    jaro_chars(&a, &b)
}

fn jaro_chars(a: &[char], b: &[char]) -> f64 {
    // Evaluate in a canonical order so the result is bit-symmetric.
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let window = a.len().max(b.len()) / 2;
    let mut a_matched = vec![false; a.len()];
    let mut b_matched = vec![false; b.len()];
    let mut matches = 0usize;
    for (i, ca) in a.iter().enumerate() {
        let lo = i.saturating_sub(window);
        let hi = (i + window + 1).min(b.len());
        for j in lo..hi {
            if !b_matched[j] && b[j] == *ca {
                a_matched[i] = true;
                b_matched[j] = true;
                matches += 1;
                break;
            }
        }
    }
    if matches == 0 {
        return 0.0;
    }
    let mut half_transpositions = 0usize;
    let mut bj = b_matched.iter().enumerate().filter(|(_, &m)| m).map(|(j, _)| b[j]);
    for (i, _) in a_matched.iter().enumerate().filter(|(_, &m)| m) {
        if Some(a[i]) != bj.next() {
            half_transpositions += 1;
        }
    }
    let m = matches as f64;
    let t = half_transpositions as f64 / 2.0;
    (m / a.len() as f64 + m / b.len() as f64 + (m - t) / m) / 3.0
}

/// Jaro-Winkler similarity (prefix scale 0.1, prefix length capped at 4).
pub fn jaro_winkler(s1: &str, s2: &str) -> f64 {
    let a: Vec<char> = s1.chars().collect();
    let b: Vec<char> = s2.chars().collect();
    jaro_winkler_chars(&a, &b)
}

fn jaro_winkler_chars(a: &[char], b: &[char]) -> f64 {
    let j = jaro_chars(a, b);
    let prefix = a
        .iter()
        .zip(b)
        .take(WINKLER_PREFIX_CAP)
        .take_while(|(x, y)| x == y)
        .count();
    (j + prefix as f64 * WINKLER_SCALE * (1.0 - j)).clamp(0.0, 1.0)
}

/// Precomputed views of one surface form.
#[derive(Debug, Clone)]
pub struct SurfaceInfo {
    chars: Vec<char>,
    lower: String,
    char_set: HashSet<char>,
    tokens: Vec<String>,
    initials: Vec<char>,
    longest_token: Vec<char>,
}

impl SurfaceInfo {
    pub fn new(surface: &str) -> Self {
        let lower = surface.to_lowercase();
        let tokens: Vec<String> = lower.split_whitespace().map(String::from).collect();
        let initials = tokens.iter().filter_map(|t| t.chars().next()).collect();
        let mut longest: &str = "";
        for t in &tokens {
            if t.chars().count() > longest.chars().count() {
                longest = t;
            }
        }
        Self {
            chars: surface.chars().collect(),
            char_set: surface.chars().collect(),
            longest_token: longest.chars().collect(),
            lower,
            tokens,
            initials,
        }
    }
}

/// The nine lexical features, in the documented column order.
pub fn lexical_features(s1: &str, s2: &str) -> [f64; LEXICAL_FEATURES] {
    lexical_from_info(&SurfaceInfo::new(s1), &SurfaceInfo::new(s2))
}

pub fn lexical_from_info(x: &SurfaceInfo, y: &SurfaceInfo) -> [f64; LEXICAL_FEATURES] {
    let is_prefix = x.lower.starts_with(&y.lower) || y.lower.starts_with(&x.lower);
    let x_initials: String = x.initials.iter().collect();
    let y_initials: String = y.initials.iter().collect();
    let is_initial = x.lower == y_initials || y.lower == x_initials;
    let chars_in_common = x.char_set.intersection(&y.char_set).count();
    let x_tokens: HashSet<&str> = x.tokens.iter().map(String::as_str).collect();
    let y_tokens: HashSet<&str> = y.tokens.iter().map(String::as_str).collect();
    let tokens_in_common = x_tokens.intersection(&y_tokens).count();
    [
        f64::from(u8::from(is_prefix)),
        f64::from(u8::from(is_initial)),
        levenshtein(&x.chars, &y.chars) as f64,
        jaro_winkler_chars(&x.chars, &y.chars),
        chars_in_common as f64,
        tokens_in_common as f64,
        x.tokens.len().abs_diff(y.tokens.len()) as f64,
        levenshtein(&x.initials, &y.initials) as f64,
        levenshtein(&x.longest_token, &y.longest_token) as f64,
    ]
}

/// `[c, 1/c, sqrt(c), c^2]` with the reciprocal clamped to `[1e-3, 1]` and the
/// root to `[0, 1]`; `c` itself and its square use the raw cosine.
pub fn cosine_transforms(c: f64) -> [f64; SEMANTIC_PER_SPACE] {
    [
        c,
        1.0 / c.clamp(RECIPROCAL_EPSILON, 1.0),
        c.clamp(0.0, 1.0).sqrt(),
        c * c,
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairFeatureVector {
    pub lexical: [f64; LEXICAL_FEATURES],
    pub semantic: Vec<f64>,
    pub pca_product: Vec<f64>,
}

impl PairFeatureVector {
    pub fn len(&self) -> usize {
        LEXICAL_FEATURES + self.semantic.len() + self.pca_product.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.lexical);
        v.extend_from_slice(&self.semantic);
        v.extend_from_slice(&self.pca_product);
        v
    }
}

/// Which spaces contribute cosine features.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticSpaces {
    #[default]
    First,
    All,
    Named(Vec<String>),
}

impl SemanticSpaces {
    pub fn resolve(&self, bag: &EmbeddingBag) -> Result<Vec<usize>> {
        match self {
            SemanticSpaces::First => Ok(vec![0]),
            SemanticSpaces::All => Ok((0..bag.len()).collect()),
            SemanticSpaces::Named(names) => {
                if names.is_empty() {
                    return Err(Error::Config("semantic space list is empty".into()));
                }
                names
                    .iter()
                    .map(|n| {
                        bag.position(n)
                            .ok_or_else(|| Error::Config(format!("unknown embedding space {n:?}")))
                    })
                    .collect()
            }
        }
    }
}

/// Everything needed to featurize term pairs, with per-term caches.
#[derive(Debug)]
pub struct FeatureContext<'a> {
    vocab: &'a Vocabulary,
    bag: &'a EmbeddingBag,
    semantic: Vec<usize>,
    pca_space: usize,
    surfaces: Vec<SurfaceInfo>,
    reduced: Vec<Option<Vec<f64>>>,
}

impl<'a> FeatureContext<'a> {
    /// `pca_space` is the bag index the projector was fit on.
    pub fn new(
        vocab: &'a Vocabulary,
        bag: &'a EmbeddingBag,
        semantic: Vec<usize>,
        pca: &PcaProjector,
        pca_space: usize,
    ) -> Result<Self> {
        if semantic.iter().any(|&s| s >= bag.len()) || pca_space >= bag.len() {
            return Err(Error::Config("semantic space index out of range".into()));
        }
        let space = bag.space(pca_space);
        if space.dim() != pca.dim() {
            return Err(Error::Config(format!(
                "PCA projector has dim {}, space {:?} has dim {}",
                pca.dim(),
                space.name(),
                space.dim()
            )));
        }
        let surfaces = vocab.terms().iter().map(|t| SurfaceInfo::new(&t.surface)).collect();
        let reduced = vocab
            .ids()
            .map(|id| space.vector(id).map(|v| pca.project(v)))
            .collect();
        Ok(Self {
            vocab,
            bag,
            semantic,
            pca_space,
            surfaces,
            reduced,
        })
    }

    pub fn vocab(&self) -> &'a Vocabulary {
        self.vocab
    }

    pub fn bag(&self) -> &'a EmbeddingBag {
        self.bag
    }

    pub fn semantic_spaces(&self) -> &[usize] {
        &self.semantic
    }

    pub fn pca_dim(&self) -> usize {
        self.reduced.iter().flatten().next().map_or(0, Vec::len)
    }

    pub fn feature_len(&self) -> usize {
        LEXICAL_FEATURES + SEMANTIC_PER_SPACE * self.semantic.len() + self.pca_dim()
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names: Vec<String> = LEXICAL_NAMES.iter().map(|s| s.to_string()).collect();
        for &s in &self.semantic {
            let n = self.bag.space(s).name();
            for t in ["cos", "inv_cos", "sqrt_cos", "sq_cos"] {
                names.push(format!("{n}.{t}"));
            }
        }
        names.extend((0..self.pca_dim()).map(|i| format!("pca_{i}")));
        names
    }

    /// Whether the term can be featurized.
    pub fn supports(&self, id: TermId) -> bool {
        self.semantic.iter().all(|&s| self.bag.space(s).contains(id))
            && self.reduced[id.index()].is_some()
    }

    fn missing(&self, id: TermId, space: usize) -> Error {
        Error::MissingVector {
            term: self.vocab.surface(id).to_string(),
            space: self.bag.space(space).name().to_string(),
        }
    }

    pub fn semantic_features(&self, a: TermId, b: TermId) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(SEMANTIC_PER_SPACE * self.semantic.len());
        for &s in &self.semantic {
            let space = self.bag.space(s);
            if !space.contains(a) {
                return Err(self.missing(a, s));
            }
            let c = space.cosine(a, b).ok_or_else(|| self.missing(b, s))?;
            out.extend_from_slice(&cosine_transforms(c));
        }
        Ok(out)
    }

    pub fn pca_product(&self, a: TermId, b: TermId) -> Result<Vec<f64>> {
        let ra = self.reduced[a.index()].as_ref().ok_or_else(|| self.missing(a, self.pca_space))?;
        let rb = self.reduced[b.index()].as_ref().ok_or_else(|| self.missing(b, self.pca_space))?;
        Ok(ra.iter().zip(rb).map(|(x, y)| x * y).collect())
    }

    pub fn pair_features(&self, a: TermId, b: TermId) -> Result<PairFeatureVector> {
        Ok(PairFeatureVector {
            lexical: lexical_from_info(&self.surfaces[a.index()], &self.surfaces[b.index()]),
            semantic: self.semantic_features(a, b)?,
            pca_product: self.pca_product(a, b)?,
        })
    }

    pub fn pair_vector(&self, a: TermId, b: TermId) -> Result<Vec<f64>> {
        self.pair_features(a, b).map(|f| f.to_vec())
    }

    /// Writes `a<TAB>b<TAB>columns...` with a header row.
    pub fn write_tsv(&self, path: &Path, pairs: &[(TermId, TermId)]) -> Result<()> {
        let mut out = create(path)?;
        let io = |e| Error::io(path, e);
        writeln!(out, "a\tb\t{}", self.column_names().join("\t")).map_err(io)?;
        for &(a, b) in pairs {
            let v = self.pair_vector(a, b)?;
            write!(out, "{}\t{}", self.vocab.surface(a), self.vocab.surface(b)).map_err(io)?;
            for x in v {
                write!(out, "\t{x}").map_err(io)?;
            }
            writeln!(out).map_err(io)?;
        }
        out.flush().map_err(io)
    }
}
