//! Gradient boosted regression trees for binary classification.
//!
//! Second-order boosting on the logistic loss: each round fits a tree to the
//! gradient/hessian pairs of the current margins, leaf weights are
//! `-G / (H + lambda)`, and a split survives pruning only if its gain reaches
//! `min_split_gain`. Split search is exact greedy over sorted feature values.
//!
//! Models are immutable. [`fine_tune`] returns a new model with extra trees
//! appended, which is how class-specific synonym models are derived from the
//! generic one.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::create;

pub const MODEL_FORMAT: &str = "synexpand-gbdt";
pub const MODEL_VERSION: u32 = 1;

/// Margins are clamped to this magnitude so probabilities stay inside (0, 1).
const MARGIN_LIMIT: f64 = 36.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostParams {
    pub rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    /// Minimum gain a split needs to survive pruning.
    pub min_split_gain: f64,
    /// Row sampling ratio per round, in (0, 1].
    pub subsample: f64,
    /// L2 regularization on leaf weights.
    pub lambda: f64,
    pub rng_seed: u64,
}

impl Default for BoostParams {
    fn default() -> Self {
        Self {
            rounds: 100,
            learning_rate: 0.1,
            max_depth: 5,
            min_split_gain: 0.1,
            subsample: 0.5,
            lambda: 1.0,
            rng_seed: 0,
        }
    }
}

impl BoostParams {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::Config("subsample must be in (0, 1]".into()));
        }
        if !(self.lambda >= 0.0) || !(self.min_split_gain >= 0.0) {
            return Err(Error::Config("lambda and min_split_gain must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        /// Rows with `x[feature] < threshold` go left.
        threshold: f64,
        left: usize,
        right: usize,
        gain: f64,
    },
    Leaf {
        value: f64,
    },
}

/// A regression tree stored as a pre-ordered node array; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
    pub max_depth: usize,
}

impl RegressionTree {
    pub fn leaf(value: f64) -> Self {
        Self {
            nodes: vec![Node::Leaf { value }],
            max_depth: 0,
        }
    }

    pub fn output(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => i = if x[*feature] < *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    fn validate(&self, feature_count: usize) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::CorruptModel("empty tree".into()));
        }
        let mut referenced = vec![false; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            match n {
                Node::Leaf { value } if !value.is_finite() => {
                    return Err(Error::CorruptModel(format!("non-finite leaf at node {i}")));
                }
                Node::Leaf { .. } => {}
                Node::Split {
                    feature,
                    left,
                    right,
                    threshold,
                    ..
                } => {
                    if *feature >= feature_count {
                        return Err(Error::CorruptModel(format!("feature {feature} out of range")));
                    }
                    if threshold.is_nan() {
                        return Err(Error::CorruptModel(format!("NaN threshold at node {i}")));
                    }
                    for &c in [left, right] {
                        if c <= i || c >= self.nodes.len() || referenced[c] {
                            return Err(Error::CorruptModel(format!("bad child {c} at node {i}")));
                        }
                        referenced[c] = true;
                    }
                }
            }
        }
        if referenced.iter().skip(1).any(|r| !r) {
            return Err(Error::CorruptModel("unreachable node".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbdtModel {
    pub trees: Vec<RegressionTree>,
    pub learning_rate: f64,
    /// Initial margin (log-odds).
    pub base_score: f64,
    pub feature_count: usize,
    rng_seed: u64,
    rng_word_pos: u128,
}

pub fn sigmoid(m: f64) -> f64 {
    1.0 / (1.0 + (-m.clamp(-MARGIN_LIMIT, MARGIN_LIMIT)).exp())
}

impl GbdtModel {
    /// A model with no trees.
    pub fn constant(base_score: f64, learning_rate: f64, feature_count: usize) -> Self {
        Self {
            trees: Vec::new(),
            learning_rate,
            base_score,
            feature_count,
            rng_seed: 0,
            rng_word_pos: 0,
        }
    }

    pub fn with_trees(mut self, trees: Vec<RegressionTree>) -> Self {
        self.trees = trees;
        self
    }

    pub fn tree_count(&self) -> usize {
        self.trees.len()
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.feature_count {
            return Err(Error::FeatureLength {
                expected: self.feature_count,
                found: x.len(),
            });
        }
        Ok(())
    }

    pub fn margin(&self, x: &[f64]) -> Result<f64> {
        self.check_len(x)?;
        Ok(self.margin_unchecked(x))
    }

    fn margin_unchecked(&self, x: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.output(x)).sum();
        self.base_score + self.learning_rate * sum
    }

    /// Probability of the positive class, strictly inside (0, 1).
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.margin(x).map(sigmoid)
    }

    pub fn predict_many(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        rows.iter().map(|r| self.predict(r)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            learning_rate: self.learning_rate,
            base_score: self.base_score,
            feature_count: self.feature_count,
            rng_seed: self.rng_seed,
            rng_word_pos: self.rng_word_pos.to_string(),
            trees: self.trees.clone(),
        };
        let mut out = create(path)?;
        serde_json::to_writer(&mut out, &file).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::CorruptModel(e.to_string()))?;
        if value.get("format").and_then(|f| f.as_str()) != Some(MODEL_FORMAT) {
            return Err(Error::CorruptModel("missing or unknown format tag".into()));
        }
        let version = value
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::CorruptModel("missing version".into()))?;
        if version != u64::from(MODEL_VERSION) {
            return Err(Error::ModelVersion {
                found: version as u32,
                expected: MODEL_VERSION,
            });
        }
        let file: ModelFile =
            serde_json::from_value(value).map_err(|e| Error::CorruptModel(e.to_string()))?;
        if !(file.learning_rate > 0.0 && file.base_score.is_finite()) {
            return Err(Error::CorruptModel("bad learning rate or base score".into()));
        }
        for t in &file.trees {
            t.validate(file.feature_count)?;
        }
        Ok(Self {
            trees: file.trees,
            learning_rate: file.learning_rate,
            base_score: file.base_score,
            feature_count: file.feature_count,
            rng_seed: file.rng_seed,
            rng_word_pos: file
                .rng_word_pos
                .parse()
                .map_err(|_| Error::CorruptModel("bad rng position".into()))?,
        })
    }

    fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }
}

/// On-disk JSON schema of a model.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    learning_rate: f64,
    base_score: f64,
    feature_count: usize,
    rng_seed: u64,
    /// Position in the ChaCha8 stream, so fine-tuning continues it.
    rng_word_pos: String,
    trees: Vec<RegressionTree>,
}

fn validate_examples(rows: &[Vec<f64>], labels: &[bool], feature_count: Option<usize>) -> Result<usize> {
    if rows.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} feature rows but {} labels",
            rows.len(),
            labels.len()
        )));
    }
    let Some(first) = rows.first() else {
        return Err(Error::SingleClass);
    };
    let width = feature_count.unwrap_or(first.len());
    for (r, row) in rows.iter().enumerate() {
        if row.len() != width {
            return Err(Error::FeatureLength {
                expected: width,
                found: row.len(),
            });
        }
        if let Some(c) = row.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteFeature { row: r, col: c });
        }
    }
    if !(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l)) {
        return Err(Error::SingleClass);
    }
    Ok(width)
}

/// Mean logistic loss of a model on labeled rows.
pub fn log_loss(model: &GbdtModel, rows: &[Vec<f64>], labels: &[bool]) -> Result<f64> {
    let mut total = 0.0;
    for (x, &y) in rows.iter().zip(labels) {
        total += logistic_loss(model.margin(x)?, y);
    }
    Ok(total / rows.len().max(1) as f64)
}

fn logistic_loss(margin: f64, y: bool) -> f64 {
    // log(1 + exp(-s)) with s the signed margin, computed stably
    let s = if y { margin } else { -margin };
    if s > 0.0 {
        (-s).exp().ln_1p()
    } else {
        -s + s.exp().ln_1p()
    }
}

/// Trains a model from scratch for `params.rounds` rounds.
pub fn train(rows: &[Vec<f64>], labels: &[bool], params: &BoostParams) -> Result<GbdtModel> {
    params.validate()?;
    if params.rounds == 0 {
        return Err(Error::Config("rounds must be >= 1".into()));
    }
    let width = validate_examples(rows, labels, None)?;
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let rate = pos / labels.len() as f64;
    let model = GbdtModel {
        trees: Vec::new(),
        learning_rate: params.learning_rate,
        base_score: (rate / (1.0 - rate)).ln(),
        feature_count: width,
        rng_seed: params.rng_seed,
        rng_word_pos: 0,
    };
    Ok(boost(model, rows, labels, params.rounds, params))
}

/// Returns `model` with exactly `extra_trees` more trees fit to its residuals on
/// the given examples. The input model is untouched. Appended trees share the
/// model's learning rate; tree shape parameters come from `params`, and row
/// sampling continues the random stream stored in the model.
pub fn fine_tune(
    model: &GbdtModel,
    rows: &[Vec<f64>],
    labels: &[bool],
    extra_trees: usize,
    params: &BoostParams,
) -> Result<GbdtModel> {
    params.validate()?;
    validate_examples(rows, labels, Some(model.feature_count))?;
    Ok(boost(model.clone(), rows, labels, extra_trees, params))
}

fn boost(
    mut model: GbdtModel,
    rows: &[Vec<f64>],
    labels: &[bool],
    rounds: usize,
    params: &BoostParams,
) -> GbdtModel {
    let n = rows.len();
    let mut rng = model.rng();
    // Same accumulation order as the rounds below.
    let mut margins: Vec<f64> = rows
        .iter()
        .map(|x| {
            model
                .trees
                .iter()
                .fold(model.base_score, |m, t| m + model.learning_rate * t.output(x))
        })
        .collect();
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    for _ in 0..rounds {
        for i in 0..n {
            let p = sigmoid(margins[i]);
            grad[i] = p - f64::from(u8::from(labels[i]));
            hess[i] = (p * (1.0 - p)).max(1e-16);
        }
        let sample: Vec<usize> = if params.subsample >= 1.0 {
            (0..n).collect()
        } else {
            let mut s: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() < params.subsample).collect();
            if s.is_empty() {
                s.push(rng.random_range(0..n));
            }
            s
        };
        let tree = TreeBuilder {
            rows,
            grad: &grad,
            hess: &hess,
            params,
            width: model.feature_count,
        }
        .build(sample);
        for (m, x) in margins.iter_mut().zip(rows) {
            *m += model.learning_rate * tree.output(x);
        }
        model.trees.push(tree);
    }
    model.rng_word_pos = rng.get_word_pos();
    model
}

struct TreeBuilder<'a> {
    rows: &'a [Vec<f64>],
    grad: &'a [f64],
    hess: &'a [f64],
    params: &'a BoostParams,
    width: usize,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl TreeBuilder<'_> {
    fn build(&self, sample: Vec<usize>) -> RegressionTree {
        let mut nodes = Vec::new();
        self.grow(sample, 0, &mut nodes);
        RegressionTree {
            nodes,
            max_depth: self.params.max_depth,
        }
    }

    fn leaf_value(&self, g: f64, h: f64) -> f64 {
        -g / (h + self.params.lambda)
    }

    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.params.lambda)
    }

    /// Grows a subtree in pre-order and returns its root index. Splits are
    /// taken whenever some split has non-negative gain; a split whose children
    /// both end up as leaves is collapsed again if its gain is below
    /// `min_split_gain`.
    fn grow(&self, idx: Vec<usize>, depth: usize, nodes: &mut Vec<Node>) -> usize {
        let g: f64 = idx.iter().map(|&i| self.grad[i]).sum();
        let h: f64 = idx.iter().map(|&i| self.hess[i]).sum();
        let me = nodes.len();
        nodes.push(Node::Leaf {
            value: self.leaf_value(g, h),
        });
        if depth >= self.params.max_depth || idx.len() < 2 {
            return me;
        }
        let Some(best) = self.best_split(&idx, g, h) else {
            return me;
        };
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = idx
            .into_iter()
            .partition(|&i| self.rows[i][best.feature] < best.threshold);
        let left = self.grow(left_idx, depth + 1, nodes);
        let right = self.grow(right_idx, depth + 1, nodes);
        let children_are_leaves =
            matches!(nodes[left], Node::Leaf { .. }) && matches!(nodes[right], Node::Leaf { .. });
        if children_are_leaves && best.gain < self.params.min_split_gain {
            nodes.truncate(me + 1);
            return me;
        }
        nodes[me] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
            gain: best.gain,
        };
        me
    }

    fn best_split(&self, idx: &[usize], g: f64, h: f64) -> Option<BestSplit> {
        let parent = self.score(g, h);
        let mut best: Option<BestSplit> = None;
        let mut order = idx.to_vec();
        for f in 0..self.width {
            order.sort_by(|&a, &b| {
                self.rows[a][f]
                    .partial_cmp(&self.rows[b][f])
                    .expect("finite features")
                    .then(a.cmp(&b))
            });
            let mut gl = 0.0;
            let mut hl = 0.0;
            for k in 0..order.len() - 1 {
                let i = order[k];
                gl += self.grad[i];
                hl += self.hess[i];
                let lo = self.rows[i][f];
                let hi = self.rows[order[k + 1]][f];
                if lo == hi {
                    continue;
                }
                let gain = 0.5 * (self.score(gl, hl) + self.score(g - gl, h - hl) - parent);
                if gain >= 0.0 && best.as_ref().is_none_or(|b| gain > b.gain) {
                    let mid = lo + (hi - lo) / 2.0;
                    let threshold = if mid > lo && mid <= hi { mid } else { hi };
                    best = Some(BestSplit {
                        feature: f,
                        threshold,
                        gain,
                    });
                }
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xor() -> (Vec<Vec<f64>>, Vec<bool>) {
        (
            vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]],
            vec![false, false, true, true],
        )
    }

    #[test]
    fn xor_at_depth_two() {
        let (x, y) = xor();
        let params = BoostParams {
            rounds: 10,
            max_depth: 2,
            subsample: 1.0,
            ..Default::default()
        };
        let m = train(&x, &y, &params).unwrap();
        assert_eq!(m.tree_count(), 10);
        for (row, &label) in x.iter().zip(&y) {
            assert_eq!(m.predict(row).unwrap() > 0.5, label);
        }
    }

    #[test]
    fn single_class_and_nan_rejected() {
        let x = vec![vec![0.0], vec![1.0]];
        assert!(matches!(
            train(&x, &[true, true], &BoostParams::default()),
            Err(Error::SingleClass)
        ));
        let x = vec![vec![0.0], vec![f64::NAN]];
        assert!(matches!(
            train(&x, &[true, false], &BoostParams::default()),
            Err(Error::NonFiniteFeature { row: 1, col: 0 })
        ));
    }

    #[test]
    fn constant_models() {
        let m = GbdtModel::constant(0.0, 0.1, 3);
        assert_eq!(m.predict(&[1.0, 2.0, 3.0]).unwrap(), 0.5);
        assert!(matches!(m.predict(&[1.0]), Err(Error::FeatureLength { .. })));
        let v = 0.7;
        let m = GbdtModel::constant(0.0, 1.0, 1).with_trees(vec![RegressionTree::leaf(v)]);
        assert_eq!(m.predict(&[5.0]).unwrap(), 1.0 / (1.0 + (-v).exp()));
    }

    #[test]
    fn predictions_stay_open_interval() {
        let m = GbdtModel::constant(1e6, 1.0, 1);
        let p = m.predict(&[0.0]).unwrap();
        assert!(p < 1.0 && p > 0.0);
        let m = GbdtModel::constant(-1e6, 1.0, 1);
        assert!(m.predict(&[0.0]).unwrap() > 0.0);
    }

    #[test]
    fn fine_tune_zero_trees_is_identity() {
        let (x, y) = xor();
        let m = train(&x, &y, &BoostParams { rounds: 3, ..Default::default() }).unwrap();
        let t = fine_tune(&m, &x, &y, 0, &BoostParams::default()).unwrap();
        assert_eq!(t.tree_count(), 3);
        for r in &x {
            assert_eq!(m.predict(r).unwrap().to_bits(), t.predict(r).unwrap().to_bits());
        }
    }

    #[test]
    fn corrupt_and_versioned_files() {
        assert!(matches!(GbdtModel::from_json("{\"format\":\"synexpand-gbdt\",\"ver"), Err(Error::CorruptModel(_))));
        let bad = r#"{"format":"synexpand-gbdt","version":9,"learning_rate":0.1,"base_score":0,"feature_count":1,"rng_seed":0,"rng_word_pos":"0","trees":[]}"#;
        assert!(matches!(GbdtModel::from_json(bad), Err(Error::ModelVersion { found: 9, .. })));
        let cyclic = r#"{"format":"synexpand-gbdt","version":1,"learning_rate":0.1,"base_score":0,"feature_count":1,"rng_seed":0,"rng_word_pos":"0",
            "trees":[{"max_depth":1,"nodes":[{"split":{"feature":0,"threshold":0.5,"left":0,"right":1,"gain":1.0}},{"leaf":{"value":1.0}}]}]}"#;
        assert!(matches!(GbdtModel::from_json(cyclic), Err(Error::CorruptModel(_))));
    }
}
