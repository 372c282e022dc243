//! Python bindings: string features, the boosted synonym model, metrics,
//! Louvain, the synthetic world generator and the command-line entry point.

use std::collections::HashSet;
use std::path::PathBuf;

use clap::Parser;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use synexpand::cli::{self, Cli};
use synexpand::eval::{self, PairScore};
use synexpand::gbdt::{self, BoostParams, GbdtModel};
use synexpand::synset::{self, SynonymGraph};
use synexpand::synthbench::WorldParams;
use synexpand::{joint, pairfeat, Error};

fn to_py(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

#[pyfunction]
fn edit_distance(a: &str, b: &str) -> usize {
    pairfeat::edit_distance(a, b)
}

#[pyfunction]
fn jaro_winkler(a: &str, b: &str) -> f64 {
    pairfeat::jaro_winkler(a, b)
}

/// The nine lexical pair features, in the order of `LEXICAL_NAMES`.
#[pyfunction]
fn lexical_features(a: &str, b: &str) -> Vec<f64> {
    pairfeat::lexical_features(a, b).to_vec()
}

#[pyfunction]
fn lexical_feature_names() -> Vec<&'static str> {
    pairfeat::LEXICAL_NAMES.to_vec()
}

#[pyfunction]
fn cosine_transforms(c: f64) -> Vec<f64> {
    pairfeat::cosine_transforms(c).to_vec()
}

#[pyfunction]
fn final_score(p_set: f64, sy: f64) -> f64 {
    joint::final_score(p_set, sy)
}

#[pyfunction]
fn ap_at_k(ranked: Vec<String>, truth: Vec<String>, k: usize) -> PyResult<f64> {
    let truth: HashSet<String> = truth.into_iter().collect();
    eval::ap_at_k(&ranked, &truth, k).map_err(to_py)
}

fn pair_scores(probabilities: &[f64], labels: &[bool]) -> PyResult<Vec<PairScore>> {
    if probabilities.len() != labels.len() {
        return Err(PyValueError::new_err("probabilities and labels differ in length"));
    }
    Ok(probabilities
        .iter()
        .zip(labels)
        .map(|(&probability, &label)| PairScore { probability, label })
        .collect())
}

#[pyfunction]
fn average_precision(probabilities: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    eval::average_precision(&pair_scores(&probabilities, &labels)?).map_err(to_py)
}

#[pyfunction]
fn auc(probabilities: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    eval::auc(&pair_scores(&probabilities, &labels)?).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (probabilities, labels, threshold=0.5))]
fn f1(probabilities: Vec<f64>, labels: Vec<bool>, threshold: f64) -> PyResult<f64> {
    eval::f1(&pair_scores(&probabilities, &labels)?, threshold).map_err(to_py)
}

/// Returns `(t, p, df)`.
#[pyfunction]
fn paired_t_test(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    let t = eval::paired_t_test(&a, &b).map_err(to_py)?;
    Ok((t.t, t.p, t.df))
}

/// Partitions a weighted graph on nodes `0..n`; returns the community of each
/// node and the modularity.
#[pyfunction]
#[pyo3(signature = (n, edges, seed=0))]
fn louvain(n: usize, edges: Vec<(usize, usize, f64)>, seed: u64) -> PyResult<(Vec<usize>, f64)> {
    let g = SynonymGraph::with_nodes(n, edges).map_err(to_py)?;
    let r = synset::louvain_with_trace(&g, seed);
    Ok((r.partition.assignment().to_vec(), r.modularity))
}

#[pyfunction]
fn modularity(n: usize, edges: Vec<(usize, usize, f64)>, assignment: Vec<usize>) -> PyResult<f64> {
    let g = SynonymGraph::with_nodes(n, edges).map_err(to_py)?;
    if assignment.len() != n {
        return Err(PyValueError::new_err("assignment must cover every node"));
    }
    synset::modularity(&g, &synset::Partition::from_assignment(&assignment)).map_err(to_py)
}

/// Gradient boosted trees with logistic loss.
#[pyclass(name = "GbdtModel")]
struct PyGbdtModel {
    inner: GbdtModel,
}

#[pymethods]
impl PyGbdtModel {
    #[staticmethod]
    #[pyo3(signature = (rows, labels, rounds=100, learning_rate=0.1, max_depth=5, min_split_gain=0.1, subsample=0.5, reg_lambda=1.0, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        rows: Vec<Vec<f64>>,
        labels: Vec<bool>,
        rounds: usize,
        learning_rate: f64,
        max_depth: usize,
        min_split_gain: f64,
        subsample: f64,
        reg_lambda: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let params = BoostParams {
            rounds,
            learning_rate,
            max_depth,
            min_split_gain,
            subsample,
            lambda: reg_lambda,
            rng_seed: seed,
        };
        gbdt::train(&rows, &labels, &params)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        GbdtModel::load(&path).map(|inner| Self { inner }).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn predict(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.predict(&x).map_err(to_py)
    }

    fn predict_many(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.inner.predict_many(&rows).map_err(to_py)
    }

    /// Returns a new model with `extra_trees` more trees; `self` is unchanged.
    #[pyo3(signature = (rows, labels, extra_trees=10))]
    fn fine_tune(&self, rows: Vec<Vec<f64>>, labels: Vec<bool>, extra_trees: usize) -> PyResult<Self> {
        gbdt::fine_tune(&self.inner, &rows, &labels, extra_trees, &BoostParams::default())
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    fn log_loss(&self, rows: Vec<Vec<f64>>, labels: Vec<bool>) -> PyResult<f64> {
        gbdt::log_loss(&self.inner, &rows, &labels).map_err(to_py)
    }

    #[getter]
    fn tree_count(&self) -> usize {
        self.inner.tree_count()
    }

    #[getter]
    fn feature_count(&self) -> usize {
        self.inner.feature_count
    }
}

/// Writes a planted world and its `config.json` into `out`; returns the config path.
#[pyfunction]
#[pyo3(signature = (out, seed=7, classes=5, entities_per_class=40, synonym_rate=0.3))]
fn synth(out: PathBuf, seed: u64, classes: usize, entities_per_class: usize, synonym_rate: f64) -> PyResult<PathBuf> {
    let params = WorldParams {
        seed,
        classes,
        entities_per_class,
        synonym_rate,
        ..WorldParams::default()
    };
    cli::cmd_synth(&out, &params).map_err(to_py)
}

/// Runs a command line (without the program name) and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    let argv = std::iter::once("synexpand".to_string()).chain(args);
    match Cli::try_parse_from(argv) {
        Ok(c) => {
            let result = cli::execute(c);
            if let Err(e) = &result {
                eprintln!("error: {e}");
            }
            cli::exit_code(&result)
        }
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                1
            } else {
                0
            }
        }
    }
}

#[pymodule]
fn synexpand_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(edit_distance, m)?)?;
    m.add_function(wrap_pyfunction!(jaro_winkler, m)?)?;
    m.add_function(wrap_pyfunction!(lexical_features, m)?)?;
    m.add_function(wrap_pyfunction!(lexical_feature_names, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_transforms, m)?)?;
    m.add_function(wrap_pyfunction!(final_score, m)?)?;
    m.add_function(wrap_pyfunction!(ap_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(f1, m)?)?;
    m.add_function(wrap_pyfunction!(paired_t_test, m)?)?;
    m.add_function(wrap_pyfunction!(louvain, m)?)?;
    m.add_function(wrap_pyfunction!(modularity, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_class::<PyGbdtModel>()?;
    Ok(())
}
