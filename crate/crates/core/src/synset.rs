//! Synonym graph over the expanded set, modularity, and Louvain clustering.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::joint::SynonymScorer;
use crate::store::{create, ordered, TermId, Vocabulary};

/// A move must improve the local gain by more than this to be taken.
const MOVE_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub weight: f64,
}

/// Undirected weighted graph. Edge endpoints index into `nodes`; each edge is
/// stored once with `u < v`, and there are no self-loops.
#[derive(Debug, Clone, PartialEq)]
pub struct SynonymGraph {
    nodes: Vec<TermId>,
    edges: Vec<Edge>,
}

impl SynonymGraph {
    /// Builds a graph, summing repeated edges. Weights must be finite and non-negative.
    pub fn new(nodes: Vec<TermId>, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let n = nodes.len();
        let mut merged: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (u, v, w) in edges {
            if u == v {
                return Err(Error::InvalidInput(format!("self-loop on node {u}")));
            }
            if u >= n || v >= n {
                return Err(Error::InvalidInput(format!("edge ({u}, {v}) out of range")));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidInput(format!("bad weight {w} on ({u}, {v})")));
            }
            *merged.entry((u.min(v), u.max(v))).or_default() += w;
        }
        Ok(Self {
            nodes,
            edges: merged
                .into_iter()
                .map(|((u, v), weight)| Edge { u, v, weight })
                .collect(),
        })
    }

    /// Graph over `n` anonymous nodes (ids `0..n`).
    pub fn with_nodes(n: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        Self::new((0..n).map(TermId::from).collect(), edges)
    }

    pub fn nodes(&self) -> &[TermId] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.weight).sum()
    }

    pub fn write_tsv(&self, path: &Path, vocab: &Vocabulary) -> Result<()> {
        let mut out = create(path)?;
        let io = |e| Error::io(path, e);
        for e in &self.edges {
            writeln!(
                out,
                "{}\t{}\t{}",
                vocab.surface(self.nodes[e.u]),
                vocab.surface(self.nodes[e.v]),
                e.weight
            )
            .map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

/// Graph over the expanded set with an edge wherever the class model scores a
/// pair at or above `edge_threshold`.
pub fn build_graph(entities: &[TermId], scorer: &SynonymScorer, edge_threshold: f64) -> Result<SynonymGraph> {
    let pairs: Vec<(usize, usize)> = (0..entities.len())
        .flat_map(|i| (i + 1..entities.len()).map(move |j| (i, j)))
        .collect();
    let weights = pairs
        .par_iter()
        .map(|&(i, j)| {
            let (a, b) = ordered(entities[i], entities[j]);
            scorer.probability(a, b)
        })
        .collect::<Result<Vec<_>>>()?;
    let edges = pairs
        .into_iter()
        .zip(weights)
        .filter(|&(_, w)| w >= edge_threshold)
        .map(|((i, j), w)| (i, j, w));
    SynonymGraph::new(entities.to_vec(), edges)
}

/// Community id per node; ids are dense and numbered by first appearance.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Partition {
    assignment: Vec<usize>,
}

impl Partition {
    pub fn from_assignment(raw: &[usize]) -> Self {
        let mut map = BTreeMap::new();
        let mut next = 0;
        let assignment = raw
            .iter()
            .map(|c| {
                *map.entry(*c).or_insert_with(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect();
        Self { assignment }
    }

    pub fn singletons(n: usize) -> Self {
        Self {
            assignment: (0..n).collect(),
        }
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn community_count(&self) -> usize {
        self.assignment.iter().max().map_or(0, |m| m + 1)
    }

    /// Node indices grouped by community, in community order.
    pub fn communities(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.community_count()];
        for (node, &c) in self.assignment.iter().enumerate() {
            groups[c].push(node);
        }
        groups
    }
}

/// Newman-Girvan modularity of a weighted partition. Zero for edgeless graphs.
pub fn modularity(g: &SynonymGraph, p: &Partition) -> Result<f64> {
    let n = g.node_count();
    if p.assignment.len() < n {
        return Err(Error::UncoveredNode(p.assignment.len()));
    }
    let m = g.total_weight();
    if m <= 0.0 {
        return Ok(0.0);
    }
    let k = p.community_count();
    let mut inside = vec![0.0; k];
    let mut degree = vec![0.0; k];
    for e in &g.edges {
        let (cu, cv) = (p.assignment[e.u], p.assignment[e.v]);
        if cu == cv {
            inside[cu] += e.weight;
        }
        degree[cu] += e.weight;
        degree[cv] += e.weight;
    }
    Ok((0..k)
        .map(|c| inside[c] / m - (degree[c] / (2.0 * m)).powi(2))
        .sum())
}

/// Louvain output with the modularity recorded after every local-moving sweep.
#[derive(Debug, Clone)]
pub struct LouvainResult {
    pub partition: Partition,
    pub modularity: f64,
    /// Modularity of the flattened partition after each sweep, starting with singletons.
    pub trace: Vec<f64>,
    pub levels: usize,
}

struct Level {
    adj: Vec<Vec<(usize, f64)>>,
    self_loops: Vec<f64>,
    degree: Vec<f64>,
}

impl Level {
    fn from_graph(g: &SynonymGraph) -> Self {
        let n = g.node_count();
        let mut adj = vec![Vec::new(); n];
        let mut degree = vec![0.0; n];
        for e in &g.edges {
            adj[e.u].push((e.v, e.weight));
            adj[e.v].push((e.u, e.weight));
            degree[e.u] += e.weight;
            degree[e.v] += e.weight;
        }
        Self {
            adj,
            self_loops: vec![0.0; n],
            degree,
        }
    }

    fn len(&self) -> usize {
        self.adj.len()
    }

    fn aggregate(&self, community: &[usize], count: usize) -> Self {
        let mut self_loops = vec![0.0; count];
        let mut between: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        let mut degree = vec![0.0; count];
        for i in 0..self.len() {
            let ci = community[i];
            self_loops[ci] += self.self_loops[i];
            degree[ci] += self.degree[i];
            for &(j, w) in &self.adj[i] {
                if i < j {
                    let cj = community[j];
                    if ci == cj {
                        self_loops[ci] += w;
                    } else {
                        *between.entry((ci.min(cj), ci.max(cj))).or_default() += w;
                    }
                }
            }
        }
        let mut adj = vec![Vec::new(); count];
        for ((a, b), w) in between {
            adj[a].push((b, w));
            adj[b].push((a, w));
        }
        Self {
            adj,
            self_loops,
            degree,
        }
    }
}

/// Two-phase Louvain (local moving, then aggregation) until no node moves.
pub fn louvain(g: &SynonymGraph, rng_seed: u64) -> Partition {
    louvain_with_trace(g, rng_seed).partition
}

pub fn louvain_with_trace(g: &SynonymGraph, rng_seed: u64) -> LouvainResult {
    let n = g.node_count();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    // membership of original nodes in current-level nodes
    let mut flat: Vec<usize> = (0..n).collect();
    let q0 = modularity(g, &Partition::singletons(n)).expect("covers all nodes");
    let mut trace = vec![q0];
    let m2: f64 = 2.0 * g.total_weight();
    let mut level = Level::from_graph(g);
    let mut levels = 0;
    if m2 > 0.0 {
        loop {
            levels += 1;
            let (community, moved) = local_moving(&level, m2, &mut rng, |comm| {
                let assignment: Vec<usize> = flat.iter().map(|&x| comm[x]).collect();
                trace.push(modularity(g, &Partition::from_assignment(&assignment)).expect("covered"));
            });
            if !moved {
                break;
            }
            let dense = Partition::from_assignment(&community);
            let count = dense.community_count();
            for x in flat.iter_mut() {
                *x = dense.assignment[*x];
            }
            level = level.aggregate(&dense.assignment, count);
        }
    }
    let partition = Partition::from_assignment(&flat);
    let q = modularity(g, &partition).expect("covered");
    LouvainResult {
        partition,
        modularity: q,
        trace,
        levels,
    }
}

/// Sweeps nodes in a shuffled order, moving each to the neighbouring community
/// with the largest modularity gain, until a sweep moves nothing. Calls
/// `on_sweep` with the current assignment after each sweep that moved a node.
fn local_moving(
    level: &Level,
    m2: f64,
    rng: &mut ChaCha8Rng,
    mut on_sweep: impl FnMut(&[usize]),
) -> (Vec<usize>, bool) {
    let n = level.len();
    let mut community: Vec<usize> = (0..n).collect();
    let mut total: Vec<f64> = level.degree.clone();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut any_move = false;
    let mut links: BTreeMap<usize, f64> = BTreeMap::new();
    loop {
        let mut moved = false;
        for &i in &order {
            let ci = community[i];
            let ki = level.degree[i];
            links.clear();
            for &(j, w) in &level.adj[i] {
                *links.entry(community[j]).or_default() += w;
            }
            total[ci] -= ki;
            let gain = |c: usize, w_ic: f64| w_ic - total[c] * ki / m2;
            let mut best = ci;
            let mut best_gain = gain(ci, links.get(&ci).copied().unwrap_or(0.0));
            for (&c, &w) in &links {
                let g = gain(c, w);
                if g > best_gain + MOVE_EPSILON {
                    best = c;
                    best_gain = g;
                }
            }
            total[best] += ki;
            if best != ci {
                community[i] = best;
                moved = true;
            }
        }
        if !moved {
            break;
        }
        any_move = true;
        on_sweep(&community);
    }
    (community, any_move)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Synset {
    pub class_name: String,
    pub members: Vec<TermId>,
}

/// One synset per community; `nodes[i]` is the term of graph node `i`.
pub fn extract_synsets(p: &Partition, nodes: &[TermId], class_name: &str) -> Result<Vec<Synset>> {
    if p.assignment.len() != nodes.len() {
        return Err(Error::UncoveredNode(p.assignment.len().min(nodes.len())));
    }
    Ok(p.communities()
        .into_iter()
        .filter(|c| !c.is_empty())
        .map(|c| Synset {
            class_name: class_name.to_string(),
            members: c.into_iter().map(|i| nodes[i]).collect(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynsetRecord {
    #[serde(rename = "class")]
    pub class_name: String,
    pub members: Vec<String>,
}

pub fn synset_records(synsets: &[Synset], vocab: &Vocabulary) -> Vec<SynsetRecord> {
    synsets
        .iter()
        .map(|s| SynsetRecord {
            class_name: s.class_name.clone(),
            members: s.members.iter().map(|&t| vocab.surface(t).to_string()).collect(),
        })
        .collect()
}

pub fn write_synsets_json(path: &Path, synsets: &[Synset], vocab: &Vocabulary) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, &synset_records(synsets, vocab)).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })?;
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clique(offset: usize, size: usize, w: f64) -> Vec<(usize, usize, f64)> {
        let mut e = Vec::new();
        for i in 0..size {
            for j in i + 1..size {
                e.push((offset + i, offset + j, w));
            }
        }
        e
    }

    #[test]
    fn modularity_closed_forms() {
        let mut edges = clique(0, 3, 1.0);
        edges.extend(clique(3, 3, 1.0));
        let g = SynonymGraph::with_nodes(6, edges).unwrap();
        let one = Partition::from_assignment(&[0; 6]);
        assert!(modularity(&g, &one).unwrap().abs() < 1e-15);
        let split = Partition::from_assignment(&[0, 0, 0, 1, 1, 1]);
        assert!((modularity(&g, &split).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(
            modularity(&g, &Partition::from_assignment(&[0, 0])),
            Err(Error::UncoveredNode(2))
        ));
    }

    #[test]
    fn louvain_small_cases() {
        let g = SynonymGraph::with_nodes(5, []).unwrap();
        assert_eq!(louvain(&g, 1).community_count(), 5);

        let g = SynonymGraph::with_nodes(3, clique(0, 3, 1.0)).unwrap();
        assert_eq!(louvain(&g, 1).community_count(), 1);

        let mut edges = clique(0, 4, 1.0);
        edges.extend(clique(4, 4, 1.0));
        edges.push((3, 4, 0.01));
        let g = SynonymGraph::with_nodes(8, edges).unwrap();
        for seed in 0..10 {
            let p = louvain(&g, seed);
            assert_eq!(p.assignment(), &[0, 0, 0, 0, 1, 1, 1, 1]);
        }
    }

    #[test]
    fn synsets_partition_the_set() {
        let nodes: Vec<TermId> = (10..15u32).map(TermId).collect();
        let p = Partition::from_assignment(&[2, 0, 2, 1, 0]);
        let s = extract_synsets(&p, &nodes, "c").unwrap();
        assert_eq!(s.len(), 3);
        let mut all: Vec<TermId> = s.iter().flat_map(|x| x.members.clone()).collect();
        all.sort();
        assert_eq!(all, nodes);
    }
}
