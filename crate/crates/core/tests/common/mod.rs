//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synexpand::store::{generate_distant_supervision, tokens, EmbeddingSpace, PairLabel, TermId, Vocabulary};

/// AP@k with precision recomputed from scratch at every relevant rank.
pub fn ap_at_k_oracle(ranked: &[u32], truth: &HashSet<u32>, k: usize) -> f64 {
    let top = &ranked[..k.min(ranked.len())];
    let mut sum = 0.0;
    for i in 0..top.len() {
        if truth.contains(&top[i]) {
            let correct = top[..=i].iter().filter(|x| truth.contains(x)).count();
            sum += correct as f64 / (i + 1) as f64;
        }
    }
    sum / k.min(truth.len()) as f64
}

/// Area under the PR step curve, evaluated at every distinct threshold.
pub fn average_precision_oracle(scores: &[(f64, bool)]) -> f64 {
    let pos = scores.iter().filter(|s| s.1).count() as f64;
    let mut thresholds: Vec<f64> = scores.iter().map(|s| s.0).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let predicted: Vec<&(f64, bool)> = scores.iter().filter(|s| s.0 >= t).collect();
        let tp = predicted.iter().filter(|s| s.1).count() as f64;
        let recall = tp / pos;
        ap += (recall - prev_recall) * tp / predicted.len() as f64;
        prev_recall = recall;
    }
    ap
}

/// Fraction of positive/negative pairs ranked correctly, ties counting half.
pub fn auc_oracle(scores: &[(f64, bool)]) -> f64 {
    let mut wins = 0.0;
    let mut total = 0.0;
    for p in scores.iter().filter(|s| s.1) {
        for n in scores.iter().filter(|s| !s.1) {
            total += 1.0;
            if p.0 > n.0 {
                wins += 1.0;
            } else if p.0 == n.0 {
                wins += 0.5;
            }
        }
    }
    wins / total
}

/// Harmonic mean of precision and recall at `probability >= threshold`.
pub fn f1_oracle(scores: &[(f64, bool)], threshold: f64) -> f64 {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    for &(p, y) in scores {
        match (p >= threshold, y) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            (false, false) => {}
        }
    }
    if tp == 0.0 {
        return 0.0;
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fn_);
    2.0 * precision * recall / (precision + recall)
}

/// `Q = 1/(2m) sum_ij [A_ij - k_i k_j / (2m)] delta(c_i, c_j)` from a dense matrix.
pub fn modularity_oracle(n: usize, edges: &[(usize, usize, f64)], community: &[usize]) -> f64 {
    let mut a = vec![vec![0.0; n]; n];
    for &(u, v, w) in edges {
        a[u][v] += w;
        a[v][u] += w;
    }
    let k: Vec<f64> = a.iter().map(|row| row.iter().sum()).collect();
    let two_m: f64 = k.iter().sum();
    if two_m == 0.0 {
        return 0.0;
    }
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            if community[i] == community[j] {
                q += a[i][j] - k[i] * k[j] / two_m;
            }
        }
    }
    q / two_m
}

/// Every set partition of `0..n` as a restricted growth string.
pub fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    fn grow(prefix: &mut Vec<usize>, n: usize, max: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        for c in 0..=max + 1 {
            prefix.push(c);
            grow(prefix, n, max.max(c), out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut prefix = vec![0];
    grow(&mut prefix, n, 0, &mut out);
    out
}

/// Maximum modularity over all partitions.
pub fn best_modularity(n: usize, edges: &[(usize, usize, f64)]) -> f64 {
    set_partitions(n)
        .iter()
        .map(|p| modularity_oracle(n, edges, p))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Fixed suite of 100 weighted graphs on 2..=8 nodes; the first is two
/// 4-cliques joined by a weak bridge.
pub fn louvain_suite() -> Vec<(usize, Vec<(usize, usize, f64)>)> {
    let mut suite = Vec::with_capacity(100);
    let mut bridge = Vec::new();
    for block in [0usize, 4] {
        for i in 0..4 {
            for j in i + 1..4 {
                bridge.push((block + i, block + j, 1.0));
            }
        }
    }
    bridge.push((3, 4, 0.01));
    suite.push((8, bridge));
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_601);
    while suite.len() < 100 {
        let n = rng.random_range(2..=8usize);
        let p: f64 = rng.random_range(0.2..0.8);
        let weighted = rng.random_bool(0.5);
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if rng.random_bool(p) {
                    let w = if weighted { rng.random_range(0.05..1.0) } else { 1.0 };
                    edges.push((u, v, w));
                }
            }
        }
        suite.push((n, edges));
    }
    suite
}

fn cosine_raw(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Set-expansion difficulty by full sort of every point's neighbours.
pub fn set_expansion_difficulty_oracle(vectors: &[Vec<f64>], class: &[usize], k: usize) -> f64 {
    let c = class.len() as f64;
    let mut total = 0.0;
    for &e in class {
        let mut order: Vec<(f64, usize)> = (0..vectors.len())
            .map(|j| (cosine_raw(&vectors[e], &vectors[j]), j))
            .collect();
        order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let top: HashSet<usize> = order.iter().take(k).map(|x| x.1).collect();
        let missing = class.iter().filter(|t| !top.contains(t)).count();
        total += missing as f64 / c;
    }
    total / c
}

/// Mean `1 - cosine` over within-synset pairs, from raw vectors.
pub fn semantic_difficulty_oracle(vectors: &[Vec<f64>], synsets: &[Vec<usize>]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0.0;
    for s in synsets {
        for (i, &a) in s.iter().enumerate() {
            for &b in &s[i + 1..] {
                sum += 1.0 - cosine_raw(&vectors[a], &vectors[b]);
                count += 1.0;
            }
        }
    }
    sum / count
}

/// Vocabulary of `surfaces` with KB ids, plus a space holding `vectors`.
pub fn toy_store(
    surfaces: &[&str],
    kb: &[Option<&str>],
    vectors: &[Vec<f64>],
) -> (Vocabulary, EmbeddingSpace) {
    let vocab = Vocabulary::from_entries(
        surfaces
            .iter()
            .zip(kb)
            .map(|(s, k)| (s.to_string(), 1u64, k.map(str::to_string))),
    )
    .unwrap();
    let dim = vectors[0].len();
    let space = EmbeddingSpace::from_vectors(
        "toy",
        dim,
        surfaces.len(),
        vectors.iter().enumerate().map(|(i, v)| (TermId(i as u32), v.clone())),
    )
    .unwrap();
    (vocab, space)
}

pub fn random_vectors(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

/// The planted 20-term vocabulary used by the distant-supervision checks:
/// five entities with 2 to 5 surfaces (some with a distant vector), plus
/// token-sharing distractors.
pub fn distant_fixture() -> (Vec<&'static str>, Vec<Option<&'static str>>, Vec<Vec<f64>>) {
    let surfaces = vec![
        "New York City", "NYC", "Big Apple", "New York",  // Q1; "New York" points away
        "Los Angeles", "LA",                             // Q2
        "San Francisco", "SF", "Frisco",                 // Q3; "Frisco" points away
        "New Jersey", "NJ",                              // Q4
        "York", "Angeles Forest", "San Diego", "New Delhi", "Jersey City",
        "City Hall", "Apple Inc", "Big Bear", "Delhi",
    ];
    let kb = vec![
        Some("Q1"), Some("Q1"), Some("Q1"), Some("Q1"),
        Some("Q2"), Some("Q2"),
        Some("Q3"), Some("Q3"), Some("Q3"),
        Some("Q4"), Some("Q4"),
        None, None, Some("Q5"), Some("Q6"), Some("Q7"),
        None, Some("Q8"), None, Some("Q6"),
    ];
    let axis = |i: usize, sign: f64| {
        let mut v = vec![0.05; 6];
        v[i] = sign;
        v
    };
    let vectors = vec![
        axis(0, 1.0), vec![0.9, 0.2, 0.0, 0.0, 0.0, 0.1], vec![0.8, 0.0, 0.3, 0.0, 0.0, 0.0], axis(0, -1.0),
        axis(1, 1.0), vec![0.1, 0.95, 0.0, 0.1, 0.0, 0.0],
        axis(2, 1.0), vec![0.0, 0.1, 0.9, 0.0, 0.2, 0.0], axis(2, -1.0),
        axis(3, 1.0), vec![0.0, 0.0, 0.1, 0.85, 0.0, 0.3],
        axis(4, 1.0), axis(5, 1.0), axis(4, -1.0), axis(5, -1.0), vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.5, 0.5, 0.0, 0.0, 0.0], vec![0.0, 0.0, 0.5, 0.5, 0.0, 0.0], vec![0.3, 0.0, 0.0, 0.0, 0.6, 0.0],
        vec![0.0, 0.2, 0.0, 0.0, 0.0, -0.7],
    ];
    (surfaces, kb, vectors)
}

/// A ranking of up to 50 distinct ids over a universe of 80, a non-empty truth
/// set, and a cutoff K.
pub fn random_ranking(rng: &mut ChaCha8Rng) -> (Vec<u32>, HashSet<u32>, usize) {
    use rand::seq::SliceRandom;
    let mut universe: Vec<u32> = (0..80).collect();
    universe.shuffle(rng);
    let len = rng.random_range(0..=50usize);
    let ranked = universe[..len].to_vec();
    universe.shuffle(rng);
    let truth_len = rng.random_range(1..=30usize);
    let truth = universe[..truth_len].iter().copied().collect();
    let k = rng.random_range(1..=60usize);
    (ranked, truth, k)
}

/// Up to 200 scored pairs with both labels present; scores are often
/// quantized so ties occur.
pub fn random_pairs(rng: &mut ChaCha8Rng) -> Vec<(f64, bool)> {
    let n = rng.random_range(2..=200usize);
    let levels = if rng.random_bool(0.5) { Some(rng.random_range(2..=10u32)) } else { None };
    let mut out: Vec<(f64, bool)> = (0..n)
        .map(|_| {
            let s: f64 = rng.random_range(0.0..1.0);
            let s = levels.map_or(s, |l| (s * f64::from(l)).floor() / f64::from(l));
            (s, rng.random_bool(0.4))
        })
        .collect();
    out[0].1 = true;
    out[1].1 = false;
    out
}

fn same_kb(vocab: &Vocabulary, a: TermId, b: TermId) -> bool {
    matches!((&vocab.term(a).kb_id, &vocab.term(b).kb_id), (Some(x), Some(y)) if x == y)
}

fn shares_token(vocab: &Vocabulary, a: TermId, b: TermId) -> bool {
    let ta: HashSet<String> = tokens(vocab.surface(a)).into_iter().collect();
    tokens(vocab.surface(b)).iter().any(|t| ta.contains(t))
}

/// Every rule of the distant-supervision mixture, checked by enumerating all pairs.
pub fn check_distant_rules(vocab: &Vocabulary, space: &EmbeddingSpace, neg_per_pos: usize, seed: u64) {
    let ds = generate_distant_supervision(vocab, space, neg_per_pos, seed).unwrap();
    let n = vocab.len();
    let mut expected_pos = BTreeSet::new();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (TermId(i as u32), TermId(j as u32));
            if same_kb(vocab, a, b) && space.cosine(a, b).unwrap() > 0.5 {
                expected_pos.insert((a, b));
            }
        }
    }
    let got_pos: BTreeSet<_> = ds.positives.iter().map(|p| p.key()).collect();
    assert_eq!(got_pos, expected_pos);
    assert!(ds.positives.iter().all(|p| p.label == PairLabel::Positive));

    let total = neg_per_pos * expected_pos.len();
    assert_eq!(ds.random_negatives.len() + ds.hard_negatives.len(), total);
    assert_eq!(ds.hard_negatives.len() + ds.hard_shortfall, total / 2);
    assert_eq!(ds.random_negatives.len(), total.div_ceil(2) + ds.hard_shortfall);

    let mut seen = HashSet::new();
    for p in ds.random_negatives.iter().chain(&ds.hard_negatives) {
        assert_eq!(p.label, PairLabel::Negative);
        assert!(p.a < p.b);
        assert!(!same_kb(vocab, p.a, p.b), "same-kb pair used as negative");
        assert!(!expected_pos.contains(&p.key()));
        assert!(seen.insert(p.key()), "duplicate negative");
    }
    for p in &ds.hard_negatives {
        assert!(shares_token(vocab, p.a, p.b));
    }
    // The hard pool is exhausted exactly when there is a shortfall.
    if ds.hard_shortfall > 0 {
        let pool = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (TermId(i as u32), TermId(j as u32))))
            .filter(|&(a, b)| !same_kb(vocab, a, b) && shares_token(vocab, a, b))
            .count();
        assert_eq!(ds.hard_negatives.len(), pool);
    }
}
