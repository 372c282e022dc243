mod common;

use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use synexpand::store::{
    fit_pca, generate_distant_supervision, load_embedding_space, load_seed_queries, load_vocabulary, read_pairs,
    write_embedding_space, write_pairs, write_vocabulary, EmbeddingSpace, TermId,
};
use synexpand::Error;

use common::{check_distant_rules, distant_fixture, random_vectors, toy_store};

#[test]
fn distant_supervision_matches_enumeration() {
    let (surfaces, kb, vectors) = distant_fixture();
    let (vocab, space) = toy_store(&surfaces, &kb, &vectors);
    for seed in 0..20 {
        check_distant_rules(&vocab, &space, 2, seed);
    }
    let ds = generate_distant_supervision(&vocab, &space, 2, 3).unwrap();
    assert_eq!(ds.positives.len(), 7);
    assert_eq!(ds.hard_shortfall, 0);
    assert_eq!(ds.hard_negatives.len(), 7);
    assert_eq!(ds.random_negatives.len(), 7);
}

#[test]
fn distant_supervision_fills_hard_shortfall_from_random_pool() {
    let (surfaces, kb, vectors) = distant_fixture();
    let (vocab, space) = toy_store(&surfaces, &kb, &vectors);
    check_distant_rules(&vocab, &space, 10, 9);
    let ds = generate_distant_supervision(&vocab, &space, 10, 9).unwrap();
    assert!(ds.hard_shortfall > 0);
}

#[test]
fn distant_supervision_is_seed_deterministic() {
    let (surfaces, kb, vectors) = distant_fixture();
    let (vocab, space) = toy_store(&surfaces, &kb, &vectors);
    let a = generate_distant_supervision(&vocab, &space, 2, 11).unwrap().pairs();
    let b = generate_distant_supervision(&vocab, &space, 2, 11).unwrap().pairs();
    assert_eq!(a, b);
}

#[test]
fn distant_supervision_threshold_is_strict() {
    // Integer norms make the cosine between the two Q1 surfaces exactly 0.5.
    let v = vec![
        vec![1.0, 1.0, 1.0, 1.0],
        vec![1.0, 1.0, 1.0, -1.0],
        vec![0.0, 0.0, 1.0, 0.0],
        vec![-1.0, 0.0, 0.0, 0.0],
    ];
    let (vocab, space) = toy_store(&["a", "b", "c", "d"], &[Some("Q1"), Some("Q1"), Some("Q2"), Some("Q3")], &v);
    assert_eq!(space.cosine(TermId(0), TermId(1)).unwrap(), 0.5);
    assert!(matches!(
        generate_distant_supervision(&vocab, &space, 1, 0),
        Err(Error::NoPositivePairs)
    ));
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let values = (0..n).map(|i| a[i][i]).collect();
    let vectors = (0..n).map(|j| (0..n).map(|i| v[i][j]).collect()).collect();
    (values, vectors)
}

#[test]
fn pca_matches_jacobi_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 50;
    let dim = 8;
    // Anisotropic data so the leading eigenvalues are well separated.
    let scales = [5.0, 3.0, 2.0, 1.0, 0.5, 0.4, 0.3, 0.2];
    let data: Vec<Vec<f64>> = random_vectors(&mut rng, n, dim)
        .into_iter()
        .map(|v| v.iter().zip(&scales).map(|(x, s)| x * s + 0.7).collect())
        .collect();
    let space = EmbeddingSpace::from_vectors(
        "x",
        dim,
        n,
        data.iter().enumerate().map(|(i, v)| (TermId(i as u32), v.clone())),
    )
    .unwrap();
    let pca = fit_pca(&space, 3).unwrap();

    let mean: Vec<f64> = (0..dim).map(|j| data.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mut cov = vec![vec![0.0; dim]; dim];
    for r in &data {
        for i in 0..dim {
            for j in 0..dim {
                cov[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]) / (n - 1) as f64;
            }
        }
    }
    let (values, vectors) = jacobi_eigen(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());

    for (c, &idx) in order.iter().take(3).enumerate() {
        assert!((pca.variances[c] - values[idx]).abs() < 1e-9 * values[idx].max(1.0));
        let oracle = &vectors[idx];
        let dot: f64 = pca.components[c].iter().zip(oracle).map(|(a, b)| a * b).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-9, "component {c} differs: |dot| = {}", dot.abs());
    }
    for (m, o) in pca.mean.iter().zip(&mean) {
        assert!((m - o).abs() < 1e-12);
    }
    // Projection is mean-centred dot products with the components.
    let z = pca.project(&data[0]);
    for c in 0..3 {
        let expect: f64 = (0..dim).map(|j| (data[0][j] - mean[j]) * pca.components[c][j]).sum();
        assert!((z[c] - expect).abs() < 1e-12);
    }
}

#[test]
fn vocabulary_and_embeddings_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (surfaces, kb, vectors) = distant_fixture();
    let (vocab, space) = toy_store(&surfaces, &kb, &vectors);
    let vp = dir.path().join("vocab.tsv");
    let ep = dir.path().join("emb.txt");
    write_vocabulary(&vp, &vocab).unwrap();
    write_embedding_space(&ep, &space, &vocab).unwrap();
    let vocab2 = load_vocabulary(&vp).unwrap();
    assert_eq!(vocab2.terms(), vocab.terms());
    let space2 = load_embedding_space(&ep, "toy", &vocab2).unwrap();
    for id in vocab.ids() {
        assert_eq!(space.vector(id), space2.vector(id));
    }

    let ds = generate_distant_supervision(&vocab, &space, 2, 1).unwrap().pairs();
    let pp = dir.path().join("pairs.tsv");
    write_pairs(&pp, &ds, &vocab).unwrap();
    assert_eq!(read_pairs(&pp, &vocab).unwrap(), ds);
}

#[test]
fn loaders_report_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let (surfaces, kb, vectors) = distant_fixture();
    let (vocab, _) = toy_store(&surfaces, &kb, &vectors);
    let ep = dir.path().join("bad.txt");
    fs::write(&ep, "2 3\nNYC 1 2 3\nLA 1 2\n").unwrap();
    match load_embedding_space(&ep, "bad", &vocab) {
        Err(Error::DimensionMismatch { line, expected, found, .. }) => {
            assert_eq!((line, expected, found), (3, 3, 2));
        }
        other => panic!("unexpected {other:?}"),
    }
    let sp = dir.path().join("seeds.json");
    fs::write(&sp, r#"[{"class_name": "cities", "synsets": [["NYC"], ["Atlantis"]]}]"#).unwrap();
    assert!(matches!(load_seed_queries(&sp, &vocab), Err(Error::UnknownSurface(_))));
}
