use ldla_core::atlas::ZoneRegistry;
use ldla_core::data::{generate_synthetic_corpus, SyntheticCorpusConfig};
use ldla_core::evaluation::*;
use ldla_core::LdlaError;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn max_diff(a: &FeatureStats, b: &FeatureStats) -> f64 {
    let m = (&a.mu - &b.mu).abs().max();
    let s = (&a.sigma - &b.sigma).abs().max();
    m.max(s)
}

#[test]
fn monte_carlo_mean_of_unit_gaussians() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 10_000;
    let feats: Vec<Vec<f64>> = (0..n).map(|_| (0..5).map(|_| gaussian(&mut rng)).collect()).collect();
    let s = stats_from_features(&feats).unwrap();
    let bound = 4.0 / (n as f64).sqrt();
    assert!(s.mu.iter().all(|m| m.abs() < bound), "{:?}", s.mu);
    for i in 0..5 {
        assert!((s.sigma[(i, i)] - 1.0).abs() < 0.06);
    }
}

#[test]
fn stats_are_order_insensitive_and_merge_associatively() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut feats: Vec<Vec<f64>> = (0..500)
        .map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect();
    let a = stats_from_features(&feats).unwrap();
    feats.shuffle(&mut rng);
    let b = stats_from_features(&feats).unwrap();
    assert!(max_diff(&a, &b) < 1e-10);

    let shards: Vec<StatsAccumulator> = feats
        .chunks(77)
        .map(|c| {
            let mut acc = StatsAccumulator::new(4);
            for f in c {
                acc.push(f).unwrap();
            }
            acc
        })
        .collect();
    let mut fwd = StatsAccumulator::new(4);
    for s in &shards {
        fwd.merge(s).unwrap();
    }
    let mut rev = StatsAccumulator::new(4);
    for s in shards.iter().rev() {
        rev.merge(s).unwrap();
    }
    assert!(max_diff(&fwd.finish().unwrap(), &a) < 1e-10);
    assert!(max_diff(&rev.finish().unwrap(), &a) < 1e-10);
}

/// Samples `n` points of `N(mu, L L^T)`.
fn population(rng: &mut ChaCha8Rng, n: usize, mu: &[f64], l: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let z = DVector::from_iterator(mu.len(), (0..mu.len()).map(|_| gaussian(rng)));
            let x = l * z + DVector::from_column_slice(mu);
            x.iter().copied().collect()
        })
        .collect()
}

/// Closed-form distance between Gaussians with commuting (diagonal) covariances.
fn diagonal_distance(ma: &[f64], va: &[f64], mb: &[f64], vb: &[f64]) -> f64 {
    (0..ma.len())
        .map(|i| (ma[i] - mb[i]).powi(2) + va[i] + vb[i] - 2.0 * (va[i] * vb[i]).sqrt())
        .sum()
}

#[test]
fn disjoint_gaussian_populations_match_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (ma, mb) = ([0.0, 1.0, 0.0], [2.0, -1.0, 0.5]);
    let (va, vb): ([f64; 3], [f64; 3]) = ([1.0, 0.5, 2.0], [0.25, 1.5, 2.0]);
    let la = DMatrix::from_diagonal(&DVector::from_iterator(3, va.iter().map(|v| v.sqrt())));
    let lb = DMatrix::from_diagonal(&DVector::from_iterator(3, vb.iter().map(|v| v.sqrt())));
    let mut feats = population(&mut rng, 4000, &ma, &la);
    let fb = population(&mut rng, 4000, &mb, &lb);
    let sa = stats_from_features(&feats).unwrap();
    let sb = stats_from_features(&fb).unwrap();
    let want = diagonal_distance(&ma, &va, &mb, &vb);
    let got = frechet_distance(&sa, &sb).unwrap();
    assert!((got - want).abs() / want < 0.1, "{got} vs {want}");

    // A split of the pooled set compares two halves of one population.
    feats.extend(fb);
    let split = split_reference_fid_features(&feats, &mut rng).unwrap();
    assert!(split < 0.1 * want, "{split}");
}

#[test]
fn split_reference_of_identical_samples_is_zero() {
    let feats = vec![vec![0.3, 0.1, 0.9]; 10];
    let d = split_reference_fid_features(&feats, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(d.abs() < 1e-9);
    let few = vec![vec![0.0; 3]; 3];
    assert!(matches!(
        split_reference_fid_features(&few, &mut ChaCha8Rng::seed_from_u64(0)),
        Err(LdlaError::Domain(_))
    ));
}

#[test]
fn frechet_properties_on_correlated_stats() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let la = DMatrix::from_fn(4, 4, |i, j| if i >= j { rng.random_range(0.1..1.0) } else { 0.0 });
    let lb = DMatrix::from_fn(4, 4, |i, j| if i >= j { rng.random_range(0.1..1.0) } else { 0.0 });
    let a = stats_from_features(&population(&mut rng, 300, &[0.0; 4], &la)).unwrap();
    let b = stats_from_features(&population(&mut rng, 300, &[1.0, 0.0, 0.0, -1.0], &lb)).unwrap();
    let ab = frechet_distance(&a, &b).unwrap();
    let ba = frechet_distance(&b, &a).unwrap();
    assert!((ab - ba).abs() < 1e-8);
    assert!(ab > 0.0);
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
}

#[test]
fn mae_examples_and_equivariance() {
    assert!((mae_scores(&[0.3, 0.5], &[0.2, 0.6]).unwrap() - 0.1).abs() < 1e-12);
    assert_eq!(mae_scores(&[0.4, 0.7], &[0.4, 0.7]).unwrap(), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p: Vec<f64> = (0..50).map(|_| rng.random()).collect();
    let t: Vec<f64> = (0..50).map(|_| rng.random()).collect();
    let mut idx: Vec<usize> = (0..50).collect();
    idx.shuffle(&mut rng);
    let pp: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
    let tp: Vec<f64> = idx.iter().map(|&i| t[i]).collect();
    assert!((mae_scores(&p, &t).unwrap() - mae_scores(&pp, &tp).unwrap()).abs() < 1e-12);
    assert!(mae_scores(&[0.1], &[1.2]).is_err());
    assert!(mae_scores(&[0.1, 0.2], &[0.1]).is_err());
}

#[test]
fn evaluate_reports_per_zone_and_serializes() {
    let dir = tempfile::tempdir().unwrap();
    let reg = ZoneRegistry::default_registry();
    let cfg = |seed| SyntheticCorpusConfig {
        n_per_zone: 12,
        zones: vec!["forehead".into(), "glabellar".into()],
        seed,
        ..Default::default()
    };
    let (real, gen) = (dir.path().join("real"), dir.path().join("gen"));
    generate_synthetic_corpus(&cfg(1), &reg, &real).unwrap();
    generate_synthetic_corpus(&cfg(2), &reg, &gen).unwrap();
    let opts = EvalOptions {
        split_reference: true,
        seed: 3,
        extractor_grid: 2,
        scorer: "oracle".into(),
    };
    let report = evaluate(
        &real.join("manifest.jsonl"),
        &gen.join("manifest.jsonl"),
        &reg,
        Some(&OracleScorer),
        &opts,
    )
    .unwrap();
    assert!(report.fid >= 0.0);
    assert!(report.reference_fid.is_some());
    let mae = report.mae.unwrap();
    assert!((0.0..0.15).contains(&mae), "{mae}");
    assert_eq!(report.per_zone.len(), 2);
    assert_eq!(report.per_zone["forehead"].n_real, 12);
    let same = evaluate(
        &real.join("manifest.jsonl"),
        &real.join("manifest.jsonl"),
        &reg,
        None,
        &opts,
    )
    .unwrap();
    assert!(same.fid.abs() < 1e-6);
    assert!(same.mae.is_none());
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert!(json["per_zone"]["glabellar"]["fid"].is_number());
}
