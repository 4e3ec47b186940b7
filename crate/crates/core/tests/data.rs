use std::collections::HashMap;

use ldla_core::atlas::ZoneRegistry;
use ldla_core::data::*;
use ldla_core::pixels::PixelGrid;
use ldla_core::LdlaError;

fn small_corpus(dir: &std::path::Path, seed: u64) -> Vec<ManifestRecord> {
    let cfg = SyntheticCorpusConfig {
        n_per_zone: 30,
        zones: vec!["forehead".into(), "glabellar".into(), "crows_feet".into()],
        seed,
        ..Default::default()
    };
    generate_synthetic_corpus(&cfg, &ZoneRegistry::default_registry(), dir).unwrap()
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn oracle_tracks_ground_truth_scores() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path(), 4);
    let manifest = load_manifest(dir.path().join("manifest.jsonl")).unwrap();
    let reg = ZoneRegistry::default_registry();
    let (mut truth, mut measured) = (Vec::new(), Vec::new());
    for r in &manifest.records {
        let img = PixelGrid::load_png(manifest.resolve(r)).unwrap();
        truth.push(r.normalized_score());
        measured.push(wrinkle_density_oracle(&img, reg.get(&r.zone_id).unwrap()));
    }
    let rho = pearson(&truth, &measured);
    assert!(rho > 0.95, "correlation {rho}");
}

#[test]
fn same_seed_gives_identical_corpus_and_splits() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = small_corpus(a.path(), 9);
    let rb = small_corpus(b.path(), 9);
    assert_eq!(ra, rb);
    for r in &ra {
        let fa = std::fs::read(a.path().join(&r.image_path)).unwrap();
        let fb = std::fs::read(b.path().join(&r.image_path)).unwrap();
        assert_eq!(fa, fb, "{}", r.image_path);
    }
    assert_eq!(
        std::fs::read(a.path().join("manifest.jsonl")).unwrap(),
        std::fs::read(b.path().join("manifest.jsonl")).unwrap()
    );
    let mut counts = HashMap::new();
    for r in &ra {
        *counts.entry(r.split).or_insert(0) += 1;
    }
    assert!(counts[&Split::Train] > counts.get(&Split::Test).copied().unwrap_or(0));
}

#[test]
fn different_seed_changes_corpus() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_ne!(small_corpus(a.path(), 1), small_corpus(b.path(), 2));
}

#[test]
fn manifest_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path(), 5);
    let path = dir.path().join("manifest.jsonl");
    let original = std::fs::read_to_string(&path).unwrap();
    let loaded = load_manifest(&path).unwrap();
    assert_eq!(render_manifest(&loaded.records), original);
    let copy = dir.path().join("copy.jsonl");
    write_manifest(&copy, &loaded.records).unwrap();
    assert_eq!(std::fs::read_to_string(copy).unwrap(), original);
}

#[test]
fn three_line_manifest_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    PixelGrid::filled(8, 8, [0.5; 3]).save_png(dir.path().join("a.png")).unwrap();
    let line = |raw: f64| {
        format!(
            r#"{{"image_path":"a.png","zone_id":"forehead","ethnicity":"Asian","raw_score":{raw},"scale_max":5.0,"split":"train"}}"#
        )
    };
    let good = dir.path().join("good.jsonl");
    std::fs::write(&good, format!("{}\n{}\n{}\n", line(0.0), line(2.5), line(5.0))).unwrap();
    assert_eq!(load_manifest(&good).unwrap().records.len(), 3);

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, format!("{}\n{}\n", line(1.0), line(6.0))).unwrap();
    let e = load_manifest(&bad).unwrap_err();
    assert!(matches!(e, LdlaError::Validation(_)));
    assert!(e.to_string().contains("bad.jsonl:2"), "{e}");

    let missing = dir.path().join("missing.jsonl");
    std::fs::write(&missing, line(1.0).replace("a.png", "nope.png") + "\n").unwrap();
    let e = load_manifest(&missing).unwrap_err().to_string();
    assert!(e.contains("nope.png"), "{e}");

    let unknown = dir.path().join("unknown.jsonl");
    std::fs::write(&unknown, line(1.0).replace("\"split\"", "\"extra\":1,\"split\"") + "\n").unwrap();
    assert!(load_manifest(&unknown).is_err());

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    assert!(load_manifest(&empty).unwrap().records.is_empty());
}

#[test]
fn generated_density_is_monotone_in_score() {
    let reg = ZoneRegistry::default_registry();
    let law = DensityLaw::default();
    for zone in reg.zones() {
        for seed in 0..4 {
            let d: Vec<f64> = [0.1, 0.5, 0.9]
                .iter()
                .map(|&s| {
                    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
                    wrinkle_density_oracle(&render_crop(&zone.zone_id, s, 128, &law, &mut rng), zone)
                })
                .collect();
            assert!(d[0] < d[1] && d[1] < d[2], "{} {d:?}", zone.zone_id);
        }
    }
}
