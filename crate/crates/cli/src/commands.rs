use std::path::Path;

use anyhow::{bail, Context, Result};
use ldla_core::data::{generate_synthetic_corpus, SyntheticCorpusConfig};
use ldla_core::evaluation::{evaluate, EvalOptions, ImageScorer, OracleScorer, ScoreNetScorer};
use ldla_core::geometry::{ExternalLandmarks, Landmarks, LandmarkSource};
use ldla_core::inference::{
    age_face, refine_face, uniform_targets, DiffusionRefiner, IdentityRefiner, InferenceParams,
    Models, Refiner, ZoneTarget,
};
use ldla_core::training::config::set_dotted;
use ldla_core::training::{file_hash, train as run_training, Checkpoint, TrainConfig};
use ldla_core::{PixelGrid, ZoneRegistry};
use ldla_service::{RefinerKind, ServiceConfig};
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::{AgeArgs, EvalArgs, GenCorpusArgs, ServeArgs, TargetSpec, TrainArgs};

fn print_resolved(config: &impl Serialize) {
    let text = serde_json::to_string_pretty(config).expect("config serializes");
    eprintln!("resolved config:\n{text}");
}

fn registry(path: Option<&Path>) -> Result<ZoneRegistry> {
    match path {
        Some(p) => ZoneRegistry::load(p).with_context(|| format!("loading registry {}", p.display())),
        None => Ok(ZoneRegistry::default_registry()),
    }
}

/// Replaces top-level keys of `base` with those of `patch`, rejecting keys
/// `base` lacks.
fn layer(base: &mut Value, patch: Value, source: &Path) -> Result<()> {
    let (Value::Object(b), Value::Object(p)) = (base, patch) else {
        bail!("{}: expected a JSON object", source.display());
    };
    for (k, v) in p {
        match b.get_mut(&k) {
            Some(slot) => *slot = v,
            None => bail!("{}: unknown config key `{k}`", source.display()),
        }
    }
    Ok(())
}

pub fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let reg = registry(a.registry.as_deref())?;
    let mut v = serde_json::to_value(SyntheticCorpusConfig::default())?;
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let patch = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        layer(&mut v, patch, path)?;
    }
    for o in &a.overrides {
        set_dotted(&mut v, o)?;
    }
    if let Some(n) = a.n_per_zone {
        v["n_per_zone"] = json!(n);
    }
    if let Some(s) = a.seed {
        v["seed"] = json!(s);
    }
    if let Some(z) = &a.zones {
        v["zones"] = json!(z);
    }
    let cfg: SyntheticCorpusConfig = serde_json::from_value(v).context("corpus config")?;
    print_resolved(&json!({ "out": a.out, "corpus": cfg }));
    let records = generate_synthetic_corpus(&cfg, &reg, &a.out)?;
    println!("wrote {} crops to {}", records.len(), a.out.join("manifest.jsonl").display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let base = match &a.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    let overrides: Vec<String> = a.overrides.iter().cloned().chain(a.flag_overrides()).collect();
    let cfg = base.with_overrides(&overrides)?;
    cfg.validate()?;
    print_resolved(&cfg);
    let outcome = run_training(&cfg, a.resume.as_deref())?;
    let state = &outcome.checkpoint.state;
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    println!("steps: {}", state.step);
    if let Some(last) = state.history.last() {
        println!("final total loss: {:.6}", last.total);
    }
    Ok(())
}

pub fn age(a: AgeArgs) -> Result<()> {
    let reg = registry(a.registry.as_deref())?;
    let face = PixelGrid::load_png(&a.face)?;
    let targets: Vec<ZoneTarget> = match &a.targets {
        TargetSpec::Uniform(n) => uniform_targets(&reg, *n),
        TargetSpec::PerZone(m) => m.iter().map(|(z, n)| ZoneTarget::new(z.clone(), *n)).collect(),
    };
    let params = InferenceParams {
        gamma_n: a.gamma_n,
        gamma_inf: a.gamma_inf,
        gamma_g: a.gamma_g,
        seed: a.seed,
    };
    params.validate()?;
    print_resolved(&json!({
        "checkpoint": a.checkpoint,
        "checkpoint_hash": file_hash(&a.checkpoint)?,
        "face": a.face,
        "out": a.out,
        "ethnicity": a.ethnicity,
        "targets": targets.iter().map(|t| (t.zone_id.clone(), t.target_normalized)).collect::<std::collections::BTreeMap<_, _>>(),
        "params": params,
        "refiner": if a.no_refiner { json!(null) } else { json!({ "strength": a.refiner_strength }) },
        "landmarks": a.landmarks,
        "landmark_detector": a.landmark_detector,
    }));

    let models = Models::load(&a.checkpoint)?;
    let landmarks: Option<Landmarks> = match (&a.landmarks, &a.landmark_detector) {
        (Some(p), _) => Some(Landmarks::load(p)?),
        (None, Some(prog)) => Some(
            ExternalLandmarks {
                program: prog.clone(),
                args: Vec::new(),
            }
            .landmarks(&face)?,
        ),
        (None, None) => None,
    };
    let aged = age_face(&face, &targets, &a.ethnicity, &params, &models, &reg, landmarks.as_ref())?;
    let refiner: Box<dyn Refiner> = if a.no_refiner {
        Box::new(IdentityRefiner)
    } else {
        Box::new(DiffusionRefiner::new(models))
    };
    let out = refine_face(&aged, refiner.as_ref(), a.refiner_strength, params.seed)?;
    if out == face {
        std::fs::copy(&a.face, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    } else {
        out.save_png(&a.out)?;
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let reg = registry(a.registry.as_deref())?;
    let scorer: Box<dyn ImageScorer> = match &a.checkpoint {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            Box::new(ScoreNetScorer {
                codec: ckpt.codec,
                scorenet: ckpt.state.scorenet,
            })
        }
        None => Box::new(OracleScorer),
    };
    let opts = EvalOptions {
        split_reference: a.split_reference,
        seed: a.seed,
        extractor_grid: a.grid,
        scorer: if a.checkpoint.is_some() { "scorenet" } else { "oracle" }.into(),
    };
    print_resolved(&json!({
        "real": a.real,
        "generated": a.generated,
        "checkpoint": a.checkpoint,
        "options": opts,
    }));
    let report = evaluate(&a.real, &a.generated, &reg, Some(scorer.as_ref()), &opts)?;
    let text = report.to_json();
    match &a.out {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

pub fn serve(a: ServeArgs) -> Result<()> {
    let reg = registry(a.registry.as_deref())?;
    if !a.checkpoint.is_file() {
        bail!("checkpoint {} not found", a.checkpoint.display());
    }
    let config = ServiceConfig {
        port: a.port,
        workers: a.workers,
        cors_origin: a.cors_origin.clone(),
        refiner: if a.no_refiner {
            RefinerKind::Identity
        } else {
            RefinerKind::Diffusion
        },
        refiner_strength: a.refiner_strength,
    };
    print_resolved(&json!({
        "checkpoint": a.checkpoint,
        "port": config.port,
        "workers": config.workers,
        "cors_origin": config.cors_origin,
        "refiner": if a.no_refiner { "identity" } else { "diffusion" },
        "refiner_strength": config.refiner_strength,
        "registry": a.registry,
    }));
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting the async runtime")?;
    runtime
        .block_on(ldla_service::serve(config, reg, a.checkpoint))
        .map_err(anyhow::Error::msg)
}
