//! The epoch loop: data loading, codec fitting, warmup, joint training,
//! loss log and periodic checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    calibrate_scorenet, scorenet_warmup_step, train_step, Checkpoint, CodecConfig, LossRecord, Phase, TrainConfig,
    TrainState, TrainingExample,
};
use crate::atlas::{AgingScore, ZoneRegistry};
use crate::data::{load_manifest, Manifest, ManifestRecord, Split};
use crate::diffusion::{Codec, HashingTextEncoder, LatentCodec, NoiseSchedule, PcaCodec};
use crate::error::{LdlaError, Result};
use crate::pixels::PixelGrid;

pub const LOSS_LOG_HEADER: &str = "step,l_full,l_zone,l_cycle,l_score,total";

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
}

pub fn load_registry(config: &TrainConfig) -> Result<ZoneRegistry> {
    match &config.registry {
        Some(p) => ZoneRegistry::load(p),
        None => Ok(ZoneRegistry::default_registry()),
    }
}

/// Loads the crops of one split as pixel grids, checking their size.
pub fn load_crops(
    manifest: &Manifest,
    split: Split,
    crop_size: usize,
) -> Result<Vec<(ManifestRecord, PixelGrid)>> {
    manifest
        .split(split)
        .map(|r| {
            let path = manifest.resolve(r);
            let img = PixelGrid::load_png(&path)?;
            if img.width() != crop_size || img.height() != crop_size {
                return Err(LdlaError::Shape(format!(
                    "{}: expected {crop_size}x{crop_size} crop, got {}x{}",
                    path.display(),
                    img.width(),
                    img.height()
                )));
            }
            Ok((r.clone(), img))
        })
        .collect()
}

pub fn fit_codec(config: &CodecConfig, crops: &[&PixelGrid]) -> Result<Codec> {
    match *config {
        CodecConfig::Identity => Ok(Codec::Identity),
        CodecConfig::Pca {
            patch,
            channels,
            fit_images,
        } => {
            let subset: Vec<PixelGrid> = crops
                .iter()
                .take(fit_images.max(1))
                .map(|&c| c.clone())
                .collect();
            Ok(Codec::Pca(PcaCodec::fit(&subset, patch, channels)?))
        }
    }
}

pub fn encode_examples(
    codec: &dyn LatentCodec,
    registry: &ZoneRegistry,
    crops: &[(ManifestRecord, PixelGrid)],
) -> Result<Vec<TrainingExample>> {
    crops
        .iter()
        .map(|(rec, img)| {
            registry.require(&rec.zone_id)?;
            Ok(TrainingExample {
                crop_latent: codec.encode(img)?.into_tensor(),
                zone_id: rec.zone_id.clone(),
                ethnicity: rec.ethnicity.clone(),
                source_score: AgingScore::new(rec.raw_score, rec.scale_max)?,
            })
        })
        .collect()
}

/// Example indices for global step `step`: consecutive slices of per-epoch
/// permutations, a pure function of `(seed, step)`.
pub fn batch_indices(seed: u64, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for j in 0..batch as u64 {
        let pos = step * batch as u64 + j;
        let epoch = pos / n as u64;
        if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch);
            perm.shuffle(&mut rng);
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("set above").1[(pos % n as u64) as usize]);
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn loss_log_line(r: &LossRecord) -> String {
    let c = &r.components;
    format!(
        "{},{},{},{},{},{}",
        r.step,
        fmt_opt(c.l_full),
        fmt_opt(c.l_zone),
        fmt_opt(c.l_cycle),
        fmt_opt(c.l_score),
        r.total
    )
}

struct LossLog {
    file: Option<std::fs::File>,
    path: PathBuf,
}

impl LossLog {
    fn open(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self {
                file: None,
                path: PathBuf::new(),
            });
        };
        let fresh = !path.exists();
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| LdlaError::io(path, e))?;
        if fresh {
            writeln!(file, "{LOSS_LOG_HEADER}").map_err(|e| LdlaError::io(path, e))?;
        }
        Ok(Self {
            file: Some(file),
            path: path.to_path_buf(),
        })
    }

    fn append(&mut self, r: &LossRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", loss_log_line(r)).map_err(|e| LdlaError::io(&self.path, e))?;
        }
        Ok(())
    }
}

/// Runs (or resumes) training to `config.scorenet_warmup_steps + config.steps`
/// total optimisation steps.
pub fn train(config: &TrainConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let registry = load_registry(config)?;
    let manifest = load_manifest(&config.manifest)?;
    let crops = load_crops(&manifest, Split::Train, config.crop_size)?;
    if crops.is_empty() {
        return Err(LdlaError::Config(format!(
            "no training records in {}",
            config.manifest.display()
        )));
    }
    let (codec, mut state) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            (ckpt.codec, ckpt.state)
        }
        None => {
            let images: Vec<&PixelGrid> = crops.iter().map(|(_, i)| i).collect();
            let codec = fit_codec(&config.codec, &images)?;
            let state = TrainState::new(
                config.denoiser,
                config.scorenet,
                config.optimizer,
                config.scorenet_optimizer,
                NoiseSchedule::new(config.schedule)?,
                config.precision.dtype(),
                config.seed,
            )?;
            (codec, state)
        }
    };
    let examples = encode_examples(&codec, &registry, &crops)?;
    let encoder = HashingTextEncoder::new(config.text.dim, config.text.max_tokens);
    let mut log = LossLog::open(config.loss_log.as_deref())?;
    let warmup = config.scorenet_warmup_steps;
    let total_steps = warmup + config.steps;
    log::info!(
        "training on {} crops, {} latent channels, denoiser {} params, scorenet {} params",
        examples.len(),
        codec.latent_channels(),
        state.denoiser.params().num_parameters(),
        state.scorenet.params().num_parameters()
    );
    let save = |state: &TrainState, codec: &Codec| -> Result<Checkpoint> {
        let ckpt = Checkpoint {
            config: config.clone(),
            codec: codec.clone(),
            state: state.clone(),
        };
        ckpt.save(&config.checkpoint_out)?;
        Ok(ckpt)
    };
    while state.step < total_steps {
        let idx = batch_indices(config.seed, state.step, config.batch_size, examples.len());
        let batch: Vec<&TrainingExample> = idx.iter().map(|&i| &examples[i]).collect();
        let record = if state.step < warmup {
            scorenet_warmup_step(&mut state, &batch)?
        } else {
            let record = train_step(
                &mut state,
                &batch,
                &registry,
                &encoder,
                &config.weights,
                config.cycle_timesteps,
            )?;
            if config.scorenet_calibration {
                calibrate_scorenet(&mut state, &batch)?;
            }
            record
        };
        if record.phase == Phase::Joint {
            log.append(&record)?;
        }
        if record.step % 100 == 0 {
            log::info!("step {} total {:.5}", record.step, record.total);
        }
        if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
            save(&state, &codec)?;
        }
    }
    let checkpoint = save(&state, &codec)?;
    Ok(TrainOutcome {
        checkpoint,
        checkpoint_path: config.checkpoint_out.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch_once() {
        let n = 10;
        let mut seen = vec![0; n];
        for step in 0..5 {
            for i in batch_indices(3, step, 2, n) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(batch_indices(3, 7, 4, n), batch_indices(3, 7, 4, n));
    }
}
