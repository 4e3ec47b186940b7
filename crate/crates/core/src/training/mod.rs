//! Training: the four LDLA objectives, the optimisation step, the epoch loop
//! and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod losses;
pub mod optim;
pub mod run;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atlas::{AgingScore, ZoneRegistry};
use crate::diffusion::{NoiseSchedule, TextEncoder};
use crate::error::{LdlaError, Result};
use crate::networks::{Denoiser, DenoiserConfig, ScoreNet, ScoreNetConfig};
use crate::tensor_util::scalar;

pub use checkpoint::{file_hash, Checkpoint};
pub use config::{CodecConfig, Precision, TrainConfig};
pub use losses::{
    combined_loss, cycle_block, loss_full, loss_score, loss_zone, CombinedLoss, CycleOutput,
    LossComponents, LossContext, LossWeights, NoiseDraws, PreparedBatch,
};
pub use optim::{Adam, AdamConfig};
pub use run::{train, TrainOutcome};

/// One encoded crop with its labels.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    /// `(1, C, H, W)`.
    pub crop_latent: Tensor,
    pub zone_id: String,
    pub ethnicity: String,
    pub source_score: AgingScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Supervised ScoreNet calibration on clean latents.
    ScoreWarmup,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub phase: Phase,
    pub components: LossComponents,
    pub total: f64,
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub denoiser: Denoiser,
    pub scorenet: ScoreNet,
    pub opt_denoiser: Adam,
    pub opt_scorenet: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub schedule: NoiseSchedule,
    pub history: Vec<LossRecord>,
}

impl TrainState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        denoiser_cfg: DenoiserConfig,
        scorenet_cfg: ScoreNetConfig,
        opt_denoiser: AdamConfig,
        opt_scorenet: AdamConfig,
        schedule: NoiseSchedule,
        dtype: DType,
        seed: u64,
    ) -> Result<Self> {
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        let denoiser = Denoiser::new(denoiser_cfg, dtype, &mut init_rng)?;
        let scorenet = ScoreNet::new(scorenet_cfg, dtype, &mut init_rng)?;
        Ok(Self {
            opt_denoiser: Adam::new(opt_denoiser, denoiser.params())?,
            opt_scorenet: Adam::new(opt_scorenet, scorenet.params())?,
            denoiser,
            scorenet,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15)),
            schedule,
            history: Vec::new(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.denoiser.dtype()
    }

    fn guard_finite(&self) -> Result<()> {
        if !self.denoiser.params().all_finite()? || !self.scorenet.params().all_finite()? {
            return Err(LdlaError::Numeric(format!(
                "non-finite parameters after step {}",
                self.step
            )));
        }
        Ok(())
    }
}

/// One joint gradient step on the batch-mean weighted loss.
///
/// The denoiser is always updated; ScoreNet only when the score term is
/// active, since it receives gradient from nothing else.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&TrainingExample],
    registry: &ZoneRegistry,
    encoder: &dyn TextEncoder,
    weights: &LossWeights,
    cycle_timesteps: Option<usize>,
) -> Result<LossRecord> {
    if batch.is_empty() {
        return Err(LdlaError::Config("train_step needs a non-empty batch".into()));
    }
    let steps = state.schedule.steps();
    let prepared = PreparedBatch::prepare(batch, registry, encoder, state.dtype(), &mut state.rng)?;
    let draws = NoiseDraws::sample(
        &mut state.rng,
        &prepared.z0,
        steps,
        cycle_timesteps.unwrap_or(steps),
    )?;
    let ctx = LossContext {
        denoiser: &state.denoiser,
        scorenet: &state.scorenet,
        schedule: &state.schedule,
    };
    let loss = combined_loss(&ctx, &prepared, &draws, weights)?;
    let total = scalar(&loss.total)?;
    if !total.is_finite() {
        return Err(LdlaError::Numeric(format!(
            "non-finite loss at step {}: {:?}",
            state.step, loss.components
        )));
    }
    let grads = loss.total.backward()?;
    state.opt_denoiser.apply(state.denoiser.params(), &grads)?;
    if weights.lambda_score > 0.0 {
        state.opt_scorenet.apply(state.scorenet.params(), &grads)?;
    }
    state.step += 1;
    state.guard_finite()?;
    let record = LossRecord {
        step: state.step,
        phase: Phase::Joint,
        components: loss.components,
        total,
    };
    state.history.push(record);
    Ok(record)
}

/// Supervised ScoreNet update on clean latents against their source scores.
/// Touches neither the step counter nor the history.
pub fn calibrate_scorenet(state: &mut TrainState, batch: &[&TrainingExample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(LdlaError::Config("calibration needs a non-empty batch".into()));
    }
    let dtype = state.dtype();
    let latents = batch
        .iter()
        .map(|e| e.crop_latent.to_dtype(dtype))
        .collect::<candle_core::Result<Vec<_>>>()?;
    let z0 = Tensor::cat(&latents, 0)?;
    let targets: Vec<f64> = batch.iter().map(|e| e.source_score.normalized).collect();
    let pred = state.scorenet.forward(&z0)?;
    let target = Tensor::from_vec(targets, batch.len(), z0.device())?.to_dtype(dtype)?;
    let loss = (pred - target)?.sqr()?.mean_all()?;
    let value = scalar(&loss)?;
    if !value.is_finite() {
        return Err(LdlaError::Numeric(format!(
            "non-finite ScoreNet calibration loss at step {}",
            state.step
        )));
    }
    let grads = loss.backward()?;
    state.opt_scorenet.apply(state.scorenet.params(), &grads)?;
    state.guard_finite()?;
    Ok(value)
}

/// One warmup step: [`calibrate_scorenet`] recorded as a training step.
pub fn scorenet_warmup_step(state: &mut TrainState, batch: &[&TrainingExample]) -> Result<LossRecord> {
    let value = calibrate_scorenet(state, batch)?;
    state.step += 1;
    let record = LossRecord {
        step: state.step,
        phase: Phase::ScoreWarmup,
        components: LossComponents {
            l_score: Some(value),
            ..Default::default()
        },
        total: value,
    };
    state.history.push(record);
    Ok(record)
}
