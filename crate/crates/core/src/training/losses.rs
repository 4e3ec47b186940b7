//! The four training objectives and their weighted sum.

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::atlas::{sample_target_prompt, ZoneRegistry};
use crate::diffusion::{
    forward_diffuse, one_step_estimate, ConditionEmbedding, NoisePredictor, NoiseSchedule,
    TextEncoder,
};
use crate::error::{LdlaError, Result};
use crate::networks::ScorePredictor;
use crate::tensor_util::{mse, randn, scalar};

use super::TrainingExample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_full: f64,
    pub lambda_zone: f64,
    pub lambda_cycle: f64,
    pub lambda_score: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_full: 1.0,
            lambda_zone: 0.5,
            lambda_cycle: 1.0,
            lambda_score: 0.1,
        }
    }
}

impl LossWeights {
    pub fn new(full: f64, zone: f64, cycle: f64, score: f64) -> Result<Self> {
        let w = Self {
            lambda_full: full,
            lambda_zone: zone,
            lambda_cycle: cycle,
            lambda_score: score,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.as_array();
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(LdlaError::Config(format!(
                "loss weights must be finite and non-negative: {all:?}"
            )));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(LdlaError::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [
            self.lambda_full,
            self.lambda_zone,
            self.lambda_cycle,
            self.lambda_score,
        ]
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            lambda_full: self.lambda_full * k,
            lambda_zone: self.lambda_zone * k,
            lambda_cycle: self.lambda_cycle * k,
            lambda_score: self.lambda_score * k,
        }
    }
}

/// Networks the objectives are evaluated against.
pub struct LossContext<'a> {
    pub denoiser: &'a dyn NoisePredictor,
    pub scorenet: &'a dyn ScorePredictor,
    pub schedule: &'a NoiseSchedule,
}

/// One minibatch with its three prompt embeddings per example.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub z0: Tensor,
    pub cond_full: Tensor,
    pub cond_zone: Tensor,
    pub cond_target: Tensor,
    pub targets: Vec<f64>,
}

/// Every random quantity one combined-loss evaluation consumes. Drawn in a
/// fixed order independent of the loss weights.
#[derive(Debug, Clone)]
pub struct NoiseDraws {
    /// Shared by the full and zone losses.
    pub t: Vec<usize>,
    pub eps: Tensor,
    /// Shared by both cycle passes.
    pub t_cycle: Vec<usize>,
    pub eps_cycle_1: Tensor,
    pub eps_cycle_2: Tensor,
}

fn refs(v: &[ConditionEmbedding]) -> Vec<&ConditionEmbedding> {
    v.iter().collect()
}

impl PreparedBatch {
    /// Builds prompts (drawing a random target per example) and embeds them.
    pub fn prepare<R: Rng + ?Sized>(
        examples: &[&TrainingExample],
        registry: &ZoneRegistry,
        encoder: &dyn TextEncoder,
        dtype: DType,
        rng: &mut R,
    ) -> Result<Self> {
        if examples.is_empty() {
            return Err(LdlaError::Config("empty batch".into()));
        }
        let mut full = Vec::with_capacity(examples.len());
        let mut zone = Vec::with_capacity(examples.len());
        let mut target = Vec::with_capacity(examples.len());
        let mut targets = Vec::with_capacity(examples.len());
        for ex in examples {
            let spec = registry.require(&ex.zone_id)?;
            let bundle =
                sample_target_prompt(spec, &ex.ethnicity, ex.source_score.normalized, rng);
            full.push(encoder.embed(&bundle.p_full));
            zone.push(encoder.embed(&bundle.p_zone));
            target.push(encoder.embed(&bundle.p_target));
            targets.push(bundle.target_normalized);
        }
        let dev = candle_core::Device::Cpu;
        let latents = examples
            .iter()
            .map(|e| e.crop_latent.to_dtype(dtype))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            z0: Tensor::cat(&latents, 0)?,
            cond_full: ConditionEmbedding::stack(&refs(&full), dtype, &dev)?,
            cond_zone: ConditionEmbedding::stack(&refs(&zone), dtype, &dev)?,
            cond_target: ConditionEmbedding::stack(&refs(&target), dtype, &dev)?,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

impl NoiseDraws {
    /// `t` is uniform over `[0, steps)`, `t_cycle` over `[0, cycle_steps)`.
    pub fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        z0: &Tensor,
        steps: usize,
        cycle_steps: usize,
    ) -> Result<Self> {
        if cycle_steps == 0 || cycle_steps > steps {
            return Err(LdlaError::Config(format!(
                "cycle timestep range {cycle_steps} must be in 1..={steps}"
            )));
        }
        let n = z0.dims()[0];
        let shape = z0.dims().to_vec();
        let dtype = z0.dtype();
        let t = (0..n).map(|_| rng.random_range(0..steps)).collect();
        let eps = randn(rng, shape.as_slice(), dtype)?;
        let t_cycle = (0..n).map(|_| rng.random_range(0..cycle_steps)).collect();
        let eps_cycle_1 = randn(rng, shape.as_slice(), dtype)?;
        let eps_cycle_2 = randn(rng, shape.as_slice(), dtype)?;
        Ok(Self {
            t,
            eps,
            t_cycle,
            eps_cycle_1,
            eps_cycle_2,
        })
    }
}

/// Noise-prediction MSE conditioned on the source prompt.
pub fn loss_full(
    ctx: &LossContext<'_>,
    z0: &Tensor,
    cond_full: &Tensor,
    ts: &[usize],
    eps: &Tensor,
) -> Result<Tensor> {
    let zt = forward_diffuse(z0, ts, eps, ctx.schedule)?;
    let pred = ctx.denoiser.predict_noise(&zt, ts, cond_full)?;
    mse(&pred, eps)
}

/// Same objective conditioned on the zone-only prompt.
pub fn loss_zone(
    ctx: &LossContext<'_>,
    z0: &Tensor,
    cond_zone: &Tensor,
    ts: &[usize],
    eps: &Tensor,
) -> Result<Tensor> {
    loss_full(ctx, z0, cond_zone, ts, eps)
}

#[derive(Debug, Clone)]
pub struct CycleOutput {
    /// Clean estimate after the target-conditioned pass.
    pub z_tilde: Tensor,
    /// Clean estimate after reverting with the source prompt.
    pub z_bar: Tensor,
    pub l_cycle: Tensor,
}

/// Translate towards the target and back, both through the one-step estimate
/// at the same timestep with fresh noise per pass.
#[allow(clippy::too_many_arguments)]
pub fn cycle_block(
    ctx: &LossContext<'_>,
    z0: &Tensor,
    cond_target: &Tensor,
    cond_full: &Tensor,
    ts: &[usize],
    eps1: &Tensor,
    eps2: &Tensor,
    second_pass: bool,
) -> Result<CycleOutput> {
    let zt = forward_diffuse(z0, ts, eps1, ctx.schedule)?;
    let eps_hat = ctx.denoiser.predict_noise(&zt, ts, cond_target)?;
    let z_tilde = one_step_estimate(&zt, &eps_hat, ts, ctx.schedule)?;
    if !second_pass {
        let zero = Tensor::zeros((), z0.dtype(), z0.device())?;
        return Ok(CycleOutput {
            z_bar: z_tilde.clone(),
            z_tilde,
            l_cycle: zero,
        });
    }
    let zt2 = forward_diffuse(&z_tilde, ts, eps2, ctx.schedule)?;
    let eps_hat2 = ctx.denoiser.predict_noise(&zt2, ts, cond_full)?;
    let z_bar = one_step_estimate(&zt2, &eps_hat2, ts, ctx.schedule)?;
    let l_cycle = mse(z0, &z_bar)?;
    Ok(CycleOutput {
        z_tilde,
        z_bar,
        l_cycle,
    })
}

/// Squared error between ScoreNet on `z_tilde` and the requested targets,
/// averaged over the batch. Differentiable in both networks.
pub fn loss_score(ctx: &LossContext<'_>, z_tilde: &Tensor, targets: &[f64]) -> Result<Tensor> {
    let pred = ctx.scorenet.predict_score(z_tilde)?;
    let target = Tensor::from_vec(targets.to_vec(), targets.len(), z_tilde.device())?
        .to_dtype(pred.dtype())?;
    Ok((pred - target)?.sqr()?.mean_all()?)
}

/// Weighted total and per-term values; terms with zero weight are skipped.
#[derive(Debug, Clone)]
pub struct CombinedLoss {
    pub total: Tensor,
    pub components: LossComponents,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_full: Option<f64>,
    pub l_zone: Option<f64>,
    pub l_cycle: Option<f64>,
    pub l_score: Option<f64>,
}

impl LossComponents {
    pub fn active(&self) -> usize {
        [self.l_full, self.l_zone, self.l_cycle, self.l_score]
            .iter()
            .filter(|c| c.is_some())
            .count()
    }
}

pub fn combined_loss(
    ctx: &LossContext<'_>,
    batch: &PreparedBatch,
    draws: &NoiseDraws,
    weights: &LossWeights,
) -> Result<CombinedLoss> {
    weights.validate()?;
    let mut terms: Vec<Tensor> = Vec::with_capacity(4);
    let mut components = LossComponents::default();
    let mut add = |w: f64, l: &Tensor, slot: &mut Option<f64>| -> Result<()> {
        *slot = Some(scalar(l)?);
        terms.push(if w == 1.0 { l.clone() } else { l.affine(w, 0.0)? });
        Ok(())
    };
    if weights.lambda_full > 0.0 {
        let l = loss_full(ctx, &batch.z0, &batch.cond_full, &draws.t, &draws.eps)?;
        add(weights.lambda_full, &l, &mut components.l_full)?;
    }
    if weights.lambda_zone > 0.0 {
        let l = loss_zone(ctx, &batch.z0, &batch.cond_zone, &draws.t, &draws.eps)?;
        add(weights.lambda_zone, &l, &mut components.l_zone)?;
    }
    if weights.lambda_cycle > 0.0 || weights.lambda_score > 0.0 {
        let cyc = cycle_block(
            ctx,
            &batch.z0,
            &batch.cond_target,
            &batch.cond_full,
            &draws.t_cycle,
            &draws.eps_cycle_1,
            &draws.eps_cycle_2,
            weights.lambda_cycle > 0.0,
        )?;
        if weights.lambda_cycle > 0.0 {
            add(weights.lambda_cycle, &cyc.l_cycle, &mut components.l_cycle)?;
        }
        if weights.lambda_score > 0.0 {
            let l = loss_score(ctx, &cyc.z_tilde, &batch.targets)?;
            add(weights.lambda_score, &l, &mut components.l_score)?;
        }
    }
    let mut iter = terms.into_iter();
    let first = iter.next().expect("validated weights leave one term");
    let total = iter.try_fold(first, |acc, t| acc + t)?;
    Ok(CombinedLoss { total, components })
}
