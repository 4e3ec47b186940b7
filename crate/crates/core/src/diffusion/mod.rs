//! Diffusion core: schedule, closed-form forward process, the one-step clean
//! latent estimate, guidance and the deterministic img2img sampler.

pub mod codec;
pub mod schedule;
pub mod text;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{LdlaError, Result};

pub use codec::{Codec, IdentityCodec, LatentCodec, PcaCodec};
pub use schedule::{make_schedule, NoiseSchedule, ScheduleParams};
pub use text::{ConditionEmbedding, HashingTextEncoder, TextEncoder};

/// A batch of latents, `(N, C, H, W)` with finite values.
#[derive(Debug, Clone)]
pub struct LatentGrid(Tensor);

impl LatentGrid {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 4 {
            return Err(LdlaError::Shape(format!(
                "latent grid must be (N, C, H, W), got {:?}",
                t.dims()
            )));
        }
        if !all_finite(&t)? {
            return Err(LdlaError::Numeric("latent grid has non-finite values".into()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn channels(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn height(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[3]
    }
}

pub(crate) fn all_finite(t: &Tensor) -> Result<bool> {
    let s: f64 = t
        .abs()?
        .sum_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_scalar()?;
    Ok(s.is_finite())
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(LdlaError::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn check_batch(z: &Tensor, ts: &[usize]) -> Result<()> {
    let n = z.dims().first().copied().unwrap_or(0);
    if ts.len() != n {
        return Err(LdlaError::Shape(format!(
            "{} timesteps for a batch of {n}",
            ts.len()
        )));
    }
    Ok(())
}

/// `sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps`, one timestep per batch row.
pub fn forward_diffuse(
    z0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    check_same_shape(z0, eps, "forward_diffuse noise")?;
    check_batch(z0, ts)?;
    let (a, b) = sched.coefficient_tensors(ts, z0.rank(), z0.dtype(), z0.device())?;
    Ok((z0.broadcast_mul(&a)? + eps.broadcast_mul(&b)?)?)
}

/// Clean-latent estimate `(z_t - sqrt(1 - ab_t) * eps_pred) / sqrt(ab_t)`.
pub fn one_step_estimate(
    zt: &Tensor,
    eps_pred: &Tensor,
    ts: &[usize],
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    check_same_shape(zt, eps_pred, "one_step_estimate prediction")?;
    check_batch(zt, ts)?;
    let (a, b) = sched.coefficient_tensors(ts, zt.rank(), zt.dtype(), zt.device())?;
    Ok((zt - eps_pred.broadcast_mul(&b)?)?.broadcast_div(&a)?)
}

/// Classifier-free guidance: `uncond + g * (cond - uncond)`.
pub fn guided_epsilon(eps_cond: &Tensor, eps_uncond: &Tensor, g: f64) -> Result<Tensor> {
    check_same_shape(eps_cond, eps_uncond, "guided_epsilon")?;
    Ok((eps_uncond + (eps_cond - eps_uncond)?.affine(g, 0.0)?)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepPlan {
    /// `gamma_inf` timesteps spaced uniformly over `[0, T)`, descending.
    pub full_grid: Vec<usize>,
    /// Suffix of `full_grid` with `t <= floor(gamma_n * T)`.
    pub active: Vec<usize>,
}

impl TimestepPlan {
    pub fn first(&self) -> usize {
        self.active[0]
    }
}

/// Uniform "trailing" grid `t_i = floor((i + 1) T / n) - 1`, restricted to the
/// timesteps reachable at noise strength `gamma_n`.
pub fn plan_timesteps(
    gamma_inf: usize,
    gamma_n: f64,
    sched: &NoiseSchedule,
) -> Result<TimestepPlan> {
    let steps = sched.steps();
    if gamma_inf == 0 || gamma_inf > steps {
        return Err(LdlaError::Domain(format!(
            "gamma_inf must be in 1..={steps}, got {gamma_inf}"
        )));
    }
    if !(gamma_n > 0.0 && gamma_n <= 1.0) {
        return Err(LdlaError::Domain(format!(
            "gamma_n must be in (0, 1], got {gamma_n}"
        )));
    }
    let full_grid: Vec<usize> = (0..gamma_inf)
        .rev()
        .map(|i| (i + 1) * steps / gamma_inf - 1)
        .collect();
    let limit = (gamma_n * steps as f64 + 1e-9).floor() as usize;
    let active: Vec<usize> = full_grid.iter().copied().filter(|&t| t <= limit).collect();
    if active.is_empty() {
        return Err(LdlaError::Domain(format!(
            "noise strength {gamma_n} reaches no timestep of the {gamma_inf}-step grid"
        )));
    }
    Ok(TimestepPlan { full_grid, active })
}

/// Anything that predicts the noise in `z_t` given timesteps and conditioning
/// tokens `(N, L, D)`.
pub trait NoisePredictor {
    fn predict_noise(&self, zt: &Tensor, ts: &[usize], cond: &Tensor) -> Result<Tensor>;
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn predict_noise(&self, zt: &Tensor, ts: &[usize], cond: &Tensor) -> Result<Tensor> {
        (**self).predict_noise(zt, ts, cond)
    }
}

/// Deterministic guided sampler over the active timesteps of `plan`.
///
/// At each step the clean latent is estimated from the guided noise and
/// re-noised with that same noise to the next timestep; the final step returns
/// the clean estimate. `cond` and `uncond` are `(1, L, D)` and are broadcast
/// over the batch.
pub fn denoise(
    z_start: &Tensor,
    plan: &TimestepPlan,
    cond: &Tensor,
    uncond: &Tensor,
    g: f64,
    denoiser: &dyn NoisePredictor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let n = z_start.dims()[0];
    let cond = expand_batch(cond, n)?;
    let uncond = expand_batch(uncond, n)?;
    let mut z = z_start.clone();
    for (i, &t) in plan.active.iter().enumerate() {
        let ts = vec![t; n];
        let eps_c = denoiser.predict_noise(&z, &ts, &cond)?;
        let eps_u = denoiser.predict_noise(&z, &ts, &uncond)?;
        for e in [&eps_c, &eps_u] {
            check_same_shape(&z, e, "denoiser output")?;
        }
        let eps = guided_epsilon(&eps_c, &eps_u, g)?;
        let z0_hat = one_step_estimate(&z, &eps, &ts, sched)?;
        z = match plan.active.get(i + 1) {
            Some(&next) => forward_diffuse(&z0_hat, &vec![next; n], &eps, sched)?,
            None => z0_hat,
        };
    }
    Ok(z)
}

fn expand_batch(c: &Tensor, n: usize) -> Result<Tensor> {
    let dims = c.dims();
    if dims[0] == n {
        return Ok(c.clone());
    }
    if dims[0] != 1 {
        return Err(LdlaError::Shape(format!(
            "conditioning batch {} does not broadcast to {n}",
            dims[0]
        )));
    }
    Ok(c.broadcast_as((n, dims[1], dims[2]))?.contiguous()?)
}
