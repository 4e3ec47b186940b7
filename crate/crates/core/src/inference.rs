//! Per-zone image-to-image translation and whole-face orchestration.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::atlas::{build_full_prompt, ZoneRegistry, ZoneSpec};
use crate::diffusion::{
    denoise, forward_diffuse, plan_timesteps, Codec, HashingTextEncoder, LatentCodec, LatentGrid,
    NoisePredictor, NoiseSchedule, TextEncoder, TimestepPlan,
};
use crate::error::{LdlaError, Result};
use crate::geometry::{extract_crop, locate_zone, paste_crop, Landmarks, CROP_SIZE};
use crate::networks::Denoiser;
use crate::pixels::PixelGrid;
use crate::tensor_util::randn;
use crate::training::Checkpoint;

/// Prompt of the whole-face refiner pass, verbatim.
pub const REFINER_PROMPT: &str = "Utra realistic image of a human face";
pub const DEFAULT_REFINER_STRENGTH: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceParams {
    pub gamma_n: f64,
    pub gamma_inf: usize,
    pub gamma_g: f64,
    pub seed: u64,
}

impl Default for InferenceParams {
    fn default() -> Self {
        Self {
            gamma_n: 0.2,
            gamma_inf: 40,
            gamma_g: 0.8,
            seed: 0,
        }
    }
}

impl InferenceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_n > 0.0 && self.gamma_n <= 1.0) {
            return Err(LdlaError::Validation(format!(
                "gamma_n must be in (0, 1], got {}",
                self.gamma_n
            )));
        }
        if self.gamma_inf == 0 {
            return Err(LdlaError::Validation("gamma_inf must be positive".into()));
        }
        if !(self.gamma_g.is_finite() && self.gamma_g >= 0.0) {
            return Err(LdlaError::Validation(format!(
                "gamma_g must be >= 0, got {}",
                self.gamma_g
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneTarget {
    pub zone_id: String,
    pub target_normalized: f64,
}

impl ZoneTarget {
    pub fn new(zone_id: impl Into<String>, target_normalized: f64) -> Self {
        Self {
            zone_id: zone_id.into(),
            target_normalized,
        }
    }
}

/// One target per registry zone.
pub fn uniform_targets(registry: &ZoneRegistry, normalized: f64) -> Vec<ZoneTarget> {
    registry
        .zones()
        .iter()
        .map(|z| ZoneTarget::new(z.zone_id.clone(), normalized))
        .collect()
}

pub type SharedPredictor = Arc<dyn NoisePredictor + Send + Sync>;

/// Frozen models used at inference time.
#[derive(Clone)]
pub struct Models {
    pub codec: Codec,
    pub denoiser: Arc<Denoiser>,
    /// What the sampler calls; the denoiser unless replaced.
    pub predictor: SharedPredictor,
    pub encoder: HashingTextEncoder,
    pub schedule: NoiseSchedule,
    pub dtype: DType,
}

impl std::fmt::Debug for Models {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Models")
            .field("codec", &self.codec.checksum())
            .field("dtype", &self.dtype)
            .finish_non_exhaustive()
    }
}

impl Models {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        let denoiser = Arc::new(ckpt.state.denoiser.clone());
        Self {
            codec: ckpt.codec.clone(),
            predictor: denoiser.clone(),
            dtype: denoiser.dtype(),
            denoiser,
            encoder: HashingTextEncoder::new(ckpt.config.text.dim, ckpt.config.text.max_tokens),
            schedule: ckpt.state.schedule.clone(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_checkpoint(&Checkpoint::load(path)?))
    }

    pub fn with_predictor(mut self, predictor: SharedPredictor) -> Self {
        self.predictor = predictor;
        self
    }

    /// Checksum over codec and denoiser parameters.
    pub fn parameter_checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.codec.checksum());
        h.update(self.denoiser.params().checksum()?);
        Ok(hex::encode(h.finalize()))
    }

    fn embed(&self, prompt: &str) -> Result<Tensor> {
        self.encoder.embed(prompt).to_tensor(self.dtype, &Device::Cpu)
    }

    /// Noisy img2img pass over any codec-compatible image.
    fn img2img(
        &self,
        image: &PixelGrid,
        prompt: &str,
        plan: &TimestepPlan,
        gamma_g: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<PixelGrid> {
        let z0 = self.codec.encode(image)?.into_tensor().to_dtype(self.dtype)?;
        let eps = randn(rng, z0.dims(), self.dtype)?;
        let z_start = forward_diffuse(&z0, &[plan.first()], &eps, &self.schedule)?;
        let cond = self.embed(prompt)?;
        let uncond = self.embed("")?;
        let z = denoise(
            &z_start,
            plan,
            &cond,
            &uncond,
            gamma_g,
            self.predictor.as_ref(),
            &self.schedule,
        )?;
        let out = self.codec.decode(&LatentGrid::new(z.to_dtype(DType::F32)?)?)?;
        Ok(out.clamp01())
    }
}

/// Wraps a predictor and counts its invocations.
pub struct CountingPredictor<P> {
    pub inner: P,
    calls: AtomicUsize,
}

impl<P> CountingPredictor<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }
}

impl<P: NoisePredictor> NoisePredictor for CountingPredictor<P> {
    fn predict_noise(&self, zt: &Tensor, ts: &[usize], cond: &Tensor) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict_noise(zt, ts, cond)
    }
}

/// Noise stream for one zone: independent across zones, fixed by the seed.
pub fn zone_rng(seed: u64, zone_id: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(zone_id.as_bytes());
    let stream = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Translates one 128x128 crop to `target` (normalized score).
pub fn translate_crop(
    crop: &PixelGrid,
    zone: &ZoneSpec,
    ethnicity: &str,
    target: f64,
    params: &InferenceParams,
    models: &Models,
) -> Result<PixelGrid> {
    if crop.width() != CROP_SIZE || crop.height() != CROP_SIZE {
        return Err(LdlaError::Shape(format!(
            "translate_crop expects {CROP_SIZE}x{CROP_SIZE}, got {}x{}",
            crop.width(),
            crop.height()
        )));
    }
    if !(0.0..=1.0).contains(&target) {
        return Err(LdlaError::Validation(format!(
            "target score {target} outside [0, 1]"
        )));
    }
    params.validate()?;
    let plan = plan_timesteps(params.gamma_inf, params.gamma_n, &models.schedule)?;
    let prompt = build_full_prompt(zone, ethnicity, target);
    let mut rng = zone_rng(params.seed, &zone.zone_id);
    models.img2img(crop, &prompt, &plan, params.gamma_g, &mut rng)
}

/// Checks every target against the registry and returns them keyed by zone.
pub fn validate_targets<'a>(
    targets: &'a [ZoneTarget],
    registry: &ZoneRegistry,
) -> Result<BTreeMap<&'a str, f64>> {
    let mut by_zone = BTreeMap::new();
    for t in targets {
        registry.require(&t.zone_id)?;
        if !(0.0..=1.0).contains(&t.target_normalized) {
            return Err(LdlaError::Validation(format!(
                "target for `{}` is {}, expected a normalized score in [0, 1]",
                t.zone_id, t.target_normalized
            )));
        }
        if by_zone.insert(t.zone_id.as_str(), t.target_normalized).is_some() {
            return Err(LdlaError::Validation(format!(
                "zone `{}` targeted more than once",
                t.zone_id
            )));
        }
    }
    Ok(by_zone)
}

/// Ages each targeted zone in registry order and feather-blends the results
/// into the face. Untargeted zones are left alone.
pub fn age_face(
    face: &PixelGrid,
    targets: &[ZoneTarget],
    ethnicity: &str,
    params: &InferenceParams,
    models: &Models,
    registry: &ZoneRegistry,
    landmarks: Option<&Landmarks>,
) -> Result<PixelGrid> {
    let by_zone = validate_targets(targets, registry)?;
    params.validate()?;
    let mut out = face.clone();
    for zone in registry.zones() {
        let Some(&target) = by_zone.get(zone.zone_id.as_str()) else {
            continue;
        };
        let region = locate_zone(&out, zone, landmarks)?;
        let crop = extract_crop(&out, &region, CROP_SIZE)?;
        let aged = translate_crop(&crop, zone, ethnicity, target, params, models)?;
        out = paste_crop(&out, &region, &aged)?;
    }
    Ok(out)
}

/// Whole-face low-strength pass smoothing crop seams.
pub trait Refiner: Send + Sync {
    fn refine(&self, face: &PixelGrid, strength: f64, seed: u64) -> Result<PixelGrid>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRefiner;

impl Refiner for IdentityRefiner {
    fn refine(&self, face: &PixelGrid, _strength: f64, _seed: u64) -> Result<PixelGrid> {
        Ok(face.clone())
    }
}

/// img2img over the whole face with [`REFINER_PROMPT`].
#[derive(Debug, Clone)]
pub struct DiffusionRefiner {
    pub models: Models,
    pub gamma_inf: usize,
    pub gamma_g: f64,
}

impl DiffusionRefiner {
    pub fn new(models: Models) -> Self {
        let d = InferenceParams::default();
        Self {
            models,
            gamma_inf: d.gamma_inf,
            gamma_g: d.gamma_g,
        }
    }
}

impl Refiner for DiffusionRefiner {
    fn refine(&self, face: &PixelGrid, strength: f64, seed: u64) -> Result<PixelGrid> {
        if !(0.0..=1.0).contains(&strength) {
            return Err(LdlaError::Validation(format!(
                "refiner strength {strength} outside [0, 1]"
            )));
        }
        let m = &self.models;
        let plan = if strength > 0.0 {
            plan_timesteps(self.gamma_inf, strength, &m.schedule).ok()
        } else {
            None
        };
        match plan {
            Some(plan) => {
                let mut rng = zone_rng(seed, "<refiner>");
                m.img2img(face, REFINER_PROMPT, &plan, self.gamma_g, &mut rng)
            }
            // No timestep reachable: only the codec round trip remains.
            None => Ok(m.codec.decode(&m.codec.encode(face)?)?.clamp01()),
        }
    }
}

pub fn refine_face(
    face: &PixelGrid,
    refiner: &dyn Refiner,
    strength: f64,
    seed: u64,
) -> Result<PixelGrid> {
    refiner.refine(face, strength, seed)
}
