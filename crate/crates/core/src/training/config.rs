use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{AdamConfig, LossWeights};
use crate::diffusion::ScheduleParams;
use crate::error::{LdlaError, Result};
use crate::networks::{DenoiserConfig, ScoreNetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CodecConfig {
    Identity,
    /// Patch PCA codec fitted on the first `fit_images` training crops.
    Pca {
        patch: usize,
        channels: usize,
        fit_images: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextConfig {
    pub dim: usize,
    pub max_tokens: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            max_tokens: 24,
        }
    }
}

/// Complete training configuration, as read from a JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub manifest: PathBuf,
    pub registry: Option<PathBuf>,
    pub seed: u64,
    pub steps: u64,
    pub scorenet_warmup_steps: u64,
    pub batch_size: usize,
    pub crop_size: usize,
    pub precision: Precision,
    pub schedule: ScheduleParams,
    pub weights: LossWeights,
    /// Cycle-block timesteps are drawn from `[0, cycle_timesteps)`; absent
    /// means the whole schedule.
    pub cycle_timesteps: Option<usize>,
    /// Follow every joint step with a supervised ScoreNet update on the
    /// batch's clean latents.
    pub scorenet_calibration: bool,
    pub codec: CodecConfig,
    pub text: TextConfig,
    pub denoiser: DenoiserConfig,
    pub scorenet: ScoreNetConfig,
    pub optimizer: AdamConfig,
    pub scorenet_optimizer: AdamConfig,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub checkpoint_out: PathBuf,
    pub loss_log: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("corpus/manifest.jsonl"),
            registry: None,
            seed: 0,
            steps: 2000,
            scorenet_warmup_steps: 300,
            batch_size: 8,
            crop_size: 128,
            precision: Precision::F32,
            schedule: ScheduleParams::default(),
            weights: LossWeights::default(),
            cycle_timesteps: None,
            scorenet_calibration: true,
            codec: CodecConfig::Pca {
                patch: 4,
                channels: 8,
                fit_images: 256,
            },
            text: TextConfig::default(),
            denoiser: DenoiserConfig::default(),
            scorenet: ScoreNetConfig::default(),
            optimizer: AdamConfig::default(),
            scorenet_optimizer: AdamConfig::default(),
            checkpoint_every: 0,
            checkpoint_out: PathBuf::from("ldla.ckpt"),
            loss_log: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(LdlaError::Config("batch_size must be positive".into()));
        }
        if let Some(c) = self.cycle_timesteps {
            if c == 0 || c > self.schedule.steps {
                return Err(LdlaError::Config(format!(
                    "cycle_timesteps must be in 1..={}, got {c}",
                    self.schedule.steps
                )));
            }
        }
        let latent_channels = match self.codec {
            CodecConfig::Identity => 3,
            CodecConfig::Pca { channels, patch, .. } => {
                if patch == 0 || self.crop_size % patch != 0 {
                    return Err(LdlaError::Config(format!(
                        "crop_size {} not divisible by codec patch {patch}",
                        self.crop_size
                    )));
                }
                channels
            }
        };
        if self.denoiser.latent_channels != latent_channels
            || self.scorenet.latent_channels != latent_channels
        {
            return Err(LdlaError::Config(format!(
                "network latent_channels must equal codec channels ({latent_channels})"
            )));
        }
        if self.denoiser.cond_dim != self.text.dim {
            return Err(LdlaError::Config(format!(
                "denoiser.cond_dim ({}) must equal text.dim ({})",
                self.denoiser.cond_dim, self.text.dim
            )));
        }
        Ok(())
    }

    /// Reads a config file layered over the defaults; missing keys keep their
    /// default values, unknown keys are rejected.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| LdlaError::io(path, e))?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| LdlaError::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut base = serde_json::to_value(Self::default()).expect("config serializes");
        merge_known(&mut base, &patch, "")?;
        Self::from_value(base)
    }

    pub fn from_value(v: Value) -> Result<Self> {
        serde_json::from_value(v).map_err(|e| LdlaError::Config(e.to_string()))
    }

    /// Applies `dotted.key=value` overrides. Values parse as JSON when
    /// possible and fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(self, overrides: &[S]) -> Result<Self> {
        let mut v = serde_json::to_value(&self).expect("config serializes");
        for o in overrides {
            set_dotted(&mut v, o.as_ref())?;
        }
        Self::from_value(v)
    }
}

fn merge_known(base: &mut Value, patch: &Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, pv) in p {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(bv) if bv.is_object() && pv.is_object() && !is_tagged(bv) => {
                        merge_known(bv, pv, &key)?
                    }
                    Some(bv) => *bv = pv.clone(),
                    None => return Err(LdlaError::Config(format!("unknown config key `{key}`"))),
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

// Tagged enums (codec) are replaced wholesale rather than merged.
fn is_tagged(v: &Value) -> bool {
    v.get("kind").is_some()
}

/// Sets `a.b.c=value` on a JSON object, rejecting unknown paths.
pub fn set_dotted(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        LdlaError::Config(format!("override `{assignment}` is not key=value"))
    })?;
    let value: Value =
        serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| LdlaError::Config(format!("unknown config key `{key}`")))?;
        if !obj.contains_key(*part) && !(i == parts.len() - 1 && obj.contains_key("kind")) {
            return Err(LdlaError::Config(format!("unknown config key `{key}`")));
        }
        if i == parts.len() - 1 {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked above");
    }
    Ok(())
}
