//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"LDLACKPT"
//! 8       4     format version (u32, currently 1)
//! 12      8     header length H (u64)
//! 20      H     header, UTF-8 JSON (see `Header`)
//! 20+H    ...   tensor blob; each tensor is raw LE f32/f64 data at the
//!               `offset`/`len` recorded for it in the header, relative to
//!               the blob start
//! ```
//!
//! The header holds the training config, frozen codec parameters, schedule,
//! step counter, RNG position, optimizer counters and loss history. Tensors
//! are the denoiser and ScoreNet parameters followed by the Adam moment
//! buffers, in parameter order. The header records the blob's SHA-256.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Adam, LossRecord, TrainConfig, TrainState};
use crate::diffusion::{Codec, NoiseSchedule, ScheduleParams};
use crate::error::{LdlaError, Result};
use crate::networks::{Denoiser, ParamStore, ScoreNet};
use crate::tensor_util::tensor_bytes;

pub const MAGIC: &[u8; 8] = b"LDLACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    /// u128 rendered in decimal.
    word_pos: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptState {
    step: u64,
    config: super::AdamConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    codec: Codec,
    schedule: ScheduleParams,
    step: u64,
    rng: RngState,
    opt_denoiser: OptState,
    opt_scorenet: OptState,
    history: Vec<LossRecord>,
    tensors: Vec<TensorEntry>,
    /// SHA-256 of the tensor blob, hex.
    blob_sha256: String,
}

/// Training state together with what is needed to rebuild it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub codec: Codec,
    pub state: TrainState,
}

fn params(store: &ParamStore) -> Vec<(String, &Tensor)> {
    store
        .iter()
        .map(|(n, v)| (n.to_string(), v.as_tensor()))
        .collect()
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(LdlaError::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let s = &self.state;
        let mut named: Vec<(String, &Tensor)> = Vec::new();
        named.extend(params(s.denoiser.params()));
        named.extend(params(s.scorenet.params()));
        for (tag, opt, store) in [
            ("denoiser", &s.opt_denoiser, s.denoiser.params()),
            ("scorenet", &s.opt_scorenet, s.scorenet.params()),
        ] {
            for (i, n) in store.names().iter().enumerate() {
                named.push((format!("adam.{tag}.m.{n}"), &opt.m[i]));
                named.push((format!("adam.{tag}.v.{n}"), &opt.v[i]));
            }
        }
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(named.len());
        for (name, t) in named {
            let bytes = tensor_bytes(t)?;
            entries.push(TensorEntry {
                name,
                dtype: dtype_name(t.dtype())?.to_string(),
                shape: t.dims().to_vec(),
                offset: blob.len() as u64,
                len: bytes.len() as u64,
            });
            blob.extend(bytes);
        }
        let header = Header {
            config: self.config.clone(),
            codec: self.codec.clone(),
            schedule: s.schedule.params(),
            step: s.step,
            rng: RngState {
                seed: hex::encode(s.rng.get_seed()),
                stream: s.rng.get_stream(),
                word_pos: s.rng.get_word_pos().to_string(),
            },
            opt_denoiser: OptState {
                step: s.opt_denoiser.step,
                config: s.opt_denoiser.config,
            },
            opt_scorenet: OptState {
                step: s.opt_scorenet.step,
                config: s.opt_scorenet.config,
            },
            history: s.history.clone(),
            tensors: entries,
            blob_sha256: hex::encode(Sha256::digest(&blob)),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend(header);
        out.extend(blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| LdlaError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not an LDLA checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(LdlaError::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])
            .map_err(|e| LdlaError::Checkpoint(format!("header: {e}")))?;
        let blob = &bytes[header_end..];
        if hex::encode(Sha256::digest(blob)) != header.blob_sha256 {
            return Err(bad("tensor blob does not match its recorded digest"));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let start = e.offset as usize;
            let end = start + e.len as usize;
            let raw = blob
                .get(start..end)
                .ok_or_else(|| LdlaError::Checkpoint(format!("tensor `{}` truncated", e.name)))?;
            let t = match e.dtype.as_str() {
                "f32" => Tensor::from_vec(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect::<Vec<_>>(),
                    e.shape.as_slice(),
                    &Device::Cpu,
                )?,
                "f64" => Tensor::from_vec(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect::<Vec<_>>(),
                    e.shape.as_slice(),
                    &Device::Cpu,
                )?,
                other => {
                    return Err(LdlaError::Checkpoint(format!("unknown dtype `{other}`")))
                }
            };
            tensors.push((e.name.clone(), t));
        }
        let config = header.config;
        let dtype = config.precision.dtype();
        // Rebuild architecture, then overwrite every value.
        let mut scratch = ChaCha8Rng::seed_from_u64(0);
        let denoiser = Denoiser::new(config.denoiser, dtype, &mut scratch)?;
        let scorenet = ScoreNet::new(config.scorenet, dtype, &mut scratch)?;
        let nd = denoiser.params().vars().len();
        let ns = scorenet.params().vars().len();
        if tensors.len() != 3 * (nd + ns) {
            return Err(LdlaError::Checkpoint(format!(
                "expected {} tensors, found {}",
                3 * (nd + ns),
                tensors.len()
            )));
        }
        let mut rest = tensors.into_iter();
        let take = |it: &mut std::vec::IntoIter<(String, Tensor)>, k: usize| -> Vec<(String, Tensor)> {
            it.by_ref().take(k).collect()
        };
        denoiser.params().load(&take(&mut rest, nd))?;
        scorenet.params().load(&take(&mut rest, ns))?;
        let mut moments = |store: &ParamStore, tag: &str, opt: &OptState| -> Result<Adam> {
            let mut adam = Adam::new(opt.config, store)?;
            adam.step = opt.step;
            for (i, n) in store.names().iter().enumerate() {
                let (mn, m) = rest.next().ok_or_else(|| bad("missing moment"))?;
                let (vn, v) = rest.next().ok_or_else(|| bad("missing moment"))?;
                if mn != format!("adam.{tag}.m.{n}") || vn != format!("adam.{tag}.v.{n}") {
                    return Err(LdlaError::Checkpoint(format!(
                        "moment order mismatch at `{mn}`"
                    )));
                }
                adam.m[i] = m;
                adam.v[i] = v;
            }
            Ok(adam)
        };
        let opt_denoiser = moments(denoiser.params(), "denoiser", &header.opt_denoiser)?;
        let opt_scorenet = moments(scorenet.params(), "scorenet", &header.opt_scorenet)?;
        let seed: [u8; 32] = hex::decode(&header.rng.seed)
            .ok()
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| bad("bad rng seed"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(header.rng.stream);
        rng.set_word_pos(
            header
                .rng
                .word_pos
                .parse::<u128>()
                .map_err(|_| bad("bad rng word position"))?,
        );
        Ok(Self {
            state: TrainState {
                denoiser,
                scorenet,
                opt_denoiser,
                opt_scorenet,
                step: header.step,
                rng,
                schedule: NoiseSchedule::new(header.schedule)?,
                history: header.history,
            },
            codec: header.codec,
            config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| LdlaError::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| LdlaError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| LdlaError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| LdlaError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// SHA-256 of a checkpoint file.
pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| LdlaError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
