//! Trainable toy networks: the conditional noise predictor and the ScoreNet
//! regressor, plus the named parameter container they share.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{all_finite, NoisePredictor};
use crate::error::{LdlaError, Result};
use crate::tensor_util::{randn, sigmoid};

/// Ordered, named trainable tensors.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl ParamStore {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            vars: Vec::new(),
        }
    }

    fn push(&mut self, name: String, t: Tensor) -> Result<Var> {
        let v = Var::from_tensor(&t)?;
        self.names.push(name);
        self.vars.push(v.clone());
        Ok(v)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.names.iter().map(String::as_str).zip(&self.vars)
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.iter().map(|v| v.elem_count()).sum()
    }

    pub fn checksum(&self) -> Result<String> {
        crate::tensor_util::checksum(self.vars.iter().map(|v| v.as_tensor()))
    }

    /// Overwrites values from `(name, tensor)` pairs; every name must match.
    pub fn load(&self, values: &[(String, Tensor)]) -> Result<()> {
        if values.len() != self.vars.len() {
            return Err(LdlaError::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.vars.len(),
                values.len()
            )));
        }
        for ((name, var), (vname, t)) in self.names.iter().zip(&self.vars).zip(values) {
            if name != vname || var.dims() != t.dims() {
                return Err(LdlaError::Checkpoint(format!(
                    "parameter mismatch: `{name}` {:?} vs `{vname}` {:?}",
                    var.dims(),
                    t.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> Result<bool> {
        for v in &self.vars {
            if !all_finite(v.as_tensor())? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Deep copy with fresh variables.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = Self::new();
        for (n, v) in self.iter() {
            out.push(n.to_string(), v.as_tensor().copy()?)?;
        }
        Ok(out)
    }
}

struct Init<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
    dtype: DType,
    prefix: &'a str,
}

impl<R: Rng> Init<'_, R> {
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<Conv> {
        let fan_in = (c_in * k * k) as f64;
        let w = randn(self.rng, (c_out, c_in, k, k), self.dtype)?.affine(fan_in.sqrt().recip(), 0.0)?;
        let b = Tensor::zeros(c_out, self.dtype, &Device::Cpu)?;
        Ok(Conv {
            w: self.store.push(format!("{}.{name}.weight", self.prefix), w)?,
            b: self.store.push(format!("{}.{name}.bias", self.prefix), b)?,
            padding: k / 2,
        })
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<Linear> {
        let w = randn(self.rng, (d_out, d_in), self.dtype)?.affine((d_in as f64).sqrt().recip(), 0.0)?;
        let b = Tensor::zeros(d_out, self.dtype, &Device::Cpu)?;
        Ok(Linear {
            w: self.store.push(format!("{}.{name}.weight", self.prefix), w)?,
            b: self.store.push(format!("{}.{name}.bias", self.prefix), b)?,
        })
    }
}

#[derive(Debug, Clone)]
struct Conv {
    w: Var,
    b: Var,
    padding: usize,
}

impl Conv {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.w.as_tensor(), self.padding, 1, 1, 1)?;
        let c = self.b.dims()[0];
        Ok(y.broadcast_add(&self.b.as_tensor().reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: Var,
    b: Var,
}

impl Linear {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.w.as_tensor().t()?)?.broadcast_add(self.b.as_tensor())?)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv,
    film: Linear,
    conv2: Conv,
    channels: usize,
}

impl ResBlock {
    fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, c: usize, emb: usize) -> Result<Self> {
        Ok(Self {
            conv1: init.conv(&format!("{name}.conv1"), c, c, 3)?,
            film: init.linear(&format!("{name}.film"), emb, 2 * c)?,
            conv2: init.conv(&format!("{name}.conv2"), c, c, 3)?,
            channels: c,
        })
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let n = x.dims()[0];
        let c = self.channels;
        let h = self.conv1.forward(&x.silu()?)?;
        let film = self.film.forward(emb)?;
        let scale = (film.narrow(1, 0, c)? + 1.0)?.reshape((n, c, 1, 1))?;
        let shift = film.narrow(1, c, c)?.reshape((n, c, 1, 1))?;
        let h = h.broadcast_mul(&scale)?.broadcast_add(&shift)?;
        let h = self.conv2.forward(&h.silu()?)?;
        Ok((x + h)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub width: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub emb_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 8,
            width: 32,
            cond_dim: 32,
            time_dim: 32,
            emb_dim: 64,
        }
    }
}

/// Two-level encoder-decoder with FiLM conditioning on timestep and the
/// mean-pooled prompt tokens, plus an embedding-controlled per-channel gain
/// on the input added to the output.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamStore,
    time_proj: Linear,
    cond_proj: Linear,
    conv_in: Conv,
    res_high: ResBlock,
    down: Conv,
    res_low: ResBlock,
    up: Conv,
    res_out: ResBlock,
    conv_out: Conv,
    skip_gain: Linear,
}

impl Denoiser {
    pub fn new<R: Rng>(config: DenoiserConfig, dtype: DType, rng: &mut R) -> Result<Self> {
        let DenoiserConfig {
            latent_channels: c,
            width: w,
            cond_dim,
            time_dim,
            emb_dim: e,
        } = config;
        if c == 0 || w == 0 || cond_dim == 0 || time_dim < 2 || e == 0 {
            return Err(LdlaError::Config(format!("invalid denoiser config {config:?}")));
        }
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            rng,
            dtype,
            prefix: "denoiser",
        };
        let time_proj = init.linear("time_proj", time_dim, e)?;
        let cond_proj = init.linear("cond_proj", cond_dim, e)?;
        let conv_in = init.conv("conv_in", c, w, 3)?;
        let res_high = ResBlock::new(&mut init, "res_high", w, e)?;
        let down = init.conv("down", w, 2 * w, 3)?;
        let res_low = ResBlock::new(&mut init, "res_low", 2 * w, e)?;
        let up = init.conv("up", 2 * w, w, 3)?;
        let res_out = ResBlock::new(&mut init, "res_out", w, e)?;
        let conv_out = init.conv("conv_out", w, c, 3)?;
        let skip_gain = init.linear("skip_gain", e, c)?;
        Ok(Self {
            config,
            params,
            time_proj,
            cond_proj,
            conv_in,
            res_high,
            down,
            res_low,
            up,
            res_out,
            conv_out,
            skip_gain,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.conv_in.w.dtype()
    }

    /// Predicted noise with the same shape as `zt`.
    pub fn forward(&self, zt: &Tensor, ts: &[usize], cond: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = zt.dims4()?;
        if c != self.config.latent_channels || h % 2 != 0 || w % 2 != 0 {
            return Err(LdlaError::Shape(format!(
                "denoiser expects (N, {}, even, even), got {:?}",
                self.config.latent_channels,
                zt.dims()
            )));
        }
        if ts.len() != n || cond.dims() != [n, cond.dims()[1], self.config.cond_dim] {
            return Err(LdlaError::Shape(format!(
                "denoiser batch mismatch: {n} latents, {} timesteps, cond {:?}",
                ts.len(),
                cond.dims()
            )));
        }
        let dtype = zt.dtype();
        let temb = timestep_embedding(ts, self.config.time_dim, dtype)?;
        let pooled = cond.to_dtype(dtype)?.mean(1)?;
        let emb = (self.time_proj.forward(&temb)? + self.cond_proj.forward(&pooled)?)?.silu()?;
        let stage = |name: &str, t: Tensor| -> Result<Tensor> {
            if !all_finite(&t)? {
                return Err(LdlaError::NonFinite {
                    layer: format!("denoiser.{name}"),
                });
            }
            Ok(t)
        };
        let emb = stage("embedding", emb)?;
        let h0 = stage("conv_in", self.conv_in.forward(zt)?)?;
        let h1 = stage("res_high", self.res_high.forward(&h0, &emb)?)?;
        let d = self.down.forward(&h1.avg_pool2d(2)?)?;
        let d = stage("res_low", self.res_low.forward(&d, &emb)?)?;
        let u = self.up.forward(&d.upsample_nearest2d(h, w)?)?;
        let u = self.res_out.forward(&(u + &h1)?, &emb)?;
        let u = stage("res_out", u)?;
        let out = self.conv_out.forward(&u.silu()?)?;
        let gain = self.skip_gain.forward(&emb)?.reshape((n, c, 1, 1))?;
        stage("conv_out", (out + zt.broadcast_mul(&gain)?)?)
    }
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, zt: &Tensor, ts: &[usize], cond: &Tensor) -> Result<Tensor> {
        self.forward(zt, ts, cond)
    }
}

/// Sinusoidal timestep features, `(N, dim)`.
pub fn timestep_embedding(ts: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let mut row = vec![0.0f64; dim];
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            row[i] = arg.sin();
            row[half + i] = arg.cos();
        }
        data.extend(row);
    }
    Ok(Tensor::from_vec(data, (ts.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreNetConfig {
    pub latent_channels: usize,
    pub width: usize,
}

impl Default for ScoreNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 8,
            width: 16,
        }
    }
}

/// Convolutional regressor from a latent to a sigmoid-bounded score.
#[derive(Debug, Clone)]
pub struct ScoreNet {
    config: ScoreNetConfig,
    params: ParamStore,
    conv1: Conv,
    conv2: Conv,
    conv3: Conv,
    head: Linear,
}

impl ScoreNet {
    pub fn new<R: Rng>(config: ScoreNetConfig, dtype: DType, rng: &mut R) -> Result<Self> {
        let ScoreNetConfig {
            latent_channels: c,
            width: w,
        } = config;
        if c == 0 || w == 0 {
            return Err(LdlaError::Config(format!("invalid scorenet config {config:?}")));
        }
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            rng,
            dtype,
            prefix: "scorenet",
        };
        let conv1 = init.conv("conv1", c, w, 3)?;
        let conv2 = init.conv("conv2", w, 2 * w, 3)?;
        let conv3 = init.conv("conv3", 2 * w, 2 * w, 3)?;
        let head = init.linear("head", 2 * w, 1)?;
        Ok(Self {
            config,
            params,
            conv1,
            conv2,
            conv3,
            head,
        })
    }

    pub fn config(&self) -> &ScoreNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Scores in `[0, 1]`, shape `(N,)`.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = z.dims4()?;
        if c != self.config.latent_channels || h % 4 != 0 || w % 4 != 0 {
            return Err(LdlaError::Shape(format!(
                "scorenet expects (N, {}, 4k, 4k), got {:?}",
                self.config.latent_channels,
                z.dims()
            )));
        }
        let x = self.conv1.forward(z)?.silu()?.avg_pool2d(2)?;
        let x = self.conv2.forward(&x)?.silu()?.avg_pool2d(2)?;
        let x = self.conv3.forward(&x)?.silu()?;
        let pooled = x.mean(3)?.mean(2)?;
        let logits = self.head.forward(&pooled)?.reshape(n)?;
        sigmoid(&logits)
    }
}

/// Anything that scores latents in `[0, 1]`.
pub trait ScorePredictor {
    fn predict_score(&self, z: &Tensor) -> Result<Tensor>;
}

impl ScorePredictor for ScoreNet {
    fn predict_score(&self, z: &Tensor) -> Result<Tensor> {
        self.forward(z)
    }
}

/// Single-sample convenience wrapper.
pub fn scorenet_predict(net: &ScoreNet, z: &Tensor) -> Result<f64> {
    let z = if z.rank() == 3 { z.unsqueeze(0)? } else { z.clone() };
    crate::tensor_util::scalar(&net.forward(&z)?.squeeze(0)?)
}

pub fn denoiser_predict(
    net: &Denoiser,
    zt: &Tensor,
    t: usize,
    cond: &Tensor,
) -> Result<Tensor> {
    let n = zt.dims()[0];
    net.forward(zt, &vec![t; n], cond)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_util::scalar;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro_denoiser(dtype: DType) -> Denoiser {
        let cfg = DenoiserConfig {
            latent_channels: 2,
            width: 4,
            cond_dim: 6,
            time_dim: 8,
            emb_dim: 8,
        };
        Denoiser::new(cfg, dtype, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    #[test]
    fn shape_contract_and_parameter_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for cfg in [
            DenoiserConfig::default(),
            DenoiserConfig {
                latent_channels: 3,
                width: 8,
                cond_dim: 16,
                time_dim: 16,
                emb_dim: 16,
            },
        ] {
            let net = Denoiser::new(cfg, DType::F32, &mut rng).unwrap();
            assert!(net.params().num_parameters() <= 1_000_000);
            let z = randn(&mut rng, (2, cfg.latent_channels, 8, 12), DType::F32).unwrap();
            let cond = randn(&mut rng, (2, 5, cfg.cond_dim), DType::F32).unwrap();
            let out = net.forward(&z, &[3, 900], &cond).unwrap();
            assert_eq!(out.dims(), z.dims());
        }
        assert!(micro_denoiser(DType::F64).params().num_parameters() <= 5_000);
    }

    #[test]
    fn timestep_changes_output() {
        let net = micro_denoiser(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = randn(&mut rng, (1, 2, 4, 4), DType::F64).unwrap();
        let cond = randn(&mut rng, (1, 3, 6), DType::F64).unwrap();
        let a = net.forward(&z, &[10], &cond).unwrap();
        let b = net.forward(&z, &[500], &cond).unwrap();
        let diff = scalar(&(a - b).unwrap().abs().unwrap().sum_all().unwrap()).unwrap();
        assert!(diff > 1e-6);
    }

    #[test]
    fn deterministic_outputs() {
        let net = micro_denoiser(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = randn(&mut rng, (1, 2, 4, 4), DType::F32).unwrap();
        let cond = randn(&mut rng, (1, 3, 6), DType::F32).unwrap();
        let a: Vec<f32> = net.forward(&z, &[7], &cond).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = net.forward(&z, &[7], &cond).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    /// Central finite difference of `f` in one parameter coordinate.
    fn finite_difference(var: &Var, index: usize, h: f64, f: &dyn Fn() -> f64) -> f64 {
        let orig = crate::tensor_util::to_f64_vec(var.as_tensor()).unwrap();
        let dims = var.dims().to_vec();
        let set = |delta: f64| {
            let mut v = orig.clone();
            v[index] += delta;
            var.set(&Tensor::from_vec(v, dims.as_slice(), &Device::Cpu).unwrap())
                .unwrap();
        };
        set(h);
        let plus = f();
        set(-h);
        let minus = f();
        set(0.0);
        (plus - minus) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn denoiser_gradient_matches_finite_differences() {
        let net = micro_denoiser(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = randn(&mut rng, (1, 2, 4, 4), DType::F64).unwrap();
        let cond = randn(&mut rng, (1, 3, 6), DType::F64).unwrap();
        let loss = || net.forward(&z, &[123], &cond).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss().backward().unwrap();
        for (name, var) in net.params().iter().step_by(3) {
            let g = crate::tensor_util::to_f64_vec(grads.get(var).unwrap()).unwrap();
            let idx = g.len() / 2;
            let fd = finite_difference(var, idx, 1e-6, &|| scalar(&loss()).unwrap());
            assert!(rel_err(g[idx], fd) < 1e-3, "{name}: {} vs {fd}", g[idx]);
        }
    }

    #[test]
    fn scorenet_bounded_and_differentiable() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = ScoreNet::new(
            ScoreNetConfig {
                latent_channels: 2,
                width: 3,
            },
            DType::F64,
            &mut rng,
        )
        .unwrap();
        for scale in [0.0, 1.0, 100.0, 1e4] {
            let z = randn(&mut rng, (3, 2, 8, 8), DType::F64).unwrap().affine(scale, 0.0).unwrap();
            let s = crate::tensor_util::to_f64_vec(&net.forward(&z).unwrap()).unwrap();
            assert!(s.iter().all(|v| (0.0..=1.0).contains(v)), "{s:?}");
        }
        let z = randn(&mut rng, (1, 2, 8, 8), DType::F64).unwrap();
        let loss = || net.forward(&z).unwrap().sum_all().unwrap();
        let grads = loss().backward().unwrap();
        for (name, var) in net.params().iter() {
            let g = crate::tensor_util::to_f64_vec(grads.get(var).unwrap()).unwrap();
            let idx = g.len() - 1;
            let fd = finite_difference(var, idx, 1e-6, &|| scalar(&loss()).unwrap());
            assert!(rel_err(g[idx], fd) < 1e-3, "{name}: {} vs {fd}", g[idx]);
        }
    }

    #[test]
    fn non_finite_input_names_layer() {
        let net = micro_denoiser(DType::F32);
        let z = Tensor::full(f32::NAN, (1, 2, 4, 4), &Device::Cpu).unwrap();
        let cond = Tensor::zeros((1, 3, 6), DType::F32, &Device::Cpu).unwrap();
        match net.forward(&z, &[1], &cond) {
            Err(LdlaError::NonFinite { layer }) => assert_eq!(layer, "denoiser.conv_in"),
            other => panic!("{other:?}"),
        }
    }
}
