//! Small tensor helpers shared across modules.

use candle_core::{DType, Device, Shape, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Unit Gaussian tensor drawn from a caller-owned RNG (candle's own sampler is
/// not seedable per call).
pub fn randn<R: Rng + ?Sized, S: Into<Shape>>(rng: &mut R, shape: S, dtype: DType) -> Result<Tensor> {
    let shape = shape.into();
    let n = shape.elem_count();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Mean squared error over all elements.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Per-row mean squared error, `(N, ...) -> (N,)`.
pub fn mse_per_row(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = a.dims()[0];
    Ok((a - b)?.sqr()?.reshape((n, ()))?.mean(1)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Little-endian bytes of a tensor in its own dtype.
pub fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat
            .to_vec1::<f32>()?
            .into_iter()
            .flat_map(f32::to_le_bytes)
            .collect(),
        DType::F64 => flat
            .to_vec1::<f64>()?
            .into_iter()
            .flat_map(f64::to_le_bytes)
            .collect(),
        other => {
            return Err(crate::error::LdlaError::Numeric(format!(
                "unsupported dtype {other:?}"
            )))
        }
    })
}

pub fn checksum<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Result<String> {
    let mut h = Sha256::new();
    for t in tensors {
        h.update(tensor_bytes(t)?);
    }
    Ok(hex::encode(h.finalize()))
}
