//! Frozen image codecs mapping pixel grids to latent grids.

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::LatentGrid;
use crate::error::{LdlaError, Result};
use crate::pixels::PixelGrid;

pub trait LatentCodec: Send + Sync {
    /// Spatial downsampling factor.
    fn factor(&self) -> usize;
    fn latent_channels(&self) -> usize;
    fn encode(&self, image: &PixelGrid) -> Result<LatentGrid>;
    fn decode(&self, z: &LatentGrid) -> Result<PixelGrid>;
    /// Digest over every codec parameter.
    fn checksum(&self) -> String;
}

fn check_divisible(image: &PixelGrid, factor: usize) -> Result<()> {
    if image.width() % factor != 0 || image.height() % factor != 0 {
        return Err(LdlaError::Shape(format!(
            "image {}x{} not divisible by codec factor {factor}",
            image.width(),
            image.height()
        )));
    }
    Ok(())
}

/// Latent equals the pixel grid (factor 1, three channels).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn factor(&self) -> usize {
        1
    }

    fn latent_channels(&self) -> usize {
        3
    }

    fn encode(&self, image: &PixelGrid) -> Result<LatentGrid> {
        LatentGrid::new(image.to_tensor(DType::F32, &Device::Cpu)?)
    }

    fn decode(&self, z: &LatentGrid) -> Result<PixelGrid> {
        PixelGrid::from_tensor(z.tensor())
    }

    fn checksum(&self) -> String {
        hex::encode(Sha256::digest(b"identity-codec"))
    }
}

/// Linear patch autoencoder learned by principal component analysis.
///
/// Each non-overlapping `patch x patch x 3` block is projected on the top
/// `channels` principal directions of the training patches and whitened, so
/// latents have roughly unit variance per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaCodec {
    patch: usize,
    channels: usize,
    mean: Vec<f64>,
    /// Row-major `channels x (patch * patch * 3)`.
    basis: Vec<f64>,
    scale: Vec<f64>,
}

impl PcaCodec {
    pub fn fit(images: &[PixelGrid], patch: usize, channels: usize) -> Result<Self> {
        let dim = patch * patch * 3;
        if channels == 0 || channels > dim {
            return Err(LdlaError::Config(format!(
                "codec channels must be in 1..={dim}, got {channels}"
            )));
        }
        if images.is_empty() {
            return Err(LdlaError::Config("codec fit needs images".into()));
        }
        let mut mean = vec![0.0f64; dim];
        let mut count = 0usize;
        for img in images {
            check_divisible(img, patch)?;
            for_each_patch(img, patch, |v| {
                for (m, x) in mean.iter_mut().zip(v) {
                    *m += x;
                }
                count += 1;
            });
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        let mut centered = vec![0.0; dim];
        for img in images {
            for_each_patch(img, patch, |v| {
                for (c, (x, m)) in centered.iter_mut().zip(v.iter().zip(&mean)) {
                    *c = x - m;
                }
                for i in 0..dim {
                    let ci = centered[i];
                    for j in i..dim {
                        cov[(i, j)] += ci * centered[j];
                    }
                }
            });
        }
        for i in 0..dim {
            for j in i..dim {
                let v = cov[(i, j)] / (count.max(2) - 1) as f64;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut basis = Vec::with_capacity(channels * dim);
        let mut scale = Vec::with_capacity(channels);
        for &k in order.iter().take(channels) {
            let col = eig.eigenvectors.column(k);
            // sign convention: largest-magnitude coordinate positive
            let pivot = col
                .iter()
                .copied()
                .max_by(|a, b| a.abs().total_cmp(&b.abs()))
                .unwrap_or(1.0);
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            basis.extend(col.iter().map(|x| x * sign));
            scale.push(eig.eigenvalues[k].max(1e-8).sqrt());
        }
        Ok(Self {
            patch,
            channels,
            mean,
            basis,
            scale,
        })
    }

    fn dim(&self) -> usize {
        self.patch * self.patch * 3
    }
}

fn for_each_patch(img: &PixelGrid, patch: usize, mut f: impl FnMut(&[f64])) {
    let mut buf = vec![0.0f64; patch * patch * 3];
    for by in 0..img.height() / patch {
        for bx in 0..img.width() / patch {
            gather_patch(img, patch, bx, by, &mut buf);
            f(&buf);
        }
    }
}

fn gather_patch(img: &PixelGrid, patch: usize, bx: usize, by: usize, buf: &mut [f64]) {
    let mut k = 0;
    for dy in 0..patch {
        for dx in 0..patch {
            let px = img.pixel(bx * patch + dx, by * patch + dy);
            for c in px {
                buf[k] = f64::from(c);
                k += 1;
            }
        }
    }
}

impl LatentCodec for PcaCodec {
    fn factor(&self) -> usize {
        self.patch
    }

    fn latent_channels(&self) -> usize {
        self.channels
    }

    fn encode(&self, image: &PixelGrid) -> Result<LatentGrid> {
        check_divisible(image, self.patch)?;
        let (lw, lh) = (image.width() / self.patch, image.height() / self.patch);
        let dim = self.dim();
        let mut out = vec![0f32; self.channels * lw * lh];
        let mut buf = vec![0.0f64; dim];
        for by in 0..lh {
            for bx in 0..lw {
                gather_patch(image, self.patch, bx, by, &mut buf);
                for (b, m) in buf.iter_mut().zip(&self.mean) {
                    *b -= m;
                }
                for c in 0..self.channels {
                    let row = &self.basis[c * dim..(c + 1) * dim];
                    let proj: f64 = row.iter().zip(&buf).map(|(r, x)| r * x).sum();
                    out[(c * lh + by) * lw + bx] = (proj / self.scale[c]) as f32;
                }
            }
        }
        LatentGrid::new(Tensor::from_vec(
            out,
            (1, self.channels, lh, lw),
            &Device::Cpu,
        )?)
    }

    fn decode(&self, z: &LatentGrid) -> Result<PixelGrid> {
        let (n, c, lh, lw) = z.tensor().dims4()?;
        if n != 1 || c != self.channels {
            return Err(LdlaError::Shape(format!(
                "codec expects (1, {}, h, w) latents, got {:?}",
                self.channels,
                z.tensor().dims()
            )));
        }
        let vals: Vec<f64> = z.tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let (w, h) = (lw * self.patch, lh * self.patch);
        let dim = self.dim();
        let mut img = PixelGrid::filled(w, h, [0.0; 3]);
        let mut buf = vec![0.0f64; dim];
        for by in 0..lh {
            for bx in 0..lw {
                buf.copy_from_slice(&self.mean);
                for ch in 0..self.channels {
                    let coeff = vals[(ch * lh + by) * lw + bx] * self.scale[ch];
                    let row = &self.basis[ch * dim..(ch + 1) * dim];
                    for (b, r) in buf.iter_mut().zip(row) {
                        *b += coeff * r;
                    }
                }
                let mut k = 0;
                for dy in 0..self.patch {
                    for dx in 0..self.patch {
                        for chan in 0..3 {
                            img.set(bx * self.patch + dx, by * self.patch + dy, chan, buf[k] as f32);
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(img)
    }

    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.patch as u64).to_le_bytes());
        h.update((self.channels as u64).to_le_bytes());
        for v in self.mean.iter().chain(&self.basis).chain(&self.scale) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Serializable codec choice stored alongside model checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Codec {
    Identity,
    Pca(PcaCodec),
}

impl Codec {
    fn inner(&self) -> &dyn LatentCodec {
        match self {
            Codec::Identity => &IdentityCodec,
            Codec::Pca(p) => p,
        }
    }
}

impl LatentCodec for Codec {
    fn factor(&self) -> usize {
        self.inner().factor()
    }

    fn latent_channels(&self) -> usize {
        self.inner().latent_channels()
    }

    fn encode(&self, image: &PixelGrid) -> Result<LatentGrid> {
        self.inner().encode(image)
    }

    fn decode(&self, z: &LatentGrid) -> Result<PixelGrid> {
        self.inner().decode(z)
    }

    fn checksum(&self) -> String {
        self.inner().checksum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> PixelGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h * 3).map(|_| rng.random::<f32>()).collect();
        PixelGrid::new(w, h, data).unwrap()
    }

    #[test]
    fn identity_round_trip_is_bitwise() {
        let img = random_image(16, 8, 1);
        let z = IdentityCodec.encode(&img).unwrap();
        assert_eq!(IdentityCodec.decode(&z).unwrap(), img);
    }

    #[test]
    fn pca_shapes_and_divisibility() {
        let imgs: Vec<_> = (0..4).map(|s| random_image(32, 32, s)).collect();
        let codec = PcaCodec::fit(&imgs, 4, 8).unwrap();
        let crop = random_image(128, 128, 9);
        let z = codec.encode(&crop).unwrap();
        assert_eq!(z.tensor().dims(), &[1, 8, 32, 32]);
        assert!(matches!(
            codec.encode(&random_image(130, 128, 3)),
            Err(LdlaError::Shape(_))
        ));
    }

    #[test]
    fn full_rank_pca_is_lossless() {
        let imgs: Vec<_> = (0..6).map(|s| random_image(16, 16, s)).collect();
        let codec = PcaCodec::fit(&imgs, 2, 12).unwrap();
        let z = codec.encode(&imgs[0]).unwrap();
        let back = codec.decode(&z).unwrap();
        let err = back
            .data()
            .iter()
            .zip(imgs[0].data())
            .map(|(a, b)| (a - b).abs())
            .fold(0f32, f32::max);
        assert!(err < 1e-4, "{err}");
    }
}
