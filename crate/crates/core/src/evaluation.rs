//! FID and MAE metrics and the evaluation protocols built on them.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::atlas::{ZoneRegistry, ZoneSpec};
use crate::data::{load_manifest, wrinkle_density_oracle, Manifest, ManifestRecord};
use crate::diffusion::{Codec, LatentCodec};
use crate::error::{LdlaError, Result};
use crate::networks::{scorenet_predict, ScoreNet};
use crate::pixels::PixelGrid;

/// Eigenvalues below `-EIGEN_CLAMP_TOLERANCE * max(1, largest)` are treated
/// as a failed square root rather than rounding noise.
pub const EIGEN_CLAMP_TOLERANCE: f64 = 1e-6;

/// Gaussian summary of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Streaming mean/covariance with an associative merge.
#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    n: usize,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl StatsAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: DVector::zeros(dim),
            m2: DMatrix::zeros(dim, dim),
        }
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.mean.len() {
            return Err(LdlaError::Shape(format!(
                "feature of length {} pushed into {}-dim accumulator",
                x.len(),
                self.mean.len()
            )));
        }
        let x = DVector::from_column_slice(x);
        self.n += 1;
        let delta = &x - &self.mean;
        self.mean += &delta / self.n as f64;
        let delta2 = &x - &self.mean;
        self.m2 += &delta * delta2.transpose();
        Ok(())
    }

    pub fn merge(&mut self, other: &StatsAccumulator) -> Result<()> {
        if other.mean.len() != self.mean.len() {
            return Err(LdlaError::Shape("merging accumulators of different dims".into()));
        }
        if other.n == 0 {
            return Ok(());
        }
        if self.n == 0 {
            *self = other.clone();
            return Ok(());
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let delta = &other.mean - &self.mean;
        self.mean += &delta * (nb / n);
        self.m2 += &other.m2 + &delta * delta.transpose() * (na * nb / n);
        self.n += other.n;
        Ok(())
    }

    /// Unbiased covariance, symmetrized.
    pub fn finish(&self) -> Result<FeatureStats> {
        if self.n < 2 {
            return Err(LdlaError::Domain(format!(
                "feature statistics need at least 2 samples, got {}",
                self.n
            )));
        }
        let s = &self.m2 / (self.n as f64 - 1.0);
        Ok(FeatureStats {
            mu: self.mean.clone(),
            sigma: (&s + s.transpose()) * 0.5,
            n: self.n,
        })
    }
}

pub fn stats_from_features(features: &[Vec<f64>]) -> Result<FeatureStats> {
    let dim = features.first().map(Vec::len).unwrap_or(0);
    let mut acc = StatsAccumulator::new(dim);
    for f in features {
        acc.push(f)?;
    }
    acc.finish()
}

/// Image to feature vector. The desk-scale default is [`AvgPoolExtractor`];
/// a pretrained network can be plugged in through this trait.
pub trait FeatureExtractor: Send + Sync {
    fn dim(&self) -> usize;
    fn features(&self, image: &PixelGrid) -> Result<Vec<f64>>;
}

/// Mean colour over a `grid x grid` partition: `grid * grid * 3` features.
#[derive(Debug, Clone, Copy)]
pub struct AvgPoolExtractor {
    pub grid: usize,
}

impl Default for AvgPoolExtractor {
    fn default() -> Self {
        Self { grid: 4 }
    }
}

impl FeatureExtractor for AvgPoolExtractor {
    fn dim(&self) -> usize {
        self.grid * self.grid * 3
    }

    fn features(&self, image: &PixelGrid) -> Result<Vec<f64>> {
        let (w, h, g) = (image.width(), image.height(), self.grid);
        if w < g || h < g {
            return Err(LdlaError::Shape(format!(
                "image {w}x{h} smaller than the {g}x{g} pooling grid"
            )));
        }
        let mut out = Vec::with_capacity(self.dim());
        for gy in 0..g {
            for gx in 0..g {
                let (x0, x1) = (gx * w / g, (gx + 1) * w / g);
                let (y0, y1) = (gy * h / g, (gy + 1) * h / g);
                let mut sum = [0.0f64; 3];
                for y in y0..y1 {
                    for x in x0..x1 {
                        for (c, s) in sum.iter_mut().enumerate() {
                            *s += image.get(x, y, c) as f64;
                        }
                    }
                }
                let count = ((x1 - x0) * (y1 - y0)) as f64;
                out.extend(sum.iter().map(|s| s / count));
            }
        }
        Ok(out)
    }
}

pub fn compute_stats(images: &[PixelGrid], extractor: &dyn FeatureExtractor) -> Result<FeatureStats> {
    if images.len() < 2 {
        return Err(LdlaError::Domain(format!(
            "feature statistics need at least 2 images, got {}",
            images.len()
        )));
    }
    let mut acc = StatsAccumulator::new(extractor.dim());
    for img in images {
        acc.push(&extractor.features(img)?)?;
    }
    acc.finish()
}

fn sym_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new((m + m.transpose()) * 0.5)
}

fn clamped_eigenvalues(vals: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let largest = vals.iter().cloned().fold(0.0f64, f64::max);
    let floor = -EIGEN_CLAMP_TOLERANCE * largest.max(1.0);
    if let Some(&bad) = vals.iter().find(|&&v| v < floor) {
        return Err(LdlaError::Numeric(format!(
            "{what} has eigenvalue {bad:e}, beyond the clamp tolerance"
        )));
    }
    Ok(vals.map(|v| v.max(0.0)))
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The trace of the product root is computed as
/// `tr((S_a^(1/2) S_b S_a^(1/2))^(1/2))`, which keeps every decomposition
/// symmetric.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() || a.sigma.nrows() != b.sigma.nrows() {
        return Err(LdlaError::Shape(format!(
            "feature dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let diff = (&a.mu - &b.mu).norm_squared();
    let ea = sym_eigen(&a.sigma);
    let la = clamped_eigenvalues(&ea.eigenvalues, "first covariance")?;
    let root_a = &ea.eigenvectors
        * DMatrix::from_diagonal(&la.map(f64::sqrt))
        * ea.eigenvectors.transpose();
    let inner = &root_a * &b.sigma * &root_a;
    let ei = sym_eigen(&inner);
    let li = clamped_eigenvalues(&ei.eigenvalues, "covariance product")?;
    let tr_root: f64 = li.iter().map(|v| v.sqrt()).sum();
    let d = diff + a.sigma.trace() + b.sigma.trace() - 2.0 * tr_root;
    if !d.is_finite() {
        return Err(LdlaError::Numeric("non-finite Frechet distance".into()));
    }
    Ok(d.max(0.0))
}

/// Mean absolute difference between predicted and target normalized scores.
pub fn mae_scores(predicted: &[f64], target: &[f64]) -> Result<f64> {
    if predicted.len() != target.len() {
        return Err(LdlaError::Shape(format!(
            "{} predictions for {} targets",
            predicted.len(),
            target.len()
        )));
    }
    if predicted.is_empty() {
        return Err(LdlaError::Domain("mae of empty score lists".into()));
    }
    if let Some(v) = predicted
        .iter()
        .chain(target)
        .find(|v| !(0.0..=1.0).contains(*v))
    {
        return Err(LdlaError::Validation(format!(
            "score {v} outside [0, 1]"
        )));
    }
    let sum: f64 = predicted.iter().zip(target).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / predicted.len() as f64)
}

/// FID between two random equal halves of a feature set.
pub fn split_reference_fid_features<R: Rng + ?Sized>(
    features: &[Vec<f64>],
    rng: &mut R,
) -> Result<f64> {
    if features.len() < 4 {
        return Err(LdlaError::Domain(format!(
            "split reference needs at least 4 samples, got {}",
            features.len()
        )));
    }
    let mut idx: Vec<usize> = (0..features.len()).collect();
    idx.shuffle(rng);
    let half = features.len() / 2;
    let pick = |ix: &[usize]| ix.iter().map(|&i| features[i].clone()).collect::<Vec<_>>();
    let a = stats_from_features(&pick(&idx[..half]))?;
    let b = stats_from_features(&pick(&idx[half..2 * half]))?;
    frechet_distance(&a, &b)
}

pub fn split_reference_fid<R: Rng + ?Sized>(
    images: &[PixelGrid],
    extractor: &dyn FeatureExtractor,
    rng: &mut R,
) -> Result<f64> {
    let features = images
        .iter()
        .map(|i| extractor.features(i))
        .collect::<Result<Vec<_>>>()?;
    split_reference_fid_features(&features, rng)
}

/// Predicts the normalized aging score of a zone crop.
pub trait ImageScorer: Send + Sync {
    fn score(&self, image: &PixelGrid, zone: &ZoneSpec) -> Result<f64>;
}

/// Scores crops with the wrinkle density oracle.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleScorer;

impl ImageScorer for OracleScorer {
    fn score(&self, image: &PixelGrid, zone: &ZoneSpec) -> Result<f64> {
        Ok(wrinkle_density_oracle(image, zone))
    }
}

/// Scores crops with a trained ScoreNet on codec latents.
#[derive(Debug, Clone)]
pub struct ScoreNetScorer {
    pub codec: Codec,
    pub scorenet: ScoreNet,
}

impl ImageScorer for ScoreNetScorer {
    fn score(&self, image: &PixelGrid, _zone: &ZoneSpec) -> Result<f64> {
        let z = self.codec.encode(image)?.into_tensor();
        let dtype = self.scorenet.params().vars()[0].dtype();
        scorenet_predict(&self.scorenet, &z.to_dtype(dtype)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneReport {
    pub n_real: usize,
    pub n_generated: usize,
    /// Absent when either side has fewer than two crops of the zone.
    pub fid: Option<f64>,
    pub mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fid: f64,
    /// Generated manifest scores are read as the requested targets.
    pub mae: Option<f64>,
    pub reference_fid: Option<f64>,
    pub per_zone: BTreeMap<String, ZoneReport>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOptions {
    pub split_reference: bool,
    pub seed: u64,
    pub extractor_grid: usize,
    pub scorer: String,
}

fn load_images(m: &Manifest) -> Result<Vec<(ManifestRecord, PixelGrid)>> {
    m.records
        .iter()
        .map(|r| Ok((r.clone(), PixelGrid::load_png(m.resolve(r))?)))
        .collect()
}

/// Compares a generated set against a real one: overall and per-zone FID,
/// MAE of the scorer against the generated set's recorded targets, and
/// optionally the split-half reference FID of the real set.
pub fn evaluate(
    real: &Path,
    generated: &Path,
    registry: &ZoneRegistry,
    scorer: Option<&dyn ImageScorer>,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let extractor = AvgPoolExtractor {
        grid: options.extractor_grid,
    };
    let real = load_images(&load_manifest(real)?)?;
    let generated = load_images(&load_manifest(generated)?)?;
    let feats = |set: &[(ManifestRecord, PixelGrid)]| -> Result<Vec<(String, Vec<f64>)>> {
        set.iter()
            .map(|(r, i)| Ok((r.zone_id.clone(), extractor.features(i)?)))
            .collect()
    };
    let fr = feats(&real)?;
    let fg = feats(&generated)?;
    let all = |f: &[(String, Vec<f64>)]| f.iter().map(|(_, v)| v.clone()).collect::<Vec<_>>();
    let fid = frechet_distance(&stats_from_features(&all(&fr))?, &stats_from_features(&all(&fg))?)?;

    let mut predictions: Vec<(String, f64, f64)> = Vec::new();
    if let Some(scorer) = scorer {
        for (rec, img) in &generated {
            let zone = registry.require(&rec.zone_id)?;
            predictions.push((
                rec.zone_id.clone(),
                scorer.score(img, zone)?.clamp(0.0, 1.0),
                rec.normalized_score(),
            ));
        }
    }
    let mae_of = |rows: Vec<&(String, f64, f64)>| -> Result<Option<f64>> {
        if rows.is_empty() {
            return Ok(None);
        }
        let p: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let t: Vec<f64> = rows.iter().map(|r| r.2).collect();
        mae_scores(&p, &t).map(Some)
    };
    let mae = mae_of(predictions.iter().collect())?;

    let mut per_zone = BTreeMap::new();
    for zone in registry.zones() {
        let id = zone.zone_id.as_str();
        let pick = |f: &[(String, Vec<f64>)]| {
            f.iter().filter(|(z, _)| z == id).map(|(_, v)| v.clone()).collect::<Vec<_>>()
        };
        let (zr, zg) = (pick(&fr), pick(&fg));
        if zr.is_empty() && zg.is_empty() {
            continue;
        }
        let fid = if zr.len() >= 2 && zg.len() >= 2 {
            Some(frechet_distance(&stats_from_features(&zr)?, &stats_from_features(&zg)?)?)
        } else {
            None
        };
        per_zone.insert(
            id.to_string(),
            ZoneReport {
                n_real: zr.len(),
                n_generated: zg.len(),
                fid,
                mae: mae_of(predictions.iter().filter(|r| r.0 == id).collect())?,
            },
        );
    }
    let reference_fid = if options.split_reference {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(options.seed);
        Some(split_reference_fid_features(&all(&fr), &mut rng)?)
    } else {
        None
    };
    Ok(EvalReport {
        fid,
        mae,
        reference_fid,
        per_zone,
        config: serde_json::to_value(options).expect("options serialize"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(mu: Vec<f64>, var: Vec<f64>) -> FeatureStats {
        FeatureStats {
            n: 10,
            mu: DVector::from_vec(mu),
            sigma: DMatrix::from_diagonal(&DVector::from_vec(var)),
        }
    }

    #[test]
    fn one_dimensional_closed_form() {
        let a = stats(vec![0.0], vec![1.0]);
        let b = stats(vec![2.0], vec![1.0]);
        assert!((frechet_distance(&a, &b).unwrap() - 4.0).abs() < 1e-12);
        // (mu1-mu2)^2 + (s1-s2)^2 with s = 1, 3.
        let c = stats(vec![1.0], vec![9.0]);
        assert!((frechet_distance(&a, &c).unwrap() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let a = stats(vec![0.0], vec![1.0]);
        let b = stats(vec![0.0, 1.0], vec![1.0, 1.0]);
        assert!(matches!(frechet_distance(&a, &b), Err(LdlaError::Shape(_))));
    }

    #[test]
    fn indefinite_covariance_is_numeric_error() {
        let a = stats(vec![0.0], vec![-0.5]);
        assert!(matches!(frechet_distance(&a, &a), Err(LdlaError::Numeric(_))));
    }

    #[test]
    fn mae_arithmetic() {
        assert!((mae_scores(&[0.3, 0.5], &[0.2, 0.6]).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(mae_scores(&[0.4, 0.4], &[0.4, 0.4]).unwrap(), 0.0);
        assert!(mae_scores(&[0.1], &[0.1, 0.2]).is_err());
        assert!(mae_scores(&[1.1], &[0.1]).is_err());
    }

    #[test]
    fn identical_images_have_zero_covariance() {
        let img = PixelGrid::filled(16, 16, [0.2, 0.5, 0.7]);
        let s = compute_stats(&[img.clone(), img], &AvgPoolExtractor::default()).unwrap();
        assert!(s.sigma.iter().all(|&v| v == 0.0));
        assert!(compute_stats(&[PixelGrid::filled(4, 4, [0.0; 3])], &AvgPoolExtractor::default()).is_err());
    }
}
