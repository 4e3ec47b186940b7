//! Dataset manifests and the synthetic wrinkle-proxy corpus.
//!
//! Real data is described by a JSON-lines manifest of scored crops. For desk
//! scale work the crate generates its own corpus: skin-toned crops carrying
//! oriented sinusoidal "wrinkle" stripes whose contrast (and optionally
//! density) grows with the aging score, plus an FFT band-energy estimator that
//! measures that stripe strength independently of any model.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::atlas::{ZoneRegistry, ZoneSpec};
use crate::error::{LdlaError, Result};
use crate::pixels::PixelGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    /// Relative paths resolve against the manifest's directory.
    pub image_path: String,
    pub zone_id: String,
    pub ethnicity: String,
    pub raw_score: f64,
    pub scale_max: f64,
    pub split: Split,
}

impl ManifestRecord {
    pub fn normalized_score(&self) -> f64 {
        self.raw_score / self.scale_max
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        let p = Path::new(&record.image_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// Reads and validates a JSON-lines manifest.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| LdlaError::io(path, e))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| LdlaError::Parse {
            location: format!("{}:{lineno}", path.display()),
            message: e.to_string(),
        })?;
        if !(rec.scale_max.is_finite() && rec.scale_max > 0.0) {
            return Err(LdlaError::Validation(format!(
                "{}:{lineno}: scale_max must be positive",
                path.display()
            )));
        }
        if !(rec.raw_score.is_finite() && (0.0..=rec.scale_max).contains(&rec.raw_score)) {
            return Err(LdlaError::Validation(format!(
                "{}:{lineno}: raw_score {} outside [0, {}]",
                path.display(),
                rec.raw_score,
                rec.scale_max
            )));
        }
        records.push(rec);
    }
    if records.is_empty() {
        log::warn!("manifest {} has no records", path.display());
    }
    let manifest = Manifest { base_dir, records };
    let missing: Vec<String> = manifest
        .records
        .iter()
        .map(|r| manifest.resolve(r))
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(LdlaError::Validation(format!(
            "missing image files: {}",
            missing.join(", ")
        )));
    }
    Ok(manifest)
}

/// Canonical JSON-lines rendering.
pub fn render_manifest(records: &[ManifestRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(out, "{line}").expect("string write");
    }
    out
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render_manifest(records)).map_err(|e| LdlaError::io(path, e))
}

/// Score-to-stripe mapping. Both amplitude and cycle count are affine and
/// non-decreasing in the score; amplitude is zero at score zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityLaw {
    /// Relative luminance modulation depth at score 1.
    pub max_amplitude: f64,
    /// Stripe periods per crop width at score 0 and score 1.
    pub cycles_at_zero: f64,
    pub cycles_at_one: f64,
}

impl Default for DensityLaw {
    fn default() -> Self {
        Self {
            max_amplitude: 0.4,
            cycles_at_zero: 8.0,
            cycles_at_one: 8.0,
        }
    }
}

impl DensityLaw {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_amplitude >= 0.0 && self.max_amplitude <= 1.0) {
            return Err(LdlaError::Config("max_amplitude must be in [0, 1]".into()));
        }
        if !(self.cycles_at_zero > 0.0 && self.cycles_at_one >= self.cycles_at_zero) {
            return Err(LdlaError::Config(
                "density law cycles must be positive and non-decreasing".into(),
            ));
        }
        Ok(())
    }

    pub fn amplitude(&self, score: f64) -> f64 {
        self.max_amplitude * score.clamp(0.0, 1.0)
    }

    pub fn cycles(&self, score: f64) -> f64 {
        let s = score.clamp(0.0, 1.0);
        self.cycles_at_zero + (self.cycles_at_one - self.cycles_at_zero) * s
    }
}

/// Direction (radians) of the intensity variation across a zone's wrinkles:
/// forehead lines are horizontal, so intensity varies vertically.
pub fn wrinkle_orientation(zone_id: &str) -> f64 {
    use std::f64::consts::PI;
    match zone_id {
        "forehead" | "under_eye" | "inter_ocular" => PI / 2.0,
        "glabellar" | "upper_lip" => 0.0,
        "crows_feet" => PI / 3.0,
        "nasolabial_folds" => 2.0 * PI / 3.0,
        "lip_corners" => PI / 4.0,
        _ => PI / 2.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCorpusConfig {
    pub n_per_zone: usize,
    pub crop_size: usize,
    pub seed: u64,
    pub density_law: DensityLaw,
    /// Zone subset; empty means every registry zone.
    pub zones: Vec<String>,
    pub ethnicities: Vec<String>,
    /// Fractions assigned to val and test; the rest is train.
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        Self {
            n_per_zone: 250,
            crop_size: 128,
            seed: 0,
            density_law: DensityLaw::default(),
            zones: Vec::new(),
            ethnicities: ["Asian", "Black", "Caucasian", "Hispanic"]
                .map(String::from)
                .to_vec(),
            val_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

/// Renders one synthetic crop for `zone_id` at normalized `score`.
pub fn render_crop<R: Rng + ?Sized>(
    zone_id: &str,
    score: f64,
    size: usize,
    law: &DensityLaw,
    rng: &mut R,
) -> PixelGrid {
    let r = rng.random_range(0.55..0.92);
    let g = r * rng.random_range(0.68..0.84);
    let b = g * rng.random_range(0.72..0.92);
    let base = [r, g, b];
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let shade_dir = rng.random_range(0.0..std::f64::consts::TAU);
    let shade = rng.random_range(0.0..0.04);
    let noise = Normal::new(0.0, 0.008).expect("valid sigma");
    let theta = wrinkle_orientation(zone_id);
    let (ct, st) = (theta.cos(), theta.sin());
    let amp = law.amplitude(score);
    let freq = std::f64::consts::TAU * law.cycles(score) / size as f64;
    let mut img = PixelGrid::filled(size, size, [0.0; 3]);
    let half = size as f64 / 2.0;
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            let u = (fx - half) / size as f64;
            let v = (fy - half) / size as f64;
            let shading = 1.0 + shade * (u * shade_dir.cos() + v * shade_dir.sin());
            let wave = 0.5 + 0.5 * (freq * (fx * ct + fy * st) + phase).sin();
            let factor = shading * (1.0 - amp * wave);
            for (c, base_c) in base.iter().enumerate() {
                let val = base_c * factor + noise.sample(rng);
                img.set(x, y, c, val.clamp(0.0, 1.0) as f32);
            }
        }
    }
    img
}

/// Writes `crops/*.png` and `manifest.jsonl` under `out_dir`.
pub fn generate_synthetic_corpus(
    cfg: &SyntheticCorpusConfig,
    registry: &ZoneRegistry,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<ManifestRecord>> {
    cfg.density_law.validate()?;
    if cfg.crop_size == 0 || cfg.ethnicities.is_empty() {
        return Err(LdlaError::Config(
            "crop_size and ethnicities must be non-empty".into(),
        ));
    }
    if !(cfg.val_fraction >= 0.0
        && cfg.test_fraction >= 0.0
        && cfg.val_fraction + cfg.test_fraction <= 1.0)
    {
        return Err(LdlaError::Config("split fractions must sum to at most 1".into()));
    }
    let zones: Vec<&ZoneSpec> = if cfg.zones.is_empty() {
        registry.zones().iter().collect()
    } else {
        cfg.zones
            .iter()
            .map(|z| registry.require(z))
            .collect::<Result<_>>()?
    };
    let out_dir = out_dir.as_ref();
    let crops = out_dir.join("crops");
    std::fs::create_dir_all(&crops).map_err(|e| LdlaError::io(&crops, e))?;
    let mut records = Vec::with_capacity(zones.len() * cfg.n_per_zone);
    for (zi, zone) in zones.iter().enumerate() {
        for i in 0..cfg.n_per_zone {
            let mut rng = record_rng(cfg.seed, zi, i);
            let score: f64 = rng.random_range(0.0..=1.0);
            let ethnicity = cfg.ethnicities[rng.random_range(0..cfg.ethnicities.len())].clone();
            let u: f64 = rng.random();
            let split = if u < cfg.test_fraction {
                Split::Test
            } else if u < cfg.test_fraction + cfg.val_fraction {
                Split::Val
            } else {
                Split::Train
            };
            let img = render_crop(&zone.zone_id, score, cfg.crop_size, &cfg.density_law, &mut rng);
            let rel = format!("crops/{}_{i:05}.png", zone.zone_id);
            img.save_png(out_dir.join(&rel))?;
            records.push(ManifestRecord {
                image_path: rel,
                zone_id: zone.zone_id.clone(),
                ethnicity,
                raw_score: score * zone.scale_max,
                scale_max: zone.scale_max,
                split,
            });
        }
    }
    write_manifest(out_dir.join("manifest.jsonl"), &records)?;
    Ok(records)
}

fn record_rng(seed: u64, zone_index: usize, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((zone_index as u64) << 32) | i as u64);
    rng
}

/// Band limits of the wrinkle oracle in cycles per crop.
pub const ORACLE_BAND: (f64, f64) = (4.0, 24.0);
/// Angular half-width of the oracle's band around the wrinkle direction.
pub const ORACLE_HALF_ANGLE: f64 = std::f64::consts::PI / 9.0;
/// Relative stripe amplitude that maps to an oracle value of 1.
pub const ORACLE_REFERENCE_AMPLITUDE: f64 = 0.25;

/// Stripe strength of a crop along its zone's wrinkle direction.
///
/// The mean-free luminance is transformed with a 2-D DFT; the energy `E` in
/// the oriented band gives a sinusoid amplitude `sqrt(2E) / (W H)`, which is
/// divided by the mean luminance and by [`ORACLE_REFERENCE_AMPLITUDE`] and
/// clamped to `[0, 1]`.
pub fn wrinkle_density_oracle(crop: &PixelGrid, zone: &ZoneSpec) -> f64 {
    let (w, h) = (crop.width(), crop.height());
    let lum = crop.luminance();
    let n = (w * h) as f64;
    let mean = lum.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    if mean <= 0.0 {
        return 0.0;
    }
    let mut buf: Vec<Complex<f64>> = lum
        .iter()
        .map(|&v| Complex::new(f64::from(v) - mean, 0.0))
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    let theta = wrinkle_orientation(&zone.zone_id);
    let mut energy = 0.0;
    for ky in 0..h {
        let fy = signed_freq(ky, h);
        for kx in 0..w {
            let fx = signed_freq(kx, w);
            let r = (fx * fx + fy * fy).sqrt();
            if r < ORACLE_BAND.0 || r > ORACLE_BAND.1 {
                continue;
            }
            let ang = fy.atan2(fx);
            let mut d = (ang - theta).rem_euclid(std::f64::consts::PI);
            if d > std::f64::consts::PI / 2.0 {
                d = std::f64::consts::PI - d;
            }
            if d <= ORACLE_HALF_ANGLE {
                energy += buf[ky * w + kx].norm_sqr();
            }
        }
    }
    let amplitude = (2.0 * energy).sqrt() / n;
    (amplitude / mean / ORACLE_REFERENCE_AMPLITUDE).clamp(0.0, 1.0)
}

fn signed_freq(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}
