//! Facial-zone registry, aging-score normalization and conditioning prompts.
//!
//! A zone is the unit of local control: each one carries its own clinical
//! scale maximum, the nouns used to phrase prompts about it, and a default
//! crop box on an aligned face.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LdlaError, Result};

/// Registry shipped with the crate.
pub const DEFAULT_REGISTRY_JSON: &str = include_str!("../assets/zones.json");

/// Number of 5% steps in the target grid `{0, 0.05, ..., 1.0}`.
pub const TARGET_GRID_STEPS: u32 = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZoneSpec {
    pub zone_id: String,
    pub display_noun: String,
    pub zone_noun: String,
    pub scale_max: f64,
    /// Fractional `(x0, y0, x1, y1)` on an aligned face.
    pub default_box: [f64; 4],
    /// Feather width at crop resolution.
    pub feather_px: u32,
}

impl ZoneSpec {
    pub fn validate(&self) -> Result<()> {
        let id = &self.zone_id;
        if id.trim().is_empty() {
            return Err(LdlaError::Validation("zone_id must be non-empty".into()));
        }
        if self.display_noun.trim().is_empty() || self.zone_noun.trim().is_empty() {
            return Err(LdlaError::Validation(format!(
                "zone `{id}`: display_noun and zone_noun must be non-empty"
            )));
        }
        if !(self.scale_max.is_finite() && self.scale_max > 0.0) {
            return Err(LdlaError::Validation(format!(
                "zone `{id}`: scale_max must be positive, got {}",
                self.scale_max
            )));
        }
        let [x0, y0, x1, y1] = self.default_box;
        let ok = (0.0..=1.0).contains(&x0)
            && (0.0..=1.0).contains(&x1)
            && (0.0..=1.0).contains(&y0)
            && (0.0..=1.0).contains(&y1)
            && x0 < x1
            && y0 < y1;
        if !ok {
            return Err(LdlaError::Validation(format!(
                "zone `{id}`: default_box {:?} must satisfy 0<=x0<x1<=1 and 0<=y0<y1<=1",
                self.default_box
            )));
        }
        Ok(())
    }
}

/// A validated, ordered set of zones. Order is the processing order used by
/// whole-face inference.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoneRegistry {
    zones: Vec<ZoneSpec>,
}

impl ZoneRegistry {
    pub fn new(zones: Vec<ZoneSpec>) -> Result<Self> {
        let mut seen = HashSet::new();
        for z in &zones {
            z.validate()?;
            if !seen.insert(z.zone_id.as_str()) {
                return Err(LdlaError::Validation(format!(
                    "duplicate zone_id `{}`",
                    z.zone_id
                )));
            }
        }
        Ok(Self { zones })
    }

    pub fn default_registry() -> Self {
        parse_zone_registry(DEFAULT_REGISTRY_JSON, "<default registry>")
            .expect("bundled registry is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_zone_registry(path).and_then(Self::new)
    }

    pub fn zones(&self) -> &[ZoneSpec] {
        &self.zones
    }

    pub fn len(&self) -> usize {
        self.zones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zones.is_empty()
    }

    pub fn get(&self, zone_id: &str) -> Option<&ZoneSpec> {
        self.zones.iter().find(|z| z.zone_id == zone_id)
    }

    /// Looks a zone up, failing with the list of valid ids.
    pub fn require(&self, zone_id: &str) -> Result<&ZoneSpec> {
        self.get(zone_id).ok_or_else(|| {
            LdlaError::Validation(format!(
                "unknown zone_id `{zone_id}`; valid ids: {}",
                self.ids().join(", ")
            ))
        })
    }

    pub fn ids(&self) -> Vec<&str> {
        self.zones.iter().map(|z| z.zone_id.as_str()).collect()
    }

    /// Canonical JSON rendering (used for hashing and the `/zones` surface).
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.zones).expect("zone specs serialize")
    }
}

/// Reads and validates a zone registry document.
pub fn load_zone_registry(path: impl AsRef<Path>) -> Result<Vec<ZoneSpec>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| LdlaError::io(path, e))?;
    parse_zone_registry(&text, &path.display().to_string()).map(|r| r.zones)
}

pub fn parse_zone_registry(text: &str, source: &str) -> Result<ZoneRegistry> {
    let records: Vec<serde_json::Value> =
        serde_json::from_str(text).map_err(|e| LdlaError::Parse {
            location: source.to_string(),
            message: e.to_string(),
        })?;
    let mut zones = Vec::with_capacity(records.len());
    for (i, rec) in records.into_iter().enumerate() {
        let label = rec
            .get("zone_id")
            .and_then(|v| v.as_str())
            .map(|s| format!("record {i} (`{s}`)"))
            .unwrap_or_else(|| format!("record {i}"));
        let zone: ZoneSpec = serde_json::from_value(rec).map_err(|e| LdlaError::Parse {
            location: format!("{source}, {label}"),
            message: e.to_string(),
        })?;
        zones.push(zone);
    }
    ZoneRegistry::new(zones)
}

/// Divides a raw clinical score by its scale maximum.
pub fn normalize_score(raw: f64, scale_max: f64) -> Result<f64> {
    if !(scale_max.is_finite() && scale_max > 0.0) {
        return Err(LdlaError::Domain(format!(
            "scale_max must be positive, got {scale_max}"
        )));
    }
    if !(raw.is_finite() && (0.0..=scale_max).contains(&raw)) {
        return Err(LdlaError::Domain(format!(
            "raw score {raw} outside [0, {scale_max}]"
        )));
    }
    Ok(raw / scale_max)
}

/// Human-facing integer percent to a normalized score. The single conversion
/// point used by the CLI and the service.
pub fn percent_to_normalized(percent: u32) -> Result<f64> {
    if percent > 100 {
        return Err(LdlaError::Domain(format!(
            "percent {percent} outside [0, 100]"
        )));
    }
    Ok(f64::from(percent) / 100.0)
}

/// Integer percentage, ties rounded half up.
pub fn percent_token(normalized: f64) -> u32 {
    let clamped = normalized.clamp(0.0, 1.0);
    (clamped * 100.0 + 0.5).floor() as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgingScore {
    pub raw: f64,
    pub normalized: f64,
}

impl AgingScore {
    pub fn new(raw: f64, scale_max: f64) -> Result<Self> {
        Ok(Self {
            raw,
            normalized: normalize_score(raw, scale_max)?,
        })
    }

    pub fn from_normalized(normalized: f64, scale_max: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&normalized) {
            return Err(LdlaError::Domain(format!(
                "normalized score {normalized} outside [0, 1]"
            )));
        }
        Ok(Self {
            raw: normalized * scale_max,
            normalized,
        })
    }
}

pub fn build_full_prompt(zone: &ZoneSpec, ethnicity: &str, normalized: f64) -> String {
    format!(
        "image of {} with an aging score of {}% for a person of {} ethnicity",
        zone.display_noun,
        percent_token(normalized),
        ethnicity
    )
}

pub fn build_zone_prompt(zone: &ZoneSpec) -> String {
    format!("image of {}", zone.zone_noun)
}

/// The three conditioning prompts used per training example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub p_full: String,
    pub p_zone: String,
    pub p_target: String,
    pub target_normalized: f64,
}

/// Draws a target from the 5% grid and builds all three prompts.
pub fn sample_target_prompt<R: Rng + ?Sized>(
    zone: &ZoneSpec,
    ethnicity: &str,
    source_normalized: f64,
    rng: &mut R,
) -> PromptBundle {
    let target_normalized = sample_target_score(rng);
    PromptBundle {
        p_full: build_full_prompt(zone, ethnicity, source_normalized),
        p_zone: build_zone_prompt(zone),
        p_target: build_full_prompt(zone, ethnicity, target_normalized),
        target_normalized,
    }
}

pub fn sample_target_score<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let k = rng.random_range(0..=TARGET_GRID_STEPS);
    f64::from(k) / f64::from(TARGET_GRID_STEPS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zone(id: &str) -> ZoneSpec {
        ZoneRegistry::default_registry().get(id).unwrap().clone()
    }

    #[test]
    fn default_registry_has_eight_zones() {
        let reg = ZoneRegistry::default_registry();
        assert_eq!(
            reg.ids(),
            vec![
                "forehead",
                "glabellar",
                "nasolabial_folds",
                "inter_ocular",
                "upper_lip",
                "under_eye",
                "lip_corners",
                "crows_feet"
            ]
        );
    }

    #[test]
    fn empty_file_is_a_parse_error() {
        let err = parse_zone_registry("", "empty.json").unwrap_err();
        assert!(matches!(err, LdlaError::Parse { .. }), "{err}");
    }

    #[test]
    fn malformed_record_is_named() {
        let text = r#"[{"zone_id": "a", "display_noun": "a", "zone_noun": "a", "scale_max": 1.0, "default_box": [0,0,1,1], "feather_px": 0},
                      {"zone_id": "b", "display_noun": "b"}]"#;
        match parse_zone_registry(text, "r.json").unwrap_err() {
            LdlaError::Parse { location, .. } => assert!(location.contains("record 1 (`b`)")),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn zero_scale_max_and_duplicates_rejected() {
        let mut z = zone("forehead");
        z.scale_max = 0.0;
        assert!(matches!(
            ZoneRegistry::new(vec![z]),
            Err(LdlaError::Validation(_))
        ));
        let f = zone("forehead");
        assert!(matches!(
            ZoneRegistry::new(vec![f.clone(), f]),
            Err(LdlaError::Validation(_))
        ));
        let mut z = zone("forehead");
        z.zone_noun.clear();
        assert!(ZoneRegistry::new(vec![z]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let s = normalize_score(3.5, 5.0).unwrap();
        assert!((s - 0.70).abs() < 1e-12);
        assert_eq!(percent_token(s), 70);
        assert_eq!(normalize_score(0.0, 5.0).unwrap(), 0.0);
        assert_eq!(normalize_score(5.0, 5.0).unwrap(), 1.0);
        assert!(normalize_score(5.1, 5.0).is_err());
        assert!(normalize_score(-0.1, 5.0).is_err());
    }

    #[test]
    fn prompt_templates() {
        let f = zone("forehead");
        assert_eq!(
            build_full_prompt(&f, "Hispanic", 0.70),
            "image of forehead wrinkles with an aging score of 70% for a person of Hispanic ethnicity"
        );
        assert!(build_full_prompt(&f, "Hispanic", 0.0).contains("aging score of 0%"));
        // string-template oracle
        let c = zone("crows_feet");
        let expected = ["image of ", "crow's feet wrinkles", " with an aging score of ", "85", "% for a person of ", "Caucasian", " ethnicity"].concat();
        assert_eq!(build_full_prompt(&c, "Caucasian", 0.85), expected);
        assert_eq!(build_zone_prompt(&f), "image of forehead");
        assert_eq!(build_zone_prompt(&zone("upper_lip")), ["image of ", "upper lip"].concat());
    }

    #[test]
    fn ties_round_half_up() {
        assert_eq!(percent_token(0.125), 13);
        assert_eq!(percent_token(0.005), 1);
        assert_eq!(percent_token(1.0), 100);
    }

    #[test]
    fn target_sampling_is_seeded() {
        let f = zone("forehead");
        let a = sample_target_prompt(&f, "Asian", 0.3, &mut ChaCha8Rng::seed_from_u64(11));
        let b = sample_target_prompt(&f, "Asian", 0.3, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a.target_normalized));
    }

    #[test]
    fn target_grid_is_uniform() {
        // chi-square against uniform over 21 cells; critical value at
        // p = 0.001 with 20 degrees of freedom is 45.31
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 10_000;
        let mut counts = [0u32; 21];
        for _ in 0..n {
            let s = sample_target_score(&mut rng);
            let k = (s * 20.0).round() as usize;
            assert!((s - k as f64 / 20.0).abs() < 1e-15);
            counts[k] += 1;
        }
        let expected = n as f64 / 21.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 45.31, "chi2 = {chi2}");
        let sigma = (expected * (1.0 - 1.0 / 21.0)).sqrt();
        for c in counts {
            assert!((c as f64 - expected).abs() < 3.0 * sigma + 1.0);
        }
    }

    proptest! {
        #[test]
        fn percent_token_matches_division(raw_frac in 0.0f64..=1.0, scale in 0.5f64..10.0) {
            let raw = raw_frac * scale;
            let n = normalize_score(raw, scale).unwrap();
            let prompt = build_full_prompt(&zone("glabellar"), "Black", n);
            let expected = (100.0 * raw / scale + 0.5).floor() as u32;
            let token = format!("score of {expected}% ");
            prop_assert!(prompt.contains(&token), "{} vs {}", prompt, token);
        }

        #[test]
        fn source_and_target_differ_only_in_percent(src in 0.0f64..=1.0, seed in any::<u64>()) {
            let z = zone("under_eye");
            let b = sample_target_prompt(&z, "White", src, &mut ChaCha8Rng::seed_from_u64(seed));
            let strip = |s: &str| s.split_whitespace().filter(|t| !t.ends_with('%')).collect::<Vec<_>>().join(" ");
            prop_assert_eq!(strip(&b.p_full), strip(&b.p_target));
            prop_assert!(!b.p_zone.contains('%'));
            prop_assert!(b.p_zone.contains(&z.zone_noun));
        }
    }
}
