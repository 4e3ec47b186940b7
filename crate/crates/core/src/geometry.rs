//! Zone localization, crop extraction, feather masks and blending.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use crate::atlas::ZoneSpec;
use crate::error::{LdlaError, Result};
use crate::pixels::PixelGrid;

/// Side length of the square crops the networks operate on.
pub const CROP_SIZE: usize = 128;

/// Largest per-channel change observed when a crop of a smooth face is
/// extracted, resized back and blended in unmodified. Measured on the
/// synthetic test faces; content with sharper edges exceeds it.
pub const ROUND_TRIP_TOLERANCE: f32 = 0.02;

/// Half-open integer rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// Converts fractional `(x0, y0, x1, y1)` to pixels by flooring each
    /// coordinate, clamped to the image.
    pub fn from_fractions(b: [f64; 4], width: usize, height: usize) -> Result<Self> {
        let px = |f: f64, n: usize| ((f * n as f64).floor().max(0.0) as usize).min(n);
        Self::checked(
            px(b[0], width),
            px(b[1], height),
            px(b[2], width),
            px(b[3], height),
        )
    }

    fn checked(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x1 <= x0 || y1 <= y0 {
            return Err(LdlaError::Geometry(format!(
                "degenerate rect ({x0},{y0})-({x1},{y1})"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRegion {
    pub rect: Rect,
    pub feather_px: usize,
}

impl CropRegion {
    pub fn new(rect: Rect, feather_px: usize) -> Result<Self> {
        let half = rect.width().min(rect.height()) / 2;
        if feather_px > half {
            return Err(LdlaError::Geometry(format!(
                "feather {feather_px}px exceeds half the rect's short side ({half}px)"
            )));
        }
        Ok(Self { rect, feather_px })
    }

    /// Region for a zone's rect, with the zone's crop-scale feather width
    /// rescaled to the rect.
    pub fn for_zone(zone: &ZoneSpec, rect: Rect) -> Result<Self> {
        let short = rect.width().min(rect.height());
        let scaled = (zone.feather_px as usize * short + CROP_SIZE / 2) / CROP_SIZE;
        Self::new(rect, scaled.min(short / 2))
    }
}

/// Named landmark points in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct Landmarks(pub BTreeMap<String, [f64; 2]>);

impl Landmarks {
    pub fn from_json(text: &str, source: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LdlaError::Parse {
            location: source.to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| LdlaError::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn point(&self, name: &str) -> Result<[f64; 2]> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| LdlaError::Geometry(format!("landmark `{name}` missing")))
    }

    /// Distance between the two eye centres.
    pub fn eye_distance(&self) -> Result<f64> {
        let mid = |a: [f64; 2], b: [f64; 2]| [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
        let l = mid(self.point("eye_left_outer")?, self.point("eye_left_inner")?);
        let r = mid(self.point("eye_right_inner")?, self.point("eye_right_outer")?);
        Ok(((l[0] - r[0]).powi(2) + (l[1] - r[1]).powi(2)).sqrt())
    }
}

/// Bounding box of named points, padded by multiples of the eye distance:
/// `(minx - l*d, miny - t*d, maxx + r*d, maxy + b*d)`.
#[derive(Debug, Clone, Copy)]
pub struct LandmarkRecipe {
    pub points: &'static [&'static str],
    pub pad: [f64; 4],
}

pub fn landmark_recipe(zone_id: &str) -> Option<LandmarkRecipe> {
    let r = |points, pad| Some(LandmarkRecipe { points, pad });
    match zone_id {
        "forehead" => r(
            &[
                "brow_left_outer",
                "brow_left_inner",
                "brow_right_inner",
                "brow_right_outer",
            ],
            [0.0, 0.7, 0.0, -0.1],
        ),
        "glabellar" => r(&["brow_left_inner", "brow_right_inner"], [0.1, 0.15, 0.1, 0.25]),
        "inter_ocular" => r(
            &["eye_left_inner", "eye_right_inner", "nose_bridge"],
            [0.05, 0.15, 0.05, 0.15],
        ),
        "under_eye" => r(
            &[
                "eye_left_outer",
                "eye_left_inner",
                "eye_right_inner",
                "eye_right_outer",
            ],
            [0.1, -0.05, 0.1, 0.3],
        ),
        "crows_feet" => r(&["eye_left_outer"], [0.45, 0.25, 0.05, 0.25]),
        "nasolabial_folds" => r(
            &["nose_left", "nose_right", "mouth_left", "mouth_right"],
            [0.15, 0.0, 0.15, 0.05],
        ),
        "upper_lip" => r(&["mouth_left", "mouth_right", "lip_top"], [0.0, 0.2, 0.0, 0.0]),
        "lip_corners" => r(
            &["mouth_left", "mouth_right", "lip_bottom"],
            [0.15, 0.05, 0.15, 0.1],
        ),
        _ => None,
    }
}

pub fn recipe_rect(
    recipe: &LandmarkRecipe,
    landmarks: &Landmarks,
    width: usize,
    height: usize,
) -> Result<Rect> {
    let d = landmarks.eye_distance()?;
    let (mut minx, mut miny) = (f64::INFINITY, f64::INFINITY);
    let (mut maxx, mut maxy) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for name in recipe.points {
        let [x, y] = landmarks.point(name)?;
        minx = minx.min(x);
        miny = miny.min(y);
        maxx = maxx.max(x);
        maxy = maxy.max(y);
    }
    let [l, t, r, b] = recipe.pad;
    let clampf = |v: f64, n: usize| (v.floor().max(0.0) as usize).min(n);
    Rect::checked(
        clampf(minx - l * d, width),
        clampf(miny - t * d, height),
        clampf(maxx + r * d, width),
        clampf(maxy + b * d, height),
    )
}

/// Locates a zone on an aligned face: from landmarks when given and the zone
/// has a recipe, otherwise from its default box.
pub fn locate_zone(
    face: &PixelGrid,
    zone: &ZoneSpec,
    landmarks: Option<&Landmarks>,
) -> Result<CropRegion> {
    let (w, h) = (face.width(), face.height());
    let rect = match (landmarks, landmark_recipe(&zone.zone_id)) {
        (Some(lm), Some(recipe)) => recipe_rect(&recipe, lm, w, h)?,
        (Some(_), None) => {
            log::warn!(
                "no landmark recipe for zone `{}`, using its default box",
                zone.zone_id
            );
            Rect::from_fractions(zone.default_box, w, h)?
        }
        (None, _) => Rect::from_fractions(zone.default_box, w, h)?,
    };
    CropRegion::for_zone(zone, rect)
}

/// Source of facial landmarks for a face image.
pub trait LandmarkSource: Send + Sync {
    fn landmarks(&self, face: &PixelGrid) -> Result<Landmarks>;
}

/// Landmarks read from a fixture file regardless of the image.
#[derive(Debug, Clone)]
pub struct FixtureLandmarks(pub Landmarks);

impl FixtureLandmarks {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Landmarks::load(path).map(Self)
    }
}

impl LandmarkSource for FixtureLandmarks {
    fn landmarks(&self, _face: &PixelGrid) -> Result<Landmarks> {
        Ok(self.0.clone())
    }
}

/// Runs an external detector that reads a PNG on stdin and prints the
/// landmark JSON object on stdout.
#[derive(Debug, Clone)]
pub struct ExternalLandmarks {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl LandmarkSource for ExternalLandmarks {
    fn landmarks(&self, face: &PixelGrid) -> Result<Landmarks> {
        let png = face.encode_png()?;
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| LdlaError::io(&self.program, e))?;
        child
            .stdin
            .take()
            .expect("stdin piped")
            .write_all(&png)
            .map_err(|e| LdlaError::io(&self.program, e))?;
        let out = child
            .wait_with_output()
            .map_err(|e| LdlaError::io(&self.program, e))?;
        if !out.status.success() {
            return Err(LdlaError::Geometry(format!(
                "landmark program {} exited with {}",
                self.program.display(),
                out.status
            )));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        Landmarks::from_json(&text, &self.program.display().to_string())
    }
}

/// Bilinear resize with pixel-centre alignment and edge clamping. Same-size
/// input is returned unchanged.
pub fn resize_bilinear(img: &PixelGrid, out_w: usize, out_h: usize) -> PixelGrid {
    if out_w == img.width() && out_h == img.height() {
        return img.clone();
    }
    let (w, h) = (img.width(), img.height());
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let xs = axis(w, out_w);
    let ys = axis(h, out_h);
    let mut out = PixelGrid::filled(out_w, out_h, [0.0; 3]);
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..3 {
                let top = lerp(img.get(x0, y0, c), img.get(x1, y0, c), fx);
                let bot = lerp(img.get(x0, y1, c), img.get(x1, y1, c), fx);
                out.set(ox, oy, c, lerp(top, bot, fy));
            }
        }
    }
    out
}

// Exact when both ends are equal, so flat regions stay flat.
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

pub fn crop_rect(face: &PixelGrid, rect: Rect) -> Result<PixelGrid> {
    if rect.x1 > face.width() || rect.y1 > face.height() {
        return Err(LdlaError::Geometry(format!(
            "rect {rect:?} outside {}x{} image",
            face.width(),
            face.height()
        )));
    }
    let mut data = Vec::with_capacity(rect.width() * rect.height() * 3);
    let stride = face.width() * 3;
    for y in rect.y0..rect.y1 {
        let row = y * stride;
        data.extend_from_slice(&face.data()[row + rect.x0 * 3..row + rect.x1 * 3]);
    }
    PixelGrid::new(rect.width(), rect.height(), data)
}

pub fn extract_crop(face: &PixelGrid, region: &CropRegion, out_size: usize) -> Result<PixelGrid> {
    let crop = crop_rect(face, region.rect)?;
    Ok(resize_bilinear(&crop, out_size, out_size))
}

/// Per-pixel alpha over a region's rect, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendMask {
    pub width: usize,
    pub height: usize,
    pub alpha: Vec<f32>,
}

impl BlendMask {
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.alpha[y * self.width + x]
    }
}

/// Linear ramp `clamp(d / feather, 0, 1)` where `d` is the pixel's distance
/// in whole pixels to the nearest rect edge.
pub fn feather_mask(region: &CropRegion) -> BlendMask {
    let (w, h) = (region.rect.width(), region.rect.height());
    let f = region.feather_px;
    let mut alpha = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let d = x.min(y).min(w - 1 - x).min(h - 1 - y);
            alpha.push(if f == 0 {
                1.0
            } else {
                (d as f32 / f as f32).clamp(0.0, 1.0)
            });
        }
    }
    BlendMask {
        width: w,
        height: h,
        alpha,
    }
}

/// `old + a * (new - old)` inside the rect; everything else is copied.
pub fn blend_crop(
    face: &PixelGrid,
    region: &CropRegion,
    new_crop: &PixelGrid,
    mask: &BlendMask,
) -> Result<PixelGrid> {
    let r = region.rect;
    if new_crop.width() != r.width() || new_crop.height() != r.height() {
        return Err(LdlaError::Shape(format!(
            "crop is {}x{}, rect is {}x{}",
            new_crop.width(),
            new_crop.height(),
            r.width(),
            r.height()
        )));
    }
    if mask.width != r.width() || mask.height != r.height() {
        return Err(LdlaError::Shape(format!(
            "mask is {}x{}, rect is {}x{}",
            mask.width,
            mask.height,
            r.width(),
            r.height()
        )));
    }
    if r.x1 > face.width() || r.y1 > face.height() {
        return Err(LdlaError::Geometry(format!("rect {r:?} outside image")));
    }
    let mut out = face.clone();
    for y in 0..r.height() {
        for x in 0..r.width() {
            let a = mask.at(x, y);
            if a == 0.0 {
                continue;
            }
            for c in 0..3 {
                let old = face.get(r.x0 + x, r.y0 + y, c);
                let new = new_crop.get(x, y, c);
                let v = if a == 1.0 {
                    new
                } else {
                    (old + a * (new - old)).clamp(old.min(new), old.max(new))
                };
                out.set(r.x0 + x, r.y0 + y, c, v);
            }
        }
    }
    Ok(out)
}

/// Resizes a processed crop back to the region and feather-blends it.
pub fn paste_crop(face: &PixelGrid, region: &CropRegion, crop: &PixelGrid) -> Result<PixelGrid> {
    let back = resize_bilinear(crop, region.rect.width(), region.rect.height());
    blend_crop(face, region, &back, &feather_mask(region))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::ZoneRegistry;

    #[test]
    fn forehead_default_box_on_1024() {
        let r = Rect::from_fractions([0.3, 0.05, 0.7, 0.25], 1024, 1024).unwrap();
        assert_eq!((r.x0, r.y0, r.x1, r.y1), (307, 51, 716, 256));
        let full = Rect::from_fractions([0.0, 0.0, 1.0, 1.0], 640, 480).unwrap();
        assert_eq!((full.x0, full.y0, full.x1, full.y1), (0, 0, 640, 480));
        assert!(Rect::from_fractions([0.5, 0.5, 0.5001, 0.6], 100, 100).is_err());
    }

    #[test]
    fn mask_shape() {
        let rect = Rect::checked(0, 0, 40, 30).unwrap();
        let m = feather_mask(&CropRegion::new(rect, 8).unwrap());
        assert_eq!(m.at(4, 15), 0.5);
        assert_eq!(m.at(20, 15), 1.0);
        assert_eq!(m.at(0, 10), 0.0);
        assert_eq!(m.at(39, 29), 0.0);
        for y in 0..30 {
            for x in 0..40 {
                assert_eq!(m.at(x, y), m.at(39 - x, y));
                assert_eq!(m.at(x, y), m.at(x, 29 - y));
            }
        }
        let ones = feather_mask(&CropRegion::new(rect, 0).unwrap());
        assert!(ones.alpha.iter().all(|&a| a == 1.0));
        assert!(CropRegion::new(rect, 16).is_err());
    }

    #[test]
    fn bilinear_checkerboard_downscale() {
        // 2x downscale samples exactly between four source pixels.
        let mut img = PixelGrid::filled(8, 8, [0.0; 3]);
        for y in 0..8 {
            for x in 0..8 {
                let v = ((x + y) % 2) as f32 * 0.8 + 0.1 * (x as f32 / 7.0);
                for c in 0..3 {
                    img.set(x, y, c, v);
                }
            }
        }
        let out = resize_bilinear(&img, 4, 4);
        for oy in 0..4 {
            for ox in 0..4 {
                let (x, y) = (2 * ox, 2 * oy);
                let want = (img.get(x, y, 0)
                    + img.get(x + 1, y, 0)
                    + img.get(x, y + 1, 0)
                    + img.get(x + 1, y + 1, 0))
                    / 4.0;
                assert!((out.get(ox, oy, 0) - want).abs() < 1e-6);
            }
        }
        assert_eq!(resize_bilinear(&img, 8, 8), img);
        let flat = PixelGrid::filled(50, 30, [0.2, 0.4, 0.6]);
        let r = resize_bilinear(&flat, 128, 128);
        assert!(r.data().chunks(3).all(|p| p == [0.2, 0.4, 0.6]));
    }

    #[test]
    fn blend_is_local_and_idempotent() {
        let face = PixelGrid::filled(64, 64, [0.3; 3]);
        let zone = &ZoneRegistry::default_registry().zones()[0].clone();
        let region = locate_zone(&face, zone, None).unwrap();
        let same = crop_rect(&face, region.rect).unwrap();
        let mask = feather_mask(&region);
        assert_eq!(blend_crop(&face, &region, &same, &mask).unwrap(), face);
        let white = PixelGrid::filled(region.rect.width(), region.rect.height(), [1.0; 3]);
        let out = blend_crop(&face, &region, &white, &mask).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                if !region.rect.contains(x, y) {
                    assert_eq!(out.pixel(x, y), face.pixel(x, y));
                }
            }
        }
    }
}
