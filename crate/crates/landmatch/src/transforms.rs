//! Intensity, affine, and elastic transformations for building training pairs.
//!
//! The correspondence between a pair is the backward-warp map φ: target →
//! reference. `warp_image` resamples the reference at φ(x) for every target
//! pixel x, and `project_to_reference` evaluates the same φ on points, so the
//! ground-truth projection is exact by construction — no field inversion is
//! ever estimated.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::{bilinear_clamped, BinaryMask, GrayImage};
use crate::stats::{quartiles, Quartiles};

/// Which photometric quantity an [`IntensityJitter`] changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JitterMode {
    /// Add `magnitude * max_intensity` to every pixel.
    Brightness,
    /// Scale deviations from the image mean by `1 + magnitude`.
    Contrast,
}

/// A photometric perturbation; `magnitude` is a signed fraction of the
/// relevant intensity scale (maximum intensity for brightness, contrast gain
/// minus one for contrast).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityJitter {
    pub mode: JitterMode,
    pub magnitude: f64,
}

impl IntensityJitter {
    /// Apply the jitter to an image (geometry untouched).
    pub fn apply(&self, img: &GrayImage) -> GrayImage {
        let pixels = img.pixels();
        let out = match self.mode {
            JitterMode::Brightness => {
                let shift = self.magnitude * img.max_intensity();
                pixels.mapv(|v| v + shift)
            }
            JitterMode::Contrast => {
                let mean = pixels.mean().unwrap_or(0.0);
                let gain = 1.0 + self.magnitude;
                pixels.mapv(|v| mean + (v - mean) * gain)
            }
        };
        GrayImage::new(out, img.spacing()).expect("shape and spacing unchanged")
    }
}

/// 2D affine map φ(x) = matrix · x + translation on (row, col) coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform2D {
    pub matrix: [[f64; 2]; 2],
    pub translation: [f64; 2],
}

impl AffineTransform2D {
    pub fn identity() -> Self {
        Self { matrix: [[1.0, 0.0], [0.0, 1.0]], translation: [0.0, 0.0] }
    }

    /// Pure translation by (d_row, d_col) px.
    pub fn translation(d_row: f64, d_col: f64) -> Self {
        Self { matrix: [[1.0, 0.0], [0.0, 1.0]], translation: [d_row, d_col] }
    }

    /// Build φ(x) = m·(x − center) + center + shift: a linear map about a
    /// fixed point followed by a translation.
    pub fn about_center(center: (f64, f64), m: [[f64; 2]; 2], shift: (f64, f64)) -> Self {
        let b = [
            center.0 - (m[0][0] * center.0 + m[0][1] * center.1) + shift.0,
            center.1 - (m[1][0] * center.0 + m[1][1] * center.1) + shift.1,
        ];
        Self { matrix: m, translation: b }
    }

    pub fn det(&self) -> f64 {
        self.matrix[0][0] * self.matrix[1][1] - self.matrix[0][1] * self.matrix[1][0]
    }

    pub fn is_invertible(&self) -> bool {
        self.det().abs() > 1e-6
    }

    /// φ(pt)
    pub fn apply(&self, pt: (f64, f64)) -> (f64, f64) {
        (
            self.matrix[0][0] * pt.0 + self.matrix[0][1] * pt.1 + self.translation[0],
            self.matrix[1][0] * pt.0 + self.matrix[1][1] * pt.1 + self.translation[1],
        )
    }

    /// The map x ↦ self(other(x)).
    pub fn compose(&self, other: &Self) -> Self {
        let a = &self.matrix;
        let b = &other.matrix;
        let m = [
            [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
            [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
        ];
        let t = [
            a[0][0] * other.translation[0] + a[0][1] * other.translation[1] + self.translation[0],
            a[1][0] * other.translation[0] + a[1][1] * other.translation[1] + self.translation[1],
        ];
        Self { matrix: m, translation: t }
    }
}

/// One Gaussian bump of a deformation field: displacement contribution
/// `amplitude * exp(-|x - center|^2 / (2 sigma^2))` in px.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianBlob {
    pub center: [f64; 2],
    pub amplitude: [f64; 2],
    pub sigma: f64,
}

/// Dense displacement field u on the target pixel grid: φ(x) = x + u(x).
///
/// The raster is generated from the Gaussian blob parameters and regenerated
/// on deserialization, so serialized transforms stay small and exact.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ElasticFieldRecord", into = "ElasticFieldRecord")]
pub struct ElasticField {
    shape: (usize, usize),
    blobs: Vec<GaussianBlob>,
    du_row: Array2<f64>,
    du_col: Array2<f64>,
}

#[derive(Serialize, Deserialize, Clone)]
struct ElasticFieldRecord {
    shape: [usize; 2],
    blobs: Vec<GaussianBlob>,
}

impl From<ElasticField> for ElasticFieldRecord {
    fn from(f: ElasticField) -> Self {
        Self { shape: [f.shape.0, f.shape.1], blobs: f.blobs }
    }
}

impl TryFrom<ElasticFieldRecord> for ElasticField {
    type Error = Error;
    fn try_from(r: ElasticFieldRecord) -> Result<Self> {
        ElasticField::from_blobs((r.shape[0], r.shape[1]), r.blobs)
    }
}

impl PartialEq for ElasticField {
    fn eq(&self, other: &Self) -> bool {
        // Rasters are a pure function of (shape, blobs).
        self.shape == other.shape && self.blobs == other.blobs
    }
}

impl ElasticField {
    /// Rasterize the summed blob field on the given (rows, cols) grid.
    pub fn from_blobs(shape: (usize, usize), blobs: Vec<GaussianBlob>) -> Result<Self> {
        if shape.0 == 0 || shape.1 == 0 {
            return Err(Error::invalid("elastic field needs a non-empty grid"));
        }
        for b in &blobs {
            if !(b.sigma > 0.0) {
                return Err(Error::invalid(format!("blob sigma must be positive, got {}", b.sigma)));
            }
            let finite = b.center.iter().chain(&b.amplitude).all(|v| v.is_finite());
            if !finite || !b.sigma.is_finite() {
                return Err(Error::invalid("blob parameters must be finite"));
            }
        }
        let mut du_row = Array2::<f64>::zeros(shape);
        let mut du_col = Array2::<f64>::zeros(shape);
        for b in &blobs {
            let inv_two_sigma2 = 1.0 / (2.0 * b.sigma * b.sigma);
            for r in 0..shape.0 {
                let dr = r as f64 - b.center[0];
                for c in 0..shape.1 {
                    let dc = c as f64 - b.center[1];
                    let g = (-(dr * dr + dc * dc) * inv_two_sigma2).exp();
                    du_row[[r, c]] += b.amplitude[0] * g;
                    du_col[[r, c]] += b.amplitude[1] * g;
                }
            }
        }
        Ok(Self { shape, blobs, du_row, du_col })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn blobs(&self) -> &[GaussianBlob] {
        &self.blobs
    }

    /// Displacement at an integer grid position (raster lookup, exact).
    pub fn displacement_at(&self, row: usize, col: usize) -> (f64, f64) {
        (self.du_row[[row, col]], self.du_col[[row, col]])
    }

    /// Displacement at a fractional position: bilinear interpolation of the
    /// raster, coordinates clamped to the grid.
    pub fn displacement_bilinear(&self, pt: (f64, f64)) -> (f64, f64) {
        (
            bilinear_clamped(&self.du_row, pt.0, pt.1),
            bilinear_clamped(&self.du_col, pt.0, pt.1),
        )
    }
}

/// The geometric part of a transform: the exact map φ: target → reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Geometry {
    Affine(AffineTransform2D),
    Elastic(ElasticField),
}

impl Geometry {
    /// φ(pt): affine evaluates the matrix form; elastic adds the bilinearly
    /// interpolated displacement.
    pub fn project(&self, pt: (f64, f64)) -> (f64, f64) {
        match self {
            Geometry::Affine(a) => a.apply(pt),
            Geometry::Elastic(f) => {
                let (ur, uc) = f.displacement_bilinear(pt);
                (pt.0 + ur, pt.1 + uc)
            }
        }
    }
}

/// A sampled pair-synthesis transform: an optional photometric jitter
/// composed with an optional geometric warp (warp applied after jitter).
/// Either part alone and the empty identity are all representable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub intensity: Option<IntensityJitter>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub geometry: Option<Geometry>,
}

impl Transform {
    pub fn identity() -> Self {
        Self { intensity: None, geometry: None }
    }

    pub fn from_intensity(jitter: IntensityJitter) -> Self {
        Self { intensity: Some(jitter), geometry: None }
    }

    pub fn from_affine(affine: AffineTransform2D) -> Self {
        Self { intensity: None, geometry: Some(Geometry::Affine(affine)) }
    }

    pub fn from_elastic(field: ElasticField) -> Self {
        Self { intensity: None, geometry: Some(Geometry::Elastic(field)) }
    }

    pub fn is_geometric(&self) -> bool {
        self.geometry.is_some()
    }
}

/// Map a target-image point onto the reference image. Intensity-only
/// transforms project identically; points may land outside the reference
/// domain (callers check bounds).
pub fn project_to_reference(pt: (f64, f64), t: &Transform) -> (f64, f64) {
    match &t.geometry {
        None => pt,
        Some(g) => g.project(pt),
    }
}

/// Synthesize the target image: apply the photometric jitter, then backward-
/// warp with bilinear interpolation, filling out-of-domain samples with
/// `fill`.
pub fn warp_image_with_fill(img: &GrayImage, t: &Transform, fill: f64) -> Result<GrayImage> {
    let jittered;
    let source = match &t.intensity {
        Some(j) => {
            jittered = j.apply(img);
            &jittered
        }
        None => img,
    };
    let geometry = match &t.geometry {
        None => return Ok(source.clone()),
        Some(g) => g,
    };
    validate_geometry(geometry, img.shape())?;
    let (h, w) = source.shape();
    let max_r = (h - 1) as f64;
    let max_c = (w - 1) as f64;
    let pixels = source.pixels();
    let out = Array2::from_shape_fn((h, w), |(r, c)| {
        let (sr, sc) = phi_at(geometry, r, c);
        if sr < 0.0 || sr > max_r || sc < 0.0 || sc > max_c {
            fill
        } else {
            bilinear_clamped(pixels, sr, sc)
        }
    });
    GrayImage::new(out, img.spacing())
}

/// [`warp_image_with_fill`] with the default background fill of 0.
pub fn warp_image(img: &GrayImage, t: &Transform) -> Result<GrayImage> {
    warp_image_with_fill(img, t, 0.0)
}

/// Warp a valid mask with the same φ as the image, using nearest-neighbor
/// interpolation; out-of-domain samples become 0. Intensity-only transforms
/// return the mask unchanged.
pub fn warp_mask(mask: &BinaryMask, t: &Transform) -> Result<BinaryMask> {
    let geometry = match &t.geometry {
        None => return Ok(mask.clone()),
        Some(g) => g,
    };
    validate_geometry(geometry, mask.shape())?;
    let (h, w) = mask.shape();
    let values = Array2::from_shape_fn((h, w), |(r, c)| {
        let (sr, sc) = phi_at(geometry, r, c);
        let ri = sr.round();
        let ci = sc.round();
        if ri < 0.0 || ri > (h - 1) as f64 || ci < 0.0 || ci > (w - 1) as f64 {
            0
        } else {
            mask.values()[[ri as usize, ci as usize]]
        }
    });
    Ok(BinaryMask::new(values).expect("warped mask holds only source values"))
}

/// φ at an integer target pixel: raster lookup for elastic (exact), matrix
/// evaluation for affine — identical to `project_to_reference` at that point.
fn phi_at(geometry: &Geometry, r: usize, c: usize) -> (f64, f64) {
    match geometry {
        Geometry::Affine(a) => a.apply((r as f64, c as f64)),
        Geometry::Elastic(f) => {
            let (ur, uc) = f.displacement_at(r, c);
            (r as f64 + ur, c as f64 + uc)
        }
    }
}

fn validate_geometry(geometry: &Geometry, shape: (usize, usize)) -> Result<()> {
    match geometry {
        Geometry::Affine(a) => {
            if !a.is_invertible() {
                return Err(Error::invalid(format!(
                    "affine matrix is singular (|det| = {:.3e})",
                    a.det().abs()
                )));
            }
        }
        Geometry::Elastic(f) => {
            if f.shape() != shape {
                return Err(Error::invalid(format!(
                    "elastic field grid {:?} does not match image shape {:?}",
                    f.shape(),
                    shape
                )));
            }
        }
    }
    Ok(())
}

/// Median and interquartile range of per-pixel displacement magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisplacementStats {
    pub median_mm: f64,
    pub q1_mm: f64,
    pub q3_mm: f64,
}

/// Displacement statistics of a geometric transform over the mask-1 pixels:
/// magnitudes ‖φ(x) − x‖ · spacing_mm, summarized as median and quartiles.
pub fn displacement_stats(
    t: &Transform,
    mask: &BinaryMask,
    spacing_mm: f64,
) -> Result<DisplacementStats> {
    let geometry = t
        .geometry
        .as_ref()
        .ok_or_else(|| Error::invalid("displacement stats need a geometric transform"))?;
    validate_geometry(geometry, mask.shape())?;
    let mut mags = Vec::with_capacity(mask.count_ones());
    for ((r, c), &v) in mask.values().indexed_iter() {
        if v != 1 {
            continue;
        }
        let (sr, sc) = phi_at(geometry, r, c);
        let dr = sr - r as f64;
        let dc = sc - c as f64;
        mags.push((dr * dr + dc * dc).sqrt() * spacing_mm);
    }
    if mags.is_empty() {
        return Err(Error::invalid("displacement stats over an all-zero mask"));
    }
    let Quartiles { q1, median, q3 } = quartiles(&mags);
    Ok(DisplacementStats { median_mm: median, q1_mm: q1, q3_mm: q3 })
}

/// The transformation families a pair can be synthesized from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformFamily {
    Brightness,
    Contrast,
    Rotation,
    Scaling,
    Shearing,
    /// Full affine: rotation, scaling, and shearing about the image center,
    /// plus translation.
    Affine,
    Elastic,
}

impl TransformFamily {
    pub const ALL: [TransformFamily; 7] = [
        TransformFamily::Brightness,
        TransformFamily::Contrast,
        TransformFamily::Rotation,
        TransformFamily::Scaling,
        TransformFamily::Shearing,
        TransformFamily::Affine,
        TransformFamily::Elastic,
    ];

    /// The families mixed uniformly during training.
    pub const TRAINING_MIX: [TransformFamily; 6] = [
        TransformFamily::Brightness,
        TransformFamily::Contrast,
        TransformFamily::Rotation,
        TransformFamily::Scaling,
        TransformFamily::Shearing,
        TransformFamily::Elastic,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            TransformFamily::Brightness => "brightness",
            TransformFamily::Contrast => "contrast",
            TransformFamily::Rotation => "rotation",
            TransformFamily::Scaling => "scaling",
            TransformFamily::Shearing => "shearing",
            TransformFamily::Affine => "affine",
            TransformFamily::Elastic => "elastic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        TransformFamily::ALL
            .into_iter()
            .find(|f| f.label() == s)
            .ok_or_else(|| Error::invalid(format!("unknown transform family {s:?}")))
    }
}

impl std::fmt::Display for TransformFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Parameter ranges for [`sample_transform`]. All (lo, hi) pairs require
/// lo ≤ hi; a degenerate range pins the parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformRanges {
    /// Signed photometric magnitude (fraction of max intensity / gain − 1).
    pub intensity_magnitude: (f64, f64),
    pub rotation_deg: (f64, f64),
    /// Isotropic scale factor.
    pub scale: (f64, f64),
    /// Off-diagonal shear coefficients (row-by-col and col-by-row).
    pub shear: (f64, f64),
    /// Translation per axis as a signed fraction of that image dimension.
    pub translation_frac: (f64, f64),
    pub elastic_blob_count: usize,
    /// Blob sigma as a fraction of min(rows, cols).
    pub elastic_sigma_frac: (f64, f64),
    /// Blob peak displacement magnitude in px.
    pub elastic_amplitude_px: (f64, f64),
}

impl Default for TransformRanges {
    fn default() -> Self {
        Self {
            intensity_magnitude: (-0.20, 0.20),
            rotation_deg: (-15.0, 15.0),
            scale: (0.85, 1.15),
            shear: (-0.10, 0.10),
            translation_frac: (-0.15, 0.15),
            // Sigma and amplitude are calibrated together so the default
            // elastic spec yields a median displacement near 12 px on a
            // 256x256 full mask; narrower blobs leave most of the image in
            // the far field and cannot reach that median with sane peaks.
            elastic_blob_count: 4,
            elastic_sigma_frac: (1.0 / 6.0, 1.0 / 3.0),
            elastic_amplitude_px: (14.0, 32.0),
        }
    }
}

/// What to draw: a family, the target grid it will act on, and the ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub family: TransformFamily,
    /// (rows, cols) of the image the transform will be applied to.
    pub image_shape: (usize, usize),
    pub ranges: TransformRanges,
}

impl TransformSpec {
    pub fn new(family: TransformFamily, image_shape: (usize, usize)) -> Self {
        Self { family, image_shape, ranges: TransformRanges::default() }
    }
}

fn checked_range(name: &str, (lo, hi): (f64, f64)) -> Result<(f64, f64)> {
    if !lo.is_finite() || !hi.is_finite() || lo > hi {
        return Err(Error::invalid(format!("{name} range ({lo}, {hi}) is invalid")));
    }
    Ok((lo, hi))
}

fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draw a transform of the requested family. Deterministic given the spec and
/// the rng state; every drawn parameter is recorded in the returned value.
pub fn sample_transform(spec: &TransformSpec, rng: &mut impl Rng) -> Result<Transform> {
    let (h, w) = spec.image_shape;
    if h == 0 || w == 0 {
        return Err(Error::invalid("image shape for sampling must be non-empty"));
    }
    let r = &spec.ranges;
    let center = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);

    match spec.family {
        TransformFamily::Brightness | TransformFamily::Contrast => {
            let mode = if spec.family == TransformFamily::Brightness {
                JitterMode::Brightness
            } else {
                JitterMode::Contrast
            };
            let range = checked_range("intensity_magnitude", r.intensity_magnitude)?;
            Ok(Transform::from_intensity(IntensityJitter { mode, magnitude: draw(rng, range) }))
        }
        TransformFamily::Rotation => {
            let range = checked_range("rotation_deg", r.rotation_deg)?;
            let theta = draw(rng, range).to_radians();
            Ok(Transform::from_affine(AffineTransform2D::about_center(
                center,
                rotation_matrix(theta),
                (0.0, 0.0),
            )))
        }
        TransformFamily::Scaling => {
            let range = checked_range("scale", r.scale)?;
            let s = draw(rng, range);
            if s.abs() < 1e-3 {
                return Err(Error::invalid("scale range includes non-invertible values"));
            }
            Ok(Transform::from_affine(AffineTransform2D::about_center(
                center,
                [[s, 0.0], [0.0, s]],
                (0.0, 0.0),
            )))
        }
        TransformFamily::Shearing => {
            let range = checked_range("shear", r.shear)?;
            let sh_rc = draw(rng, range);
            let sh_cr = draw(rng, range);
            Ok(Transform::from_affine(AffineTransform2D::about_center(
                center,
                [[1.0, sh_rc], [sh_cr, 1.0]],
                (0.0, 0.0),
            )))
        }
        TransformFamily::Affine => {
            let rot = checked_range("rotation_deg", r.rotation_deg)?;
            let scl = checked_range("scale", r.scale)?;
            let shr = checked_range("shear", r.shear)?;
            let trn = checked_range("translation_frac", r.translation_frac)?;
            let theta = draw(rng, rot).to_radians();
            let s = draw(rng, scl);
            let sh_rc = draw(rng, shr);
            let sh_cr = draw(rng, shr);
            let t_row = draw(rng, trn) * h as f64;
            let t_col = draw(rng, trn) * w as f64;
            let rot_m = rotation_matrix(theta);
            let scale_m = [[s, 0.0], [0.0, s]];
            let shear_m = [[1.0, sh_rc], [sh_cr, 1.0]];
            let m = matmul2(&matmul2(&rot_m, &scale_m), &shear_m);
            let affine = AffineTransform2D::about_center(center, m, (t_row, t_col));
            if !affine.is_invertible() {
                return Err(Error::invalid("sampled affine is singular"));
            }
            Ok(Transform::from_affine(affine))
        }
        TransformFamily::Elastic => {
            let sig = checked_range("elastic_sigma_frac", r.elastic_sigma_frac)?;
            let amp = checked_range("elastic_amplitude_px", r.elastic_amplitude_px)?;
            if sig.0 <= 0.0 {
                return Err(Error::invalid("elastic sigma fractions must be positive"));
            }
            let min_side = h.min(w) as f64;
            let mut blobs = Vec::with_capacity(r.elastic_blob_count);
            for _ in 0..r.elastic_blob_count {
                let center = [
                    draw(rng, (0.0, h as f64 - 1.0)),
                    draw(rng, (0.0, w as f64 - 1.0)),
                ];
                let sigma = draw(rng, sig) * min_side;
                let magnitude = draw(rng, amp);
                let angle = draw(rng, (0.0, std::f64::consts::TAU));
                let amplitude = [magnitude * angle.cos(), magnitude * angle.sin()];
                blobs.push(GaussianBlob { center, amplitude, sigma });
            }
            Ok(Transform::from_elastic(ElasticField::from_blobs((h, w), blobs)?))
        }
    }
}

fn rotation_matrix(theta: f64) -> [[f64; 2]; 2] {
    let (sin, cos) = theta.sin_cos();
    [[cos, -sin], [sin, cos]]
}

fn matmul2(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [
        [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
        [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
    ]
}
