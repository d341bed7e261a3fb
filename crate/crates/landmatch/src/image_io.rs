//! Grayscale image loading, resampling, and valid-mask computation.
//!
//! Supported on-disk formats: PNG (8/16-bit grayscale), PGM, and raw
//! little-endian float32/float64 arrays with a JSON sidecar describing shape
//! and spacing. A sidecar next to a PNG/PGM may also supply physical spacing;
//! without one the spacing defaults to 1 mm per pixel. Masks are persisted as
//! 8-bit PNGs holding only 0 and 255.

use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum side length; four 2x downsamplings need at least 16 px.
pub const MIN_SIDE: usize = 16;

/// A 2D scalar-intensity image with isotropic-capable physical spacing.
///
/// `spacing` is (row_mm, col_mm): the physical extent of one pixel along each
/// axis. Pixel values are arbitrary intensity units kept as `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pixels: Array2<f64>,
    spacing: (f64, f64),
}

impl GrayImage {
    /// Wrap a pixel array, validating the size and spacing invariants.
    pub fn new(pixels: Array2<f64>, spacing: (f64, f64)) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::invalid(format!(
                "image must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}"
            )));
        }
        if !(spacing.0 > 0.0 && spacing.1 > 0.0) {
            return Err(Error::invalid(format!(
                "spacing components must be positive, got {spacing:?}"
            )));
        }
        Ok(Self { pixels, spacing })
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn spacing(&self) -> (f64, f64) {
        self.spacing
    }

    /// (rows, cols)
    pub fn shape(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    /// Maximum pixel intensity (0.0 for an all-NaN-free empty case cannot
    /// occur; images are at least 16x16).
    pub fn max_intensity(&self) -> f64 {
        self.pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Bilinear sample at a fractional (row, col) position, clamped to the
    /// image bounds.
    pub fn sample_bilinear_clamped(&self, row: f64, col: f64) -> f64 {
        bilinear_clamped(&self.pixels, row, col)
    }
}

/// A {0,1} mask with the same shape as its owning image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    values: Array2<u8>,
}

impl BinaryMask {
    /// Wrap a {0,1} array; any other value is rejected.
    pub fn new(values: Array2<u8>) -> Result<Self> {
        if values.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask values must be exactly 0 or 1"));
        }
        Ok(Self { values })
    }

    /// Mask of all ones with the given shape.
    pub fn full(shape: (usize, usize)) -> Self {
        Self { values: Array2::ones(shape) }
    }

    pub fn values(&self) -> &Array2<u8> {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn is_set(&self, row: usize, col: usize) -> bool {
        self.values[[row, col]] == 1
    }

    /// Number of pixels with value 1.
    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }
}

/// JSON sidecar accompanying raw arrays (required) or PNG/PGM (optional,
/// spacing only).
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct Sidecar {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shape: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spacing: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dtype: Option<String>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn read_sidecar(path: &Path) -> Result<Option<Sidecar>> {
    let sc_path = sidecar_path(path);
    if !sc_path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&sc_path)?;
    let sc: Sidecar = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("bad sidecar {}: {e}", sc_path.display())))?;
    Ok(Some(sc))
}

/// Load a grayscale image from PNG (8/16-bit), PGM, or a raw float array with
/// a JSON sidecar. Spacing comes from the sidecar when present, else (1, 1).
pub fn load_grayscale(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    let sidecar = read_sidecar(path)?;
    let spacing = sidecar
        .as_ref()
        .and_then(|sc| sc.spacing)
        .map(|s| (s[0], s[1]))
        .unwrap_or((1.0, 1.0));

    let pixels = match ext.as_str() {
        "png" | "pgm" | "pnm" => decode_image_file(path)?,
        "raw" | "f32" | "bin" => {
            let sc = sidecar.ok_or_else(|| {
                Error::format(format!(
                    "raw array {} requires a JSON sidecar with a shape field",
                    path.display()
                ))
            })?;
            decode_raw(path, &sc)?
        }
        other => {
            return Err(Error::format(format!(
                "unsupported image extension {other:?} for {}",
                path.display()
            )))
        }
    };
    GrayImage::new(pixels, spacing)
}

fn decode_image_file(path: &Path) -> Result<Array2<f64>> {
    let dynamic = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::format(format!("{}: {other}", path.display())),
    })?;
    match dynamic {
        image::DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
                img.get_pixel(c as u32, r as u32)[0] as f64
            }))
        }
        image::DynamicImage::ImageLuma16(img) => {
            let (w, h) = img.dimensions();
            Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
                img.get_pixel(c as u32, r as u32)[0] as f64
            }))
        }
        other => Err(Error::format(format!(
            "{}: expected 8/16-bit grayscale, got {:?}",
            path.display(),
            other.color()
        ))),
    }
}

fn decode_raw(path: &Path, sc: &Sidecar) -> Result<Array2<f64>> {
    let shape = sc
        .shape
        .ok_or_else(|| Error::format(format!("sidecar for {} lacks shape", path.display())))?;
    let (h, w) = (shape[0], shape[1]);
    let dtype = sc.dtype.as_deref().unwrap_or("f32");
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let data: Vec<f64> = match dtype {
        "f32" => {
            if bytes.len() != h * w * 4 {
                return Err(Error::format(format!(
                    "{}: expected {} bytes for {h}x{w} f32, got {}",
                    path.display(),
                    h * w * 4,
                    bytes.len()
                )));
            }
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect()
        }
        "f64" => {
            if bytes.len() != h * w * 8 {
                return Err(Error::format(format!(
                    "{}: expected {} bytes for {h}x{w} f64, got {}",
                    path.display(),
                    h * w * 8,
                    bytes.len()
                )));
            }
            bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
                .collect()
        }
        other => return Err(Error::format(format!("unsupported raw dtype {other:?}"))),
    };
    Array2::from_shape_vec((h, w), data)
        .map_err(|e| Error::format(format!("raw shape mismatch: {e}")))
}

/// Write a raw little-endian f32 array next to a JSON sidecar recording shape
/// and spacing. Lossless apart from the f64 -> f32 narrowing.
pub fn save_raw_f32(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(img.pixels.len() * 4);
    for &v in img.pixels.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    let sc = Sidecar {
        shape: Some([img.height(), img.width()]),
        spacing: Some([img.spacing.0, img.spacing.1]),
        dtype: Some("f32".to_string()),
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sc)?)?;
    Ok(())
}

/// Save as 16-bit grayscale PNG with the given intensity scale: stored value
/// is `round(pixel * scale)` clamped to [0, 65535]. A sidecar records the
/// spacing so `load_grayscale` round-trips it.
pub fn save_png16(path: impl AsRef<Path>, img: &GrayImage, scale: f64) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = img.shape();
    let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for (r, row) in img.pixels.rows().into_iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let q = (v * scale).round().clamp(0.0, 65535.0) as u16;
            buf.put_pixel(c as u32, r as u32, image::Luma([q]));
        }
    }
    buf.save(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let sc = Sidecar {
        shape: None,
        spacing: Some([img.spacing.0, img.spacing.1]),
        dtype: None,
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sc)?)?;
    Ok(())
}

/// Persist a mask as an 8-bit PNG holding 0 or 255.
pub fn save_mask_png(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = mask.shape();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for ((r, c), &v) in mask.values.indexed_iter() {
        buf.put_pixel(c as u32, r as u32, image::Luma([if v == 1 { 255 } else { 0 }]));
    }
    buf.save(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

/// Load a 0/255 PNG mask written by [`save_mask_png`].
pub fn load_mask_png(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let pixels = decode_image_file(path)?;
    let mut values = Array2::<u8>::zeros(pixels.dim());
    for ((r, c), &v) in pixels.indexed_iter() {
        values[[r, c]] = if v == 255.0 {
            1
        } else if v == 0.0 {
            0
        } else {
            return Err(Error::format(format!(
                "{}: mask pixels must be 0 or 255, found {v}",
                path.display()
            )));
        };
    }
    BinaryMask::new(values)
}

pub(crate) fn bilinear_clamped(a: &Array2<f64>, row: f64, col: f64) -> f64 {
    let (h, w) = a.dim();
    let r = row.clamp(0.0, (h - 1) as f64);
    let c = col.clamp(0.0, (w - 1) as f64);
    let r0 = r.floor() as usize;
    let c0 = c.floor() as usize;
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let dr = r - r0 as f64;
    let dc = c - c0 as f64;
    let top = a[[r0, c0]] * (1.0 - dc) + a[[r0, c1]] * dc;
    let bot = a[[r1, c0]] * (1.0 - dc) + a[[r1, c1]] * dc;
    top * (1.0 - dr) + bot * dr
}

/// Resample to isotropic spacing via bilinear interpolation.
///
/// Output shape is `round(shape * spacing / target_mm)` per axis. When the
/// input spacing already equals the target the image is returned unchanged,
/// bit for bit.
pub fn resample_to_isotropic(img: &GrayImage, target_mm: f64) -> Result<GrayImage> {
    if !(target_mm > 0.0) {
        return Err(Error::invalid(format!("target_mm must be positive, got {target_mm}")));
    }
    let (row_mm, col_mm) = img.spacing;
    if row_mm == target_mm && col_mm == target_mm {
        return Ok(img.clone());
    }
    let (h, w) = img.shape();
    let out_h = ((h as f64) * row_mm / target_mm).round().max(1.0) as usize;
    let out_w = ((w as f64) * col_mm / target_mm).round().max(1.0) as usize;
    // Pixel-center alignment: output pixel i sits at physical (i + 0.5) *
    // target, which maps to input coordinate (i + 0.5) * target / spacing - 0.5.
    let rr = target_mm / row_mm;
    let cc = target_mm / col_mm;
    let pixels = Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let src_r = (i as f64 + 0.5) * rr - 0.5;
        let src_c = (j as f64 + 0.5) * cc - 0.5;
        bilinear_clamped(&img.pixels, src_r, src_c)
    });
    GrayImage::new(pixels, (target_mm, target_mm))
}

/// Threshold the image at `intensity_thresh` and drop 8-connected components
/// smaller than `min_component_px`.
pub fn compute_valid_mask(
    img: &GrayImage,
    intensity_thresh: f64,
    min_component_px: usize,
) -> BinaryMask {
    let (h, w) = img.shape();
    let mut values = Array2::<u8>::zeros((h, w));
    for ((r, c), &v) in img.pixels.indexed_iter() {
        if v >= intensity_thresh {
            values[[r, c]] = 1;
        }
    }
    if min_component_px > 1 {
        remove_small_components(&mut values, min_component_px);
    }
    BinaryMask { values }
}

/// In-place removal of 8-connected components of 1s with area below the cutoff.
fn remove_small_components(values: &mut Array2<u8>, min_component_px: usize) {
    let (h, w) = values.dim();
    let mut visited = Array2::<bool>::from_elem((h, w), false);
    let mut stack: Vec<(usize, usize)> = Vec::new();
    let mut component: Vec<(usize, usize)> = Vec::new();
    for sr in 0..h {
        for sc in 0..w {
            if values[[sr, sc]] != 1 || visited[[sr, sc]] {
                continue;
            }
            component.clear();
            stack.push((sr, sc));
            visited[[sr, sc]] = true;
            while let Some((r, c)) = stack.pop() {
                component.push((r, c));
                let r0 = r.saturating_sub(1);
                let c0 = c.saturating_sub(1);
                for nr in r0..=(r + 1).min(h - 1) {
                    for nc in c0..=(c + 1).min(w - 1) {
                        if !visited[[nr, nc]] && values[[nr, nc]] == 1 {
                            visited[[nr, nc]] = true;
                            stack.push((nr, nc));
                        }
                    }
                }
            }
            if component.len() < min_component_px {
                for &(r, c) in &component {
                    values[[r, c]] = 0;
                }
            }
        }
    }
}
