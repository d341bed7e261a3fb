//! Classical keypoint baseline: a simplified multi-scale
//! difference-of-Gaussian detector with orientation-histogram descriptors,
//! matched either by a one-directional ratio test or by the same
//! inverse-consistency rule the learned pipeline uses. Deliberately minimal
//! (no subpixel refinement, no edge-response elimination): its job is to be
//! a transparent comparator, not a faithful SIFT. Externally computed
//! keypoints can be substituted through the CSV import path.

use ndarray::Array2;
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::image_io::GrayImage;
use crate::pipeline::inverse_consistent_match;

/// Descriptor length: 4 x 4 spatial bins x 8 orientation bins.
pub const DESCRIPTOR_DIM: usize = 128;
/// Base blur of the first scale-space level, in pixels.
pub const BASE_SIGMA: f64 = 1.6;

pub const DEFAULT_OCTAVES: usize = 4;
pub const DEFAULT_SCALES_PER_OCTAVE: usize = 3;
pub const DEFAULT_CONTRAST_THRESH: f64 = 0.03;
pub const DEFAULT_RATIO: f64 = 0.75;

/// One detected keypoint. `descriptor` is empty until
/// [`compute_descriptors`] fills it with a unit-norm 128-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassicKeypoint {
    /// (row, col) in full-resolution pixels.
    pub location: (f64, f64),
    /// Absolute blur level (pixels at full resolution).
    pub scale: f64,
    /// Dominant gradient orientation, radians in (-pi, pi].
    pub orientation: f64,
    pub descriptor: Vec<f64>,
}

// ------------------------------------------------------------ scale space

/// Gaussian and difference-of-Gaussian stacks of one octave.
pub struct OctaveStack {
    /// `scales_per_octave + 3` progressively blurred images.
    pub gaussians: Vec<Array2<f64>>,
    /// Adjacent differences: `dogs[l] = gaussians[l + 1] - gaussians[l]`.
    pub dogs: Vec<Array2<f64>>,
    /// Blur level of each Gaussian, in this octave's own pixels.
    pub sigmas: Vec<f64>,
    /// Full-resolution pixels per pixel of this octave (1, 2, 4, ...).
    pub scale_factor: f64,
}

/// The full multi-octave difference-of-Gaussian stack. Exposed so analyses
/// and tests can scan the very same data the detector saw.
pub struct DogScaleSpace {
    pub octaves: Vec<OctaveStack>,
}

fn min_max_normalize(img: &GrayImage) -> Result<Array2<f64>> {
    if img.pixels().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("image contains non-finite intensities"));
    }
    let min = img.pixels().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = img.pixels().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range <= 0.0 {
        return Ok(Array2::zeros(img.shape()));
    }
    Ok(img.pixels().mapv(|v| (v - min) / range))
}

/// Separable Gaussian blur with replicated borders.
fn gaussian_blur(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-(i * i) as f64 / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= sum);

    let (h, w) = img.dim();
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut rows = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let cc = clamp(c as isize + ki as isize - radius, w);
                acc += k * img[[r, cc]];
            }
            rows[[r, c]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for c in 0..w {
        for r in 0..h {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let rr = clamp(r as isize + ki as isize - radius, h);
                acc += k * rows[[rr, c]];
            }
            out[[r, c]] = acc;
        }
    }
    out
}

fn downsample2(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h / 2, w / 2), |(r, c)| img[[2 * r, 2 * c]])
}

/// Build the Gaussian + difference-of-Gaussian pyramid. Intensities are
/// min-max normalized first so the contrast threshold has a fixed meaning.
pub fn dog_scale_space(
    img: &GrayImage,
    octaves: usize,
    scales_per_octave: usize,
) -> Result<DogScaleSpace> {
    if octaves == 0 || scales_per_octave == 0 {
        return Err(Error::invalid("octaves and scales_per_octave must be positive"));
    }
    let (h, w) = img.shape();
    let min_side = h.min(w) >> (octaves - 1);
    if min_side < 8 {
        return Err(Error::invalid(format!(
            "image {h}x{w} is too small for {octaves} octaves (last octave would be \
             {min_side} px on its short side; need at least 8)"
        )));
    }

    let k = 2f64.powf(1.0 / scales_per_octave as f64);
    let levels = scales_per_octave + 3;
    let sigmas: Vec<f64> = (0..levels).map(|l| BASE_SIGMA * k.powi(l as i32)).collect();

    let mut base = min_max_normalize(img)?;
    let mut stacks = Vec::with_capacity(octaves);
    for o in 0..octaves {
        let mut gaussians = Vec::with_capacity(levels);
        // incremental blur: each level adds just enough on top of the last
        gaussians.push(gaussian_blur(&base, sigmas[0]));
        for l in 1..levels {
            let delta = (sigmas[l] * sigmas[l] - sigmas[l - 1] * sigmas[l - 1]).sqrt();
            gaussians.push(gaussian_blur(&gaussians[l - 1], delta));
        }
        let dogs: Vec<Array2<f64>> =
            (0..levels - 1).map(|l| &gaussians[l + 1] - &gaussians[l]).collect();
        // the next octave restarts from the level whose blur doubled
        base = downsample2(&gaussians[scales_per_octave]);
        stacks.push(OctaveStack {
            gaussians,
            dogs,
            sigmas: sigmas.clone(),
            scale_factor: 2f64.powi(o as i32),
        });
    }
    Ok(DogScaleSpace { octaves: stacks })
}

// -------------------------------------------------------------- detection

/// True if `dogs[layer][[r, c]]` strictly dominates (or is strictly
/// dominated by) all 26 neighbors in the 3x3x3 block around it.
pub fn is_scale_space_extremum(dogs: &[Array2<f64>], layer: usize, r: usize, c: usize) -> bool {
    let v = dogs[layer][[r, c]];
    let mut above = true;
    let mut below = true;
    for dl in [-1isize, 0, 1] {
        let plane = &dogs[(layer as isize + dl) as usize];
        for dr in [-1isize, 0, 1] {
            for dc in [-1isize, 0, 1] {
                if dl == 0 && dr == 0 && dc == 0 {
                    continue;
                }
                let n = plane[[(r as isize + dr) as usize, (c as isize + dc) as usize]];
                above &= v > n;
                below &= v < n;
            }
        }
    }
    above || below
}

fn gradient_at(img: &Array2<f64>, r: usize, c: usize) -> (f64, f64) {
    let gr = (img[[r + 1, c]] - img[[r - 1, c]]) / 2.0;
    let gc = (img[[r, c + 1]] - img[[r, c - 1]]) / 2.0;
    (gr, gc)
}

/// Peak of a 36-bin gradient-orientation histogram over a Gaussian-weighted
/// window around (r, c).
fn dominant_orientation(img: &Array2<f64>, r: usize, c: usize, sigma: f64) -> f64 {
    const BINS: usize = 36;
    let (h, w) = img.dim();
    let weight_sigma = 1.5 * sigma;
    let radius = (3.0 * weight_sigma).ceil().max(1.0) as isize;
    let mut hist = [0.0f64; BINS];
    for dr in -radius..=radius {
        for dc in -radius..=radius {
            let pr = r as isize + dr;
            let pc = c as isize + dc;
            if pr < 1 || pc < 1 || pr >= h as isize - 1 || pc >= w as isize - 1 {
                continue;
            }
            let (gr, gc) = gradient_at(img, pr as usize, pc as usize);
            let mag = (gr * gr + gc * gc).sqrt();
            if mag == 0.0 {
                continue;
            }
            let weight =
                (-((dr * dr + dc * dc) as f64) / (2.0 * weight_sigma * weight_sigma)).exp();
            let angle = gr.atan2(gc); // (-pi, pi]
            let mut bin = ((angle + PI) / (2.0 * PI) * BINS as f64).floor() as usize;
            bin = bin.min(BINS - 1);
            hist[bin] += weight * mag;
        }
    }
    let best = hist
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    // bin center, mapped back to (-pi, pi]
    (best as f64 + 0.5) / BINS as f64 * 2.0 * PI - PI
}

/// Detect difference-of-Gaussian extrema. Keypoints carry location, scale,
/// and dominant orientation; descriptors are filled separately. A constant
/// image has no extrema and yields an empty list.
pub fn detect_keypoints_dog(
    img: &GrayImage,
    octaves: usize,
    scales_per_octave: usize,
    contrast_thresh: f64,
) -> Result<Vec<ClassicKeypoint>> {
    if !(contrast_thresh > 0.0) {
        return Err(Error::invalid("contrast_thresh must be positive"));
    }
    let ss = dog_scale_space(img, octaves, scales_per_octave)?;
    let mut kps = Vec::new();
    for oct in &ss.octaves {
        let (h, w) = oct.dogs[0].dim();
        for layer in 1..oct.dogs.len() - 1 {
            for r in 1..h - 1 {
                for c in 1..w - 1 {
                    let v = oct.dogs[layer][[r, c]];
                    if v.abs() <= contrast_thresh {
                        continue;
                    }
                    if !is_scale_space_extremum(&oct.dogs, layer, r, c) {
                        continue;
                    }
                    let sigma = oct.sigmas[layer];
                    let orientation = dominant_orientation(&oct.gaussians[layer], r, c, sigma);
                    kps.push(ClassicKeypoint {
                        location: (r as f64 * oct.scale_factor, c as f64 * oct.scale_factor),
                        scale: sigma * oct.scale_factor,
                        orientation,
                        descriptor: Vec::new(),
                    });
                }
            }
        }
    }
    Ok(kps)
}

// ------------------------------------------------------------ descriptors

const SPATIAL_BINS: usize = 4;
const ORIENT_BINS: usize = 8;
const CLIP: f64 = 0.2;

/// Compute orientation-normalized 4x4x8 gradient histograms at each
/// keypoint, on the full-resolution image blurred to the keypoint's scale.
/// Keypoints whose sampling window leaves the image, or whose window has no
/// gradient at all, are dropped rather than reported as errors.
pub fn compute_descriptors(
    img: &GrayImage,
    kps: &[ClassicKeypoint],
) -> Result<Vec<ClassicKeypoint>> {
    let normalized = min_max_normalize(img)?;
    let (h, w) = normalized.dim();
    // one blurred copy per distinct scale
    let mut blurred: BTreeMap<u64, Array2<f64>> = BTreeMap::new();
    let mut out = Vec::with_capacity(kps.len());
    for kp in kps {
        if !(kp.scale > 0.0) || !kp.location.0.is_finite() || !kp.location.1.is_finite() {
            return Err(Error::invalid(format!(
                "keypoint at {:?} has invalid scale or location",
                kp.location
            )));
        }
        let hist_width = 3.0 * kp.scale;
        let radius =
            (hist_width * (SPATIAL_BINS as f64 + 1.0) / 2.0 * std::f64::consts::SQRT_2).ceil();
        let (r0, c0) = kp.location;
        if r0 - radius < 1.0
            || c0 - radius < 1.0
            || r0 + radius > (h - 2) as f64
            || c0 + radius > (w - 2) as f64
        {
            continue; // window exceeds the image: drop the keypoint
        }
        let img_s = blurred
            .entry(kp.scale.to_bits())
            .or_insert_with(|| gaussian_blur(&normalized, kp.scale));

        let (sin_t, cos_t) = kp.orientation.sin_cos();
        let weight_sigma = 0.5 * SPATIAL_BINS as f64 * hist_width;
        let mut hist = [0.0f64; DESCRIPTOR_DIM];
        let ri = radius as isize;
        for dr in -ri..=ri {
            for dc in -ri..=ri {
                let pr = (r0 as isize + dr) as usize;
                let pc = (c0 as isize + dc) as usize;
                // rotate the offset into the keypoint's frame (row = y, col = x)
                let drf = dr as f64;
                let dcf = dc as f64;
                let rot_r = -dcf * sin_t + drf * cos_t;
                let rot_c = dcf * cos_t + drf * sin_t;
                let u = rot_r / hist_width + (SPATIAL_BINS as f64 - 1.0) / 2.0;
                let v = rot_c / hist_width + (SPATIAL_BINS as f64 - 1.0) / 2.0;
                if u <= -1.0 || u >= SPATIAL_BINS as f64 || v <= -1.0 || v >= SPATIAL_BINS as f64
                {
                    continue;
                }
                let (gr, gc) = gradient_at(img_s, pr, pc);
                let mag = (gr * gr + gc * gc).sqrt();
                if mag == 0.0 {
                    continue;
                }
                let mut angle = gr.atan2(gc) - kp.orientation;
                while angle < 0.0 {
                    angle += 2.0 * PI;
                }
                while angle >= 2.0 * PI {
                    angle -= 2.0 * PI;
                }
                let ob = angle / (2.0 * PI) * ORIENT_BINS as f64;
                let weight = mag
                    * (-(rot_r * rot_r + rot_c * rot_c)
                        / (2.0 * weight_sigma * weight_sigma))
                        .exp();

                // trilinear soft assignment over (u, v, orientation)
                let u0 = u.floor();
                let v0 = v.floor();
                let o0 = ob.floor();
                let fu = u - u0;
                let fv = v - v0;
                let fo = ob - o0;
                for (du, wu) in [(0isize, 1.0 - fu), (1, fu)] {
                    let ub = u0 as isize + du;
                    if ub < 0 || ub >= SPATIAL_BINS as isize {
                        continue;
                    }
                    for (dv, wv) in [(0isize, 1.0 - fv), (1, fv)] {
                        let vb = v0 as isize + dv;
                        if vb < 0 || vb >= SPATIAL_BINS as isize {
                            continue;
                        }
                        for (do_, wo) in [(0isize, 1.0 - fo), (1, fo)] {
                            let obn = (o0 as isize + do_).rem_euclid(ORIENT_BINS as isize);
                            let idx = (ub as usize * SPATIAL_BINS + vb as usize) * ORIENT_BINS
                                + obn as usize;
                            hist[idx] += weight * wu * wv * wo;
                        }
                    }
                }
            }
        }

        let norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 {
            continue; // gradient-free window: nothing to describe
        }
        hist.iter_mut().for_each(|v| *v = (*v / norm).min(CLIP));
        let norm2 = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
        let descriptor: Vec<f64> = hist.iter().map(|v| v / norm2).collect();
        out.push(ClassicKeypoint { descriptor, ..kp.clone() });
    }
    Ok(out)
}

/// Detection plus description in one call.
pub fn detect_and_describe(
    img: &GrayImage,
    octaves: usize,
    scales_per_octave: usize,
    contrast_thresh: f64,
) -> Result<Vec<ClassicKeypoint>> {
    let kps = detect_keypoints_dog(img, octaves, scales_per_octave, contrast_thresh)?;
    compute_descriptors(img, &kps)
}

// ---------------------------------------------------------------- matching

fn descriptor_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn check_descriptors(kps: &[ClassicKeypoint]) -> Result<()> {
    for kp in kps {
        if kp.descriptor.len() != DESCRIPTOR_DIM {
            return Err(Error::invalid(format!(
                "keypoint at {:?} has descriptor length {}, expected {DESCRIPTOR_DIM}",
                kp.location,
                kp.descriptor.len()
            )));
        }
    }
    Ok(())
}

/// One-directional nearest-neighbor matching with the distance-ratio test:
/// keypoint i matches its nearest j iff the nearest distance is strictly
/// below `ratio` times the second-nearest. Fewer than two descriptors on
/// the right side leave nothing to compare against, so the result is empty.
pub fn match_ratio_test(
    d1: &[ClassicKeypoint],
    d2: &[ClassicKeypoint],
    ratio: f64,
) -> Result<Vec<(usize, usize)>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("ratio must lie in (0, 1), got {ratio}")));
    }
    check_descriptors(d1)?;
    check_descriptors(d2)?;
    if d2.len() < 2 {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for (i, a) in d1.iter().enumerate() {
        let mut nearest = (usize::MAX, f64::INFINITY);
        let mut second = f64::INFINITY;
        for (j, b) in d2.iter().enumerate() {
            let d = descriptor_distance(&a.descriptor, &b.descriptor);
            if d < nearest.1 {
                second = nearest.1;
                nearest = (j, d);
            } else if d < second {
                second = d;
            }
        }
        if nearest.1 < ratio * second {
            out.push((i, nearest.0));
        }
    }
    Ok(out)
}

/// Mutual-best matching on descriptor distances, using the same
/// inverse-consistency rule as the learned pipeline. With no probability
/// channel available, the negated distance stands in for the score, so both
/// criteria reduce to distance-only mutual nearest neighbors.
pub fn match_inverse_consistent(
    d1: &[ClassicKeypoint],
    d2: &[ClassicKeypoint],
) -> Result<Vec<(usize, usize)>> {
    check_descriptors(d1)?;
    check_descriptors(d2)?;
    if d1.is_empty() || d2.is_empty() {
        return Ok(Vec::new());
    }
    let dist = Array2::from_shape_fn((d1.len(), d2.len()), |(i, j)| {
        descriptor_distance(&d1[i].descriptor, &d2[j].descriptor)
    });
    let neg = dist.mapv(|v| -v);
    Ok(inverse_consistent_match(&neg, &dist))
}

// --------------------------------------------------------------- CSV I/O

fn csv_header() -> String {
    let mut header = String::from("row,col,scale,orientation");
    for i in 0..DESCRIPTOR_DIM {
        header.push_str(&format!(",d{i}"));
    }
    header
}

/// Export keypoints (descriptors required) as
/// `row,col,scale,orientation,d0..d127`.
pub fn write_keypoints_csv(kps: &[ClassicKeypoint], mut w: impl Write) -> Result<()> {
    check_descriptors(kps)?;
    writeln!(w, "{}", csv_header())?;
    for kp in kps {
        write!(
            w,
            "{},{},{},{}",
            kp.location.0, kp.location.1, kp.scale, kp.orientation
        )?;
        for d in &kp.descriptor {
            write!(w, ",{d}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Import keypoints written by [`write_keypoints_csv`] (or by an external
/// tool following the same layout). Descriptors must be unit norm within
/// 1e-5.
pub fn read_keypoints_csv(mut r: impl Read) -> Result<Vec<ClassicKeypoint>> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header.trim() != csv_header() {
        return Err(Error::format(
            "unexpected keypoint CSV header (want row,col,scale,orientation,d0..d127)",
        ));
    }
    let mut kps = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 + DESCRIPTOR_DIM {
            return Err(Error::format(format!(
                "keypoint CSV line {}: expected {} fields, got {}",
                ln + 2,
                4 + DESCRIPTOR_DIM,
                fields.len()
            )));
        }
        let parse = |s: &str| {
            s.trim().parse::<f64>().map_err(|_| {
                Error::format(format!("keypoint CSV line {}: bad number {s:?}", ln + 2))
            })
        };
        let row = parse(fields[0])?;
        let col = parse(fields[1])?;
        let scale = parse(fields[2])?;
        let orientation = parse(fields[3])?;
        let descriptor: Vec<f64> =
            fields[4..].iter().map(|s| parse(s)).collect::<Result<_>>()?;
        let norm = descriptor.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-5 {
            return Err(Error::format(format!(
                "keypoint CSV line {}: descriptor norm {norm} is not 1 within 1e-5",
                ln + 2
            )));
        }
        kps.push(ClassicKeypoint { location: (row, col), scale, orientation, descriptor });
    }
    Ok(kps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_preserves_mean_of_constant_image() {
        let img = Array2::from_elem((16, 16), 0.7);
        let blurred = gaussian_blur(&img, 2.0);
        for v in blurred.iter() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_space_shapes_and_sigma_progression() {
        let img = GrayImage::new(Array2::from_elem((64, 48), 0.5), (1.0, 1.0)).unwrap();
        let ss = dog_scale_space(&img, 3, 3).unwrap();
        assert_eq!(ss.octaves.len(), 3);
        for (o, oct) in ss.octaves.iter().enumerate() {
            assert_eq!(oct.gaussians.len(), 6);
            assert_eq!(oct.dogs.len(), 5);
            assert_eq!(oct.scale_factor, 2f64.powi(o as i32));
            assert_eq!(oct.gaussians[0].dim(), (64 >> o, 48 >> o));
            // each sigma is k times the previous, and the stack spans one
            // doubling over scales_per_octave steps
            assert!((oct.sigmas[3] / oct.sigmas[0] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_space_rejects_too_small_images() {
        let img = GrayImage::new(Array2::from_elem((16, 16), 0.5), (1.0, 1.0)).unwrap();
        assert!(dog_scale_space(&img, 4, 3).is_err());
        assert!(dog_scale_space(&img, 2, 3).is_ok());
    }

    #[test]
    fn ratio_test_example_accepts_clear_winner() {
        // two right-side descriptors at distances 0.2 and 0.9: accepted at
        // ratio 0.75 because 0.2 < 0.675
        let mut e0 = vec![0.0; DESCRIPTOR_DIM];
        e0[0] = 1.0;
        let make = |v: Vec<f64>| ClassicKeypoint {
            location: (0.0, 0.0),
            scale: 1.0,
            orientation: 0.0,
            descriptor: v,
        };
        // construct unit vectors at controlled distances from e0:
        // d = sqrt(2 - 2 cos phi) => phi = acos(1 - d^2 / 2)
        let at_distance = |d: f64| {
            let phi = (1.0 - d * d / 2.0).acos();
            let mut v = vec![0.0; DESCRIPTOR_DIM];
            v[0] = phi.cos();
            v[1] = phi.sin();
            make(v)
        };
        let d1 = vec![make(e0)];
        let d2 = vec![at_distance(0.2), at_distance(0.9)];
        let matches = match_ratio_test(&d1, &d2, 0.75).unwrap();
        assert_eq!(matches, vec![(0, 0)]);
        // and rejected once the ratio is too strict: 0.2 >= 0.22 * 0.9
        let matches = match_ratio_test(&d1, &d2, 0.22).unwrap();
        assert!(matches.is_empty());
    }

    #[test]
    fn ratio_test_rejects_invalid_ratio() {
        let kp = ClassicKeypoint {
            location: (0.0, 0.0),
            scale: 1.0,
            orientation: 0.0,
            descriptor: vec![0.0; DESCRIPTOR_DIM],
        };
        let set = vec![kp.clone(), kp];
        assert!(match_ratio_test(&set, &set, 0.0).is_err());
        assert!(match_ratio_test(&set, &set, 1.0).is_err());
    }
}
