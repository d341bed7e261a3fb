//! Procedurally generated textured test images.
//!
//! Each image is a soft-edged elliptical "body" on a zero background, filled
//! with a mix of Gaussian bumps, a gentle linear gradient, and band-limited
//! noise. The texture gives detectors distinctive local structure everywhere
//! while the zero background exercises valid-mask handling.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::image_io::GrayImage;

/// Generate one textured image with intensities in [0, 1]. Deterministic in
/// (shape, seed).
pub fn textured_image(shape: (usize, usize), seed: u64) -> GrayImage {
    let (h, w) = shape;
    assert!(h >= 16 && w >= 16, "textured images must be at least 16x16");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    // Elliptical body: center jittered around the middle, axes covering most
    // of the frame, arbitrary orientation, soft edge.
    let cr = h as f64 * rng.random_range(0.45..0.55);
    let cc = w as f64 * rng.random_range(0.45..0.55);
    let ar = h as f64 * rng.random_range(0.32..0.42);
    let ac = w as f64 * rng.random_range(0.32..0.42);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (sin_t, cos_t) = theta.sin_cos();
    let edge = 0.10;

    // Linear gradient across the body.
    let grad_angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (grad_r, grad_c) = (grad_angle.sin(), grad_angle.cos());
    let grad_scale = rng.random_range(0.05..0.15);

    // Gaussian bumps of assorted widths scattered over the frame.
    let n_blobs = rng.random_range(8..=14);
    let mut blobs = Vec::with_capacity(n_blobs);
    for _ in 0..n_blobs {
        let center = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let sigma: f64 = rng.random_range(3.0..(h.min(w) as f64 / 8.0));
        let amp = rng.random_range(-0.25..0.35);
        blobs.push((center, 1.0 / (2.0 * sigma * sigma), amp));
    }

    // Band-limited noise: white noise smoothed by two box-blur passes.
    let noise = box_blur3(&box_blur3(&Array2::from_shape_fn((h, w), |_| {
        rng.random_range(-1.0..1.0)
    })));

    let pixels = Array2::from_shape_fn((h, w), |(r, c)| {
        let dr = r as f64 - cr;
        let dc = c as f64 - cc;
        // normalized elliptical radius in the rotated frame
        let u = (dr * cos_t + dc * sin_t) / ar;
        let v = (-dr * sin_t + dc * cos_t) / ac;
        let radius = (u * u + v * v).sqrt();
        let body = ((1.0 - radius) / edge).clamp(0.0, 1.0);
        if body == 0.0 {
            return 0.0;
        }
        let mut tex = 0.45 + grad_scale * (grad_r * dr / h as f64 + grad_c * dc / w as f64) * 2.0;
        for &((br, bc), inv2s2, amp) in &blobs {
            let dbr = r as f64 - br;
            let dbc = c as f64 - bc;
            tex += amp * (-(dbr * dbr + dbc * dbc) * inv2s2).exp();
        }
        tex += 0.10 * noise[[r, c]];
        (body * tex).clamp(0.0, 1.0)
    });
    GrayImage::new(pixels, (1.0, 1.0)).expect("generated shape and spacing are valid")
}

/// A reproducible dataset of textured images: seeds base_seed, base_seed+1, …
pub fn texture_dataset(count: usize, shape: (usize, usize), base_seed: u64) -> Vec<GrayImage> {
    (0..count).map(|i| textured_image(shape, base_seed + i as u64)).collect()
}

/// 3x3 box blur with clamped borders.
fn box_blur3(a: &Array2<f64>) -> Array2<f64> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let mut sum = 0.0;
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let rr = (r as i64 + dr).clamp(0, h as i64 - 1) as usize;
                let cc = (c as i64 + dc).clamp(0, w as i64 - 1) as usize;
                sum += a[[rr, cc]];
            }
        }
        sum / 9.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_io::compute_valid_mask;

    #[test]
    fn deterministic_per_seed() {
        let a = textured_image((96, 96), 42);
        let b = textured_image((96, 96), 42);
        assert_eq!(a, b);
        let c = textured_image((96, 96), 43);
        assert_ne!(a, c);
    }

    #[test]
    fn values_bounded_and_finite() {
        let img = textured_image((64, 80), 7);
        assert_eq!(img.shape(), (64, 80));
        for &v in img.pixels().iter() {
            assert!(v.is_finite() && (0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn body_dominates_the_valid_mask() {
        for seed in 0..8 {
            let img = textured_image((96, 96), seed);
            let mask = compute_valid_mask(&img, 0.05, 50);
            let frac = mask.count_ones() as f64 / (96.0 * 96.0);
            assert!(frac > 0.25, "seed {seed}: body covers only {frac:.2} of the frame");
        }
    }

    #[test]
    fn dataset_uses_consecutive_seeds() {
        let ds = texture_dataset(3, (32, 32), 100);
        assert_eq!(ds.len(), 3);
        assert_eq!(ds[1], textured_image((32, 32), 101));
    }
}
