//! Low-level differentiable tensor ops used by the network: 2D convolution
//! (im2col + GEMM), 2x2 max pooling, x2 bilinear upsampling, and pointwise
//! activations. Feature maps are `[channels, rows, cols]` in f64.
//!
//! Every op comes as a pure `forward` plus an explicit `backward` that
//! consumes the forward inputs/outputs the caller kept around. Nothing here
//! allocates per-thread state; determinism follows from fixed loop order.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Soft cap on the size of one im2col strip buffer.
const STRIP_BYTES: usize = 8 << 20;

/// A 2D convolution layer (kernel 1x1, or 3x3 with zero padding 1), weights
/// stored GEMM-ready as `[c_out, c_in * k * k]`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Conv2d {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

/// Gradient buffer with the same shapes as a [`Conv2d`].
#[derive(Debug, Clone)]
pub(crate) struct ConvGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    /// He-normal weight init (std = sqrt(2 / fan_in)), zero bias.
    pub fn init_he(c_in: usize, c_out: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1x1 and 3x3 kernels are used");
        let fan_in = (c_in * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let weight =
            Array2::from_shape_fn((c_out, c_in * kernel * kernel), |_| normal.sample(rng));
        Self { weight, bias: Array1::zeros(c_out), c_in, c_out, kernel }
    }

    pub fn grad_buffer(&self) -> ConvGrad {
        ConvGrad { weight: Array2::zeros(self.weight.dim()), bias: Array1::zeros(self.bias.len()) }
    }

    fn rows_per_strip(&self, w: usize) -> usize {
        (STRIP_BYTES / (self.c_in * 9 * w * 8)).max(1)
    }

    /// y = conv(x) + bias. Spatial shape is preserved (3x3 uses zero pad 1).
    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (c_in, h, w) = x.dim();
        assert_eq!(c_in, self.c_in, "input channels");
        let mut y = Array3::zeros((self.c_out, h, w));
        if self.kernel == 1 {
            let x2 = x.view().into_shape_with_order((c_in, h * w)).expect("contiguous");
            let mut y2 = self.weight.dot(&x2);
            y2 += &self.bias.view().insert_axis(Axis(1));
            y.assign(&y2.into_shape_with_order((self.c_out, h, w)).expect("same size"));
            return y;
        }
        let strip = self.rows_per_strip(w);
        let mut r0 = 0;
        while r0 < h {
            let rows = strip.min(h - r0);
            let xc = im2col3(x, r0, rows);
            let mut y2 = self.weight.dot(&xc); // [c_out, rows*w]
            y2 += &self.bias.view().insert_axis(Axis(1));
            let src = y2.into_shape_with_order((self.c_out, rows, w)).expect("same size");
            y.slice_mut(ndarray::s![.., r0..r0 + rows, ..]).assign(&src);
            r0 += rows;
        }
        y
    }

    /// Given the forward input and the output gradient, accumulate parameter
    /// gradients into `grad` and return the input gradient.
    pub fn backward(
        &self,
        x: &Array3<f64>,
        grad_y: &Array3<f64>,
        grad: &mut ConvGrad,
    ) -> Array3<f64> {
        let (c_in, h, w) = x.dim();
        let (c_out, gh, gw) = grad_y.dim();
        assert_eq!((c_in, c_out), (self.c_in, self.c_out));
        assert_eq!((gh, gw), (h, w), "conv preserves spatial shape");
        if self.kernel == 1 {
            let x2 = x.view().into_shape_with_order((c_in, h * w)).expect("contiguous");
            let g2 = grad_y.view().into_shape_with_order((c_out, h * w)).expect("contiguous");
            grad.weight += &g2.dot(&x2.t());
            grad.bias += &g2.sum_axis(Axis(1));
            let gx2 = self.weight.t().dot(&g2);
            return gx2.into_shape_with_order((c_in, h, w)).expect("same size");
        }
        let mut gx = Array3::zeros((c_in, h, w));
        let strip = self.rows_per_strip(w);
        let mut r0 = 0;
        while r0 < h {
            let rows = strip.min(h - r0);
            // im2col is recomputed per strip instead of cached from the
            // forward pass; this trades a little compute for bounded memory.
            let xc = im2col3(x, r0, rows);
            let g2 = grad_y
                .slice(ndarray::s![.., r0..r0 + rows, ..])
                .to_owned()
                .into_shape_with_order((c_out, rows * w))
                .expect("same size");
            grad.weight += &g2.dot(&xc.t());
            grad.bias += &g2.sum_axis(Axis(1));
            let gcols = self.weight.t().dot(&g2); // [c_in*9, rows*w]
            col2im3_add(&gcols, r0, rows, &mut gx);
            r0 += rows;
        }
        gx
    }
}

/// im2col for 3x3/pad-1 over output rows [r0, r0+rows): returns
/// `[c_in*9, rows*w]` where column `(r-r0)*w + c` holds the 3x3 patch centered
/// at (r, c), zero-padded at the borders.
fn im2col3(x: &Array3<f64>, r0: usize, rows: usize) -> Array2<f64> {
    let (c_in, h, w) = x.dim();
    let mut out = Array2::zeros((c_in * 9, rows * w));
    for ch in 0..c_in {
        for kr in 0..3 {
            for kc in 0..3 {
                let dst_row = ch * 9 + kr * 3 + kc;
                // output col c samples input col c + kc - 1
                let (c_lo, c_hi) = (1usize.saturating_sub(kc), (w + 1 - kc).min(w));
                if c_lo >= c_hi {
                    continue;
                }
                for r in r0..r0 + rows {
                    let in_r = r as isize + kr as isize - 1;
                    if in_r < 0 || in_r >= h as isize {
                        continue;
                    }
                    let src = x.slice(ndarray::s![
                        ch,
                        in_r as usize,
                        (c_lo + kc - 1)..(c_hi + kc - 1)
                    ]);
                    let base = (r - r0) * w;
                    let mut dst =
                        out.slice_mut(ndarray::s![dst_row, base + c_lo..base + c_hi]);
                    dst.assign(&src);
                }
            }
        }
    }
    out
}

/// Transpose of [`im2col3`]: scatter-add patch-gradient columns back onto the
/// input gradient.
fn col2im3_add(cols: &Array2<f64>, r0: usize, rows: usize, gx: &mut Array3<f64>) {
    let (c_in, h, w) = gx.dim();
    debug_assert_eq!(cols.dim(), (c_in * 9, rows * w));
    for ch in 0..c_in {
        for kr in 0..3 {
            for kc in 0..3 {
                let src_row = ch * 9 + kr * 3 + kc;
                let (c_lo, c_hi) = (1usize.saturating_sub(kc), (w + 1 - kc).min(w));
                if c_lo >= c_hi {
                    continue;
                }
                for r in r0..r0 + rows {
                    let in_r = r as isize + kr as isize - 1;
                    if in_r < 0 || in_r >= h as isize {
                        continue;
                    }
                    let base = (r - r0) * w;
                    let src = cols.slice(ndarray::s![src_row, base + c_lo..base + c_hi]);
                    let mut dst = gx.slice_mut(ndarray::s![
                        ch,
                        in_r as usize,
                        (c_lo + kc - 1)..(c_hi + kc - 1)
                    ]);
                    dst += &src;
                }
            }
        }
    }
}

/// 2x2 max pooling with stride 2 (spatial dims must be even). Returns the
/// pooled map and, per output cell, the index 0..4 of the winning corner
/// (row-major; ties keep the first), which the backward pass routes through.
pub(crate) fn maxpool2_forward(x: &Array3<f64>) -> (Array3<f64>, Array3<u8>) {
    let (c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even spatial dims, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array3::zeros((c, oh, ow));
    let mut arg = Array3::zeros((c, oh, ow));
    for ch in 0..c {
        for r in 0..oh {
            for col in 0..ow {
                let mut best = x[[ch, 2 * r, 2 * col]];
                let mut best_k = 0u8;
                for k in 1..4u8 {
                    let v = x[[ch, 2 * r + (k / 2) as usize, 2 * col + (k % 2) as usize]];
                    if v > best {
                        best = v;
                        best_k = k;
                    }
                }
                y[[ch, r, col]] = best;
                arg[[ch, r, col]] = best_k;
            }
        }
    }
    (y, arg)
}

pub(crate) fn maxpool2_backward(grad_y: &Array3<f64>, argmax: &Array3<u8>) -> Array3<f64> {
    let (c, oh, ow) = grad_y.dim();
    debug_assert_eq!(argmax.dim(), (c, oh, ow));
    let mut gx = Array3::zeros((c, oh * 2, ow * 2));
    for ch in 0..c {
        for r in 0..oh {
            for col in 0..ow {
                let k = argmax[[ch, r, col]] as usize;
                gx[[ch, 2 * r + k / 2, 2 * col + k % 2]] += grad_y[[ch, r, col]];
            }
        }
    }
    gx
}

/// Interpolation taps for one upsampled axis of length 2n: output index i
/// samples source coordinate (i + 0.5)/2 - 0.5, clamped to the valid range.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|i| {
            let src = (i as f64 + 0.5) / 2.0 - 0.5;
            let clamped = src.clamp(0.0, (n - 1) as f64);
            let i0 = clamped.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, clamped - i0 as f64)
        })
        .collect()
}

/// Bilinear x2 upsampling (half-pixel centers, borders clamped).
pub(crate) fn upsample2_forward(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let rtaps = upsample_taps(h);
    let ctaps = upsample_taps(w);
    let mut y = Array3::zeros((c, 2 * h, 2 * w));
    for ch in 0..c {
        for (r, &(r0, r1, fr)) in rtaps.iter().enumerate() {
            for (col, &(c0, c1, fc)) in ctaps.iter().enumerate() {
                let top = x[[ch, r0, c0]] * (1.0 - fc) + x[[ch, r0, c1]] * fc;
                let bot = x[[ch, r1, c0]] * (1.0 - fc) + x[[ch, r1, c1]] * fc;
                y[[ch, r, col]] = top * (1.0 - fr) + bot * fr;
            }
        }
    }
    y
}

pub(crate) fn upsample2_backward(grad_y: &Array3<f64>) -> Array3<f64> {
    let (c, h2, w2) = grad_y.dim();
    debug_assert!(h2 % 2 == 0 && w2 % 2 == 0);
    let (h, w) = (h2 / 2, w2 / 2);
    let rtaps = upsample_taps(h);
    let ctaps = upsample_taps(w);
    let mut gx = Array3::zeros((c, h, w));
    for ch in 0..c {
        for (r, &(r0, r1, fr)) in rtaps.iter().enumerate() {
            for (col, &(c0, c1, fc)) in ctaps.iter().enumerate() {
                let g = grad_y[[ch, r, col]];
                gx[[ch, r0, c0]] += g * (1.0 - fr) * (1.0 - fc);
                gx[[ch, r0, c1]] += g * (1.0 - fr) * fc;
                gx[[ch, r1, c0]] += g * fr * (1.0 - fc);
                gx[[ch, r1, c1]] += g * fr * fc;
            }
        }
    }
    gx
}

pub(crate) fn relu<D: ndarray::Dimension>(
    x: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient gate using the forward OUTPUT (y > 0 iff x > 0).
pub(crate) fn relu_backward<D: ndarray::Dimension>(
    grad_y: &ndarray::Array<f64, D>,
    y: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut gx = grad_y.clone();
    gx.zip_mut_with(y, |g, &v| {
        if v <= 0.0 {
            *g = 0.0;
        }
    });
    gx
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn sigmoid<D: ndarray::Dimension>(
    x: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    x.mapv(sigmoid_scalar)
}

/// d/dx sigmoid given the forward OUTPUT y: y * (1 - y) * grad_y.
pub(crate) fn sigmoid_backward<D: ndarray::Dimension>(
    grad_y: &ndarray::Array<f64, D>,
    y: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut gx = grad_y.clone();
    gx.zip_mut_with(y, |g, &v| *g *= v * (1.0 - v));
    gx
}
