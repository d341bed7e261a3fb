//! The shared-weight CNN branch and the descriptor matching head.
//!
//! One branch turns a grayscale image into (a) a full-resolution landmark
//! probability map and (b) a two-level feature pyramid taken from the last
//! two downsampling blocks (strides 8 and 16 for the default widths), from
//! which per-landmark descriptors are sampled bilinearly and L2-normalized.
//! The matching head is a single fully connected layer scoring a descriptor
//! pair via the elementwise absolute difference |f1 - f2|; the difference
//! form keeps the score genuinely pairwise, so mutual-best filtering can
//! accept many matches per image, and makes the head symmetric in the two
//! images. Every operation has an explicit backward pass; parameters exist
//! in exactly one copy, so branch weight sharing is structural.

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image_io::GrayImage;
use crate::nn::{
    maxpool2_backward, maxpool2_forward, relu, relu_backward, sigmoid, sigmoid_backward,
    upsample2_backward, upsample2_forward, Conv2d, ConvGrad,
};

/// Architecture hyperparameters. The default mirrors a quarter-width U-Net.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel widths of the encoder blocks, shallow to deep. Each width
    /// must be exactly double the previous one.
    pub encoder_filters: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { encoder_filters: vec![16, 32, 64, 128, 256] }
    }
}

impl ModelConfig {
    /// A reduced configuration small enough for finite-difference testing.
    pub fn tiny() -> Self {
        Self { encoder_filters: vec![2, 4, 8, 16, 32] }
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.encoder_filters;
        if f.len() < 2 {
            return Err(Error::invalid("need at least two encoder blocks"));
        }
        if f[0] == 0 {
            return Err(Error::invalid("encoder widths must be positive"));
        }
        for i in 1..f.len() {
            if f[i] != 2 * f[i - 1] {
                return Err(Error::invalid(format!(
                    "encoder widths must double at each block, got {:?}",
                    f
                )));
            }
        }
        Ok(())
    }

    /// Width of a sampled descriptor: the summed channel counts of the last
    /// two downsampling blocks.
    pub fn descriptor_dim(&self) -> usize {
        let n = self.encoder_filters.len();
        self.encoder_filters[n - 2] + self.encoder_filters[n - 1]
    }

    /// Downsampling factor from input to the deepest block.
    pub fn total_stride(&self) -> usize {
        1 << (self.encoder_filters.len() - 1)
    }

    /// Strides of the two pyramid levels (mid, deep).
    pub fn pyramid_strides(&self) -> (usize, usize) {
        (self.total_stride() / 2, self.total_stride())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct EncBlock {
    a: Conv2d,
    b: Conv2d,
}

#[derive(Debug, Clone, PartialEq)]
struct DecBlock {
    /// 3x3 conv halving channels right after upsampling.
    up: Conv2d,
    a: Conv2d,
    b: Conv2d,
}

/// All learnable weights: encoder/decoder convolutions, the 1x1 probability
/// head, and the descriptor matching head. One copy serves both branches.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    enc: Vec<EncBlock>,
    dec: Vec<DecBlock>,
    prob: Conv2d,
    head_w: Array1<f64>,
    head_b: f64,
}

/// Gradient accumulator shaped like [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ModelGrads {
    enc: Vec<(ConvGrad, ConvGrad)>,
    dec: Vec<(ConvGrad, ConvGrad, ConvGrad)>,
    prob: ConvGrad,
    head_w: Array1<f64>,
    head_b: f64,
}

/// Landmark probability map in [0,1], same shape as the input image.
pub type LandmarkProbMap = Array2<f64>;

/// Raw feature maps of the last two downsampling blocks, cropped to the
/// image's own grid (ceil(shape/stride)).
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub mid: Array3<f64>,
    pub deep: Array3<f64>,
    pub stride_mid: usize,
    pub stride_deep: usize,
    pub image_shape: (usize, usize),
}

/// Output of one branch evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutput {
    pub prob: LandmarkProbMap,
    pub pyramid: FeaturePyramid,
}

/// Per-landmark descriptors, row i aligned with input point i. Rows are
/// L2-normalized (an all-zero feature vector stays zero).
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    pub vectors: Array2<f64>,
}

impl DescriptorSet {
    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

impl ModelParams {
    /// Fan-in-scaled random initialization (zero biases). Deterministic for
    /// a given seeded rng.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let f = &config.encoder_filters;
        let n = f.len();
        let mut enc = Vec::with_capacity(n);
        for i in 0..n {
            let c_in = if i == 0 { 1 } else { f[i - 1] };
            enc.push(EncBlock {
                a: Conv2d::init_he(c_in, f[i], 3, rng),
                b: Conv2d::init_he(f[i], f[i], 3, rng),
            });
        }
        // dec[j] mirrors enc[j]; applied deep-to-shallow
        let mut dec = Vec::with_capacity(n - 1);
        for j in 0..n - 1 {
            dec.push(DecBlock {
                up: Conv2d::init_he(f[j + 1], f[j], 3, rng),
                a: Conv2d::init_he(2 * f[j], f[j], 3, rng),
                b: Conv2d::init_he(f[j], f[j], 3, rng),
            });
        }
        let prob = Conv2d::init_he(f[0], 1, 1, rng);
        let dim = config.descriptor_dim();
        let std = (2.0 / dim as f64).sqrt();
        let normal = rand_distr::Normal::new(0.0, std).expect("finite std");
        let head_w = Array1::from_shape_fn(dim, |_| rand_distr::Distribution::sample(&normal, rng));
        Ok(Self { config, enc, dec, prob, head_w, head_b: 0.0 })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn grad_buffer(&self) -> ModelGrads {
        ModelGrads {
            enc: self.enc.iter().map(|b| (b.a.grad_buffer(), b.b.grad_buffer())).collect(),
            dec: self
                .dec
                .iter()
                .map(|b| (b.up.grad_buffer(), b.a.grad_buffer(), b.b.grad_buffer()))
                .collect(),
            prob: self.prob.grad_buffer(),
            head_w: Array1::zeros(self.head_w.len()),
            head_b: 0.0,
        }
    }

    /// Visit every parameter tensor in a fixed order as (name, values).
    pub fn visit(&self, f: &mut impl FnMut(&str, &[f64])) {
        for (i, b) in self.enc.iter().enumerate() {
            f(&format!("enc{i}.a.weight"), b.a.weight.as_slice().unwrap());
            f(&format!("enc{i}.a.bias"), b.a.bias.as_slice().unwrap());
            f(&format!("enc{i}.b.weight"), b.b.weight.as_slice().unwrap());
            f(&format!("enc{i}.b.bias"), b.b.bias.as_slice().unwrap());
        }
        for (j, d) in self.dec.iter().enumerate() {
            f(&format!("dec{j}.up.weight"), d.up.weight.as_slice().unwrap());
            f(&format!("dec{j}.up.bias"), d.up.bias.as_slice().unwrap());
            f(&format!("dec{j}.a.weight"), d.a.weight.as_slice().unwrap());
            f(&format!("dec{j}.a.bias"), d.a.bias.as_slice().unwrap());
            f(&format!("dec{j}.b.weight"), d.b.weight.as_slice().unwrap());
            f(&format!("dec{j}.b.bias"), d.b.bias.as_slice().unwrap());
        }
        f("prob.weight", self.prob.weight.as_slice().unwrap());
        f("prob.bias", self.prob.bias.as_slice().unwrap());
        f("head.weight", self.head_w.as_slice().unwrap());
        f("head.bias", std::slice::from_ref(&self.head_b));
    }

    /// Mutable counterpart of [`visit`](Self::visit); identical order.
    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut [f64])) {
        for (i, b) in self.enc.iter_mut().enumerate() {
            f(&format!("enc{i}.a.weight"), b.a.weight.as_slice_mut().unwrap());
            f(&format!("enc{i}.a.bias"), b.a.bias.as_slice_mut().unwrap());
            f(&format!("enc{i}.b.weight"), b.b.weight.as_slice_mut().unwrap());
            f(&format!("enc{i}.b.bias"), b.b.bias.as_slice_mut().unwrap());
        }
        for (j, d) in self.dec.iter_mut().enumerate() {
            f(&format!("dec{j}.up.weight"), d.up.weight.as_slice_mut().unwrap());
            f(&format!("dec{j}.up.bias"), d.up.bias.as_slice_mut().unwrap());
            f(&format!("dec{j}.a.weight"), d.a.weight.as_slice_mut().unwrap());
            f(&format!("dec{j}.a.bias"), d.a.bias.as_slice_mut().unwrap());
            f(&format!("dec{j}.b.weight"), d.b.weight.as_slice_mut().unwrap());
            f(&format!("dec{j}.b.bias"), d.b.bias.as_slice_mut().unwrap());
        }
        f("prob.weight", self.prob.weight.as_slice_mut().unwrap());
        f("prob.bias", self.prob.bias.as_slice_mut().unwrap());
        f("head.weight", self.head_w.as_slice_mut().unwrap());
        f("head.bias", std::slice::from_mut(&mut self.head_b));
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, v| n += v.len());
        n
    }

    /// All parameters as one flat vector, in visitation order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(&mut |_, v| out.extend_from_slice(v));
        out
    }

    /// Overwrite all parameters from a flat vector in visitation order.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "flat parameter vector has {} values, model needs {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        self.visit_mut(&mut |_, v| {
            v.copy_from_slice(&flat[offset..offset + v.len()]);
            offset += v.len();
        });
        Ok(())
    }
}

impl ModelGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (a, b) in &self.enc {
            for g in [a, b] {
                out.extend_from_slice(g.weight.as_slice().unwrap());
                out.extend_from_slice(g.bias.as_slice().unwrap());
            }
        }
        for (up, a, b) in &self.dec {
            for g in [up, a, b] {
                out.extend_from_slice(g.weight.as_slice().unwrap());
                out.extend_from_slice(g.bias.as_slice().unwrap());
            }
        }
        out.extend_from_slice(self.prob.weight.as_slice().unwrap());
        out.extend_from_slice(self.prob.bias.as_slice().unwrap());
        out.extend_from_slice(self.head_w.as_slice().unwrap());
        out.push(self.head_b);
        out
    }

    /// Elementwise accumulate (for summing per-item gradients in a fixed
    /// order).
    pub fn accumulate(&mut self, other: &ModelGrads) {
        for ((a, b), (oa, ob)) in self.enc.iter_mut().zip(&other.enc) {
            a.weight += &oa.weight;
            a.bias += &oa.bias;
            b.weight += &ob.weight;
            b.bias += &ob.bias;
        }
        for ((u, a, b), (ou, oa, ob)) in self.dec.iter_mut().zip(&other.dec) {
            u.weight += &ou.weight;
            u.bias += &ou.bias;
            a.weight += &oa.weight;
            a.bias += &oa.bias;
            b.weight += &ob.weight;
            b.bias += &ob.bias;
        }
        self.prob.weight += &other.prob.weight;
        self.prob.bias += &other.prob.bias;
        self.head_w += &other.head_w;
        self.head_b += other.head_b;
    }

    pub fn scale(&mut self, s: f64) {
        for (a, b) in self.enc.iter_mut() {
            a.weight *= s;
            a.bias *= s;
            b.weight *= s;
            b.bias *= s;
        }
        for (u, a, b) in self.dec.iter_mut() {
            u.weight *= s;
            u.bias *= s;
            a.weight *= s;
            a.bias *= s;
            b.weight *= s;
            b.bias *= s;
        }
        self.prob.weight *= s;
        self.prob.bias *= s;
        self.head_w *= s;
        self.head_b *= s;
    }
}

/// Everything the backward pass needs from one branch evaluation.
pub struct BranchCache {
    /// normalized, zero-padded input [1, H', W']
    x0: Array3<f64>,
    /// per encoder block: post-relu conv_a and conv_b outputs
    enc_a: Vec<Array3<f64>>,
    enc_b: Vec<Array3<f64>>,
    /// pooled outputs (inputs to the next encoder block) and argmax codes
    pooled: Vec<Array3<f64>>,
    pool_arg: Vec<Array3<u8>>,
    /// per decoder block (indexed like dec[], i.e. shallow-first): upsampled
    /// input, post-relu up-conv output, post-relu conv_a / conv_b outputs
    dec_up: Vec<Array3<f64>>,
    dec_u: Vec<Array3<f64>>,
    dec_a: Vec<Array3<f64>>,
    dec_b: Vec<Array3<f64>>,
    /// sigmoid output at padded resolution
    prob_padded: Array2<f64>,
    orig_shape: (usize, usize),
}

fn normalize_and_pad(img: &GrayImage, multiple: usize) -> Result<Array3<f64>> {
    let (h, w) = img.shape();
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in img.pixels().iter() {
        if !v.is_finite() {
            return Err(Error::invalid("input image contains non-finite values"));
        }
        min = min.min(v);
        max = max.max(v);
    }
    let scale = if max > min { 1.0 / (max - min) } else { 0.0 };
    let hp = h.div_ceil(multiple) * multiple;
    let wp = w.div_ceil(multiple) * multiple;
    let mut x = Array3::zeros((1, hp, wp));
    for ((r, c), &v) in img.pixels().indexed_iter() {
        x[[0, r, c]] = (v - min) * scale;
    }
    Ok(x)
}

impl ModelParams {
    /// Evaluate one branch: probability map plus feature pyramid, both
    /// cropped to the image's own grid. Memory-lean (no backward caches).
    pub fn forward_branch(&self, img: &GrayImage) -> Result<BranchOutput> {
        let (out, _) = self.forward_branch_impl(img, false)?;
        Ok(out)
    }

    /// Branch evaluation that also returns the caches `backward_branch`
    /// consumes.
    pub fn forward_branch_cached(&self, img: &GrayImage) -> Result<(BranchOutput, BranchCache)> {
        let (out, cache) = self.forward_branch_impl(img, true)?;
        Ok((out, cache.expect("cache requested")))
    }

    fn forward_branch_impl(
        &self,
        img: &GrayImage,
        keep: bool,
    ) -> Result<(BranchOutput, Option<BranchCache>)> {
        let n = self.enc.len();
        let x0 = normalize_and_pad(img, self.config.total_stride())?;
        let orig = img.shape();

        let mut enc_a: Vec<Array3<f64>> = Vec::with_capacity(n);
        let mut enc_b: Vec<Array3<f64>> = Vec::with_capacity(n);
        let mut pooled: Vec<Array3<f64>> = Vec::with_capacity(n - 1);
        let mut pool_arg: Vec<Array3<u8>> = Vec::with_capacity(n - 1);

        let mut cur = x0.clone();
        for i in 0..n {
            let a = relu(&self.enc[i].a.forward(&cur));
            let b = relu(&self.enc[i].b.forward(&a));
            if keep {
                enc_a.push(a);
            }
            if i < n - 1 {
                let (p, arg) = maxpool2_forward(&b);
                cur = p;
                if keep {
                    pooled.push(cur.clone());
                    pool_arg.push(arg);
                }
            }
            enc_b.push(b); // skips + pyramid, needed in both modes
        }

        let mut dec_up = Vec::with_capacity(n - 1);
        let mut dec_u = Vec::with_capacity(n - 1);
        let mut dec_a = Vec::with_capacity(n - 1);
        let mut dec_b = Vec::with_capacity(n - 1);
        let mut cur = enc_b[n - 1].clone();
        for j in (0..n - 1).rev() {
            let up = upsample2_forward(&cur);
            let u = relu(&self.dec[j].up.forward(&up));
            if keep {
                dec_up.push(up);
            }
            let cat = ndarray::concatenate(Axis(0), &[u.view(), enc_b[j].view()])
                .expect("matching spatial dims");
            let a = relu(&self.dec[j].a.forward(&cat));
            let b = relu(&self.dec[j].b.forward(&a));
            if keep {
                dec_u.push(u);
                dec_a.push(a);
                dec_b.push(b.clone());
            }
            cur = b;
        }
        // the dec caches were pushed deep-to-shallow; store shallow-first
        dec_up.reverse();
        dec_u.reverse();
        dec_a.reverse();
        dec_b.reverse();

        let logits = self.prob.forward(&cur);
        let prob_padded = sigmoid(&logits.index_axis_move(Axis(0), 0));

        let prob =
            prob_padded.slice(ndarray::s![..orig.0, ..orig.1]).to_owned();
        let (s_mid, s_deep) = self.config.pyramid_strides();
        let mid = enc_b[n - 2]
            .slice(ndarray::s![.., ..orig.0.div_ceil(s_mid), ..orig.1.div_ceil(s_mid)])
            .to_owned();
        let deep = enc_b[n - 1]
            .slice(ndarray::s![.., ..orig.0.div_ceil(s_deep), ..orig.1.div_ceil(s_deep)])
            .to_owned();
        let out = BranchOutput {
            prob,
            pyramid: FeaturePyramid {
                mid,
                deep,
                stride_mid: s_mid,
                stride_deep: s_deep,
                image_shape: orig,
            },
        };
        let cache = keep.then(|| BranchCache {
            x0,
            enc_a,
            enc_b,
            pooled,
            pool_arg,
            dec_up,
            dec_u,
            dec_a,
            dec_b,
            prob_padded,
            orig_shape: orig,
        });
        Ok((out, cache))
    }

    /// Accumulate parameter gradients for one branch given gradients on the
    /// cropped probability map and pyramid levels.
    pub fn backward_branch(
        &self,
        cache: &BranchCache,
        grad_prob: &Array2<f64>,
        grad_mid: &Array3<f64>,
        grad_deep: &Array3<f64>,
        grads: &mut ModelGrads,
    ) {
        let n = self.enc.len();
        let (hp, wp) = (cache.x0.dim().1, cache.x0.dim().2);
        let orig = cache.orig_shape;
        debug_assert_eq!(grad_prob.dim(), orig);

        // probability head: embed cropped grad into padded shape
        let mut gp = Array2::zeros((hp, wp));
        gp.slice_mut(ndarray::s![..orig.0, ..orig.1]).assign(grad_prob);
        let g_logits = sigmoid_backward(&gp, &cache.prob_padded).insert_axis(Axis(0));
        let final_b = &cache.dec_b[0];
        let mut g_cur = self.prob.backward(final_b, &g_logits, &mut grads.prob);

        // per-encoder-block gradients on the post-relu b outputs (skips,
        // pyramid levels, pool inputs); filled in as the decoder unwinds
        let mut g_enc_b: Vec<Array3<f64>> =
            cache.enc_b.iter().map(|b| Array3::zeros(b.dim())).collect();
        {
            let (s_mid, s_deep) = self.config.pyramid_strides();
            let (mh, mw) = (orig.0.div_ceil(s_mid), orig.1.div_ceil(s_mid));
            let (dh, dw) = (orig.0.div_ceil(s_deep), orig.1.div_ceil(s_deep));
            g_enc_b[n - 2]
                .slice_mut(ndarray::s![.., ..mh, ..mw])
                .assign(grad_mid);
            g_enc_b[n - 1]
                .slice_mut(ndarray::s![.., ..dh, ..dw])
                .assign(grad_deep);
        }

        // decoder, shallow-to-deep (reverse of forward application order)
        for j in 0..n - 1 {
            let f_j = self.config.encoder_filters[j];
            let (g_up_conv, g_a_conv, g_b_conv) = {
                let d = &mut grads.dec[j];
                (&mut d.0, &mut d.1, &mut d.2)
            };
            let g_b_pre = relu_backward(&g_cur, &cache.dec_b[j]);
            let g_a = self.dec[j].b.backward(&cache.dec_a[j], &g_b_pre, g_b_conv);
            let g_a_pre = relu_backward(&g_a, &cache.dec_a[j]);
            let cat = ndarray::concatenate(
                Axis(0),
                &[cache.dec_u[j].view(), cache.enc_b[j].view()],
            )
            .expect("matching spatial dims");
            let g_cat = self.dec[j].a.backward(&cat, &g_a_pre, g_a_conv);
            let g_u = g_cat.slice(ndarray::s![..f_j, .., ..]).to_owned();
            {
                let g_skip = g_cat.slice(ndarray::s![f_j.., .., ..]);
                g_enc_b[j] += &g_skip;
            }
            let g_u_pre = relu_backward(&g_u, &cache.dec_u[j]);
            let g_up = self.dec[j].up.backward(&cache.dec_up[j], &g_u_pre, g_up_conv);
            g_cur = upsample2_backward(&g_up);
        }
        // decoder input was enc_b[n-1]
        g_enc_b[n - 1] += &g_cur;

        // encoder, deep-to-shallow
        let mut carry: Option<Array3<f64>> = None; // gradient to pool output below
        for i in (0..n).rev() {
            let mut g_b = std::mem::replace(&mut g_enc_b[i], Array3::zeros((0, 0, 0)));
            if let Some(g_pool_out) = carry.take() {
                g_b += &g_pool_out;
            }
            let (g_a_conv, g_b_conv) = {
                let e = &mut grads.enc[i];
                (&mut e.0, &mut e.1)
            };
            let g_b_pre = relu_backward(&g_b, &cache.enc_b[i]);
            let g_a = self.enc[i].b.backward(&cache.enc_a[i], &g_b_pre, g_b_conv);
            let g_a_pre = relu_backward(&g_a, &cache.enc_a[i]);
            let a_in = if i == 0 { &cache.x0 } else { &cache.pooled[i - 1] };
            let g_in = self.enc[i].a.backward(a_in, &g_a_pre, g_a_conv);
            if i > 0 {
                carry = Some(maxpool2_backward(&g_in, &cache.pool_arg[i - 1]));
            }
        }
    }
}

/// Bilinearly sample and L2-normalize descriptors at full-resolution points.
/// Points must lie inside the image; pyramid-grid coordinates are clamped at
/// the grid border.
pub fn sample_descriptors(pyr: &FeaturePyramid, points: &[(f64, f64)]) -> Result<DescriptorSet> {
    let (h, w) = pyr.image_shape;
    for &(r, c) in points {
        if !(r.is_finite() && c.is_finite())
            || r < 0.0
            || c < 0.0
            || r > (h - 1) as f64
            || c > (w - 1) as f64
        {
            return Err(Error::invalid(format!(
                "point ({r}, {c}) outside image bounds {h}x{w}"
            )));
        }
    }
    let c_mid = pyr.mid.dim().0;
    let dim = c_mid + pyr.deep.dim().0;
    let mut vectors = Array2::zeros((points.len(), dim));
    for (k, &pt) in points.iter().enumerate() {
        let mut row = vectors.row_mut(k);
        sample_level_into(&pyr.mid, pt, pyr.stride_mid, &mut row.as_slice_mut().unwrap()[..c_mid]);
        sample_level_into(
            &pyr.deep,
            pt,
            pyr.stride_deep,
            &mut row.as_slice_mut().unwrap()[c_mid..],
        );
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    Ok(DescriptorSet { vectors })
}

/// Gradients of [`sample_descriptors`] w.r.t. the pyramid levels, given the
/// gradient on the (normalized) descriptor rows.
pub fn sample_descriptors_backward(
    pyr: &FeaturePyramid,
    points: &[(f64, f64)],
    grad_desc: &Array2<f64>,
) -> (Array3<f64>, Array3<f64>) {
    let c_mid = pyr.mid.dim().0;
    let dim = c_mid + pyr.deep.dim().0;
    debug_assert_eq!(grad_desc.dim(), (points.len(), dim));
    let mut g_mid = Array3::zeros(pyr.mid.dim());
    let mut g_deep = Array3::zeros(pyr.deep.dim());
    let mut prenorm = vec![0.0; dim];
    for (k, &pt) in points.iter().enumerate() {
        sample_level_into(&pyr.mid, pt, pyr.stride_mid, &mut prenorm[..c_mid]);
        sample_level_into(&pyr.deep, pt, pyr.stride_deep, &mut prenorm[c_mid..]);
        let norm = prenorm.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 {
            continue; // descriptor was left at zero; treat as constant
        }
        let gd = grad_desc.row(k);
        // f = v/|v|  =>  dv = (df - f (f·df)) / |v|
        let f: Vec<f64> = prenorm.iter().map(|v| v / norm).collect();
        let fdot = f.iter().zip(gd.iter()).map(|(a, b)| a * b).sum::<f64>();
        let dv: Vec<f64> = f
            .iter()
            .zip(gd.iter())
            .map(|(fi, gi)| (gi - fi * fdot) / norm)
            .collect();
        scatter_level(&mut g_mid, pt, pyr.stride_mid, &dv[..c_mid]);
        scatter_level(&mut g_deep, pt, pyr.stride_deep, &dv[c_mid..]);
    }
    (g_mid, g_deep)
}

/// Bilinear taps of a full-resolution point on a strided grid.
fn level_taps(
    grid: (usize, usize),
    pt: (f64, f64),
    stride: usize,
) -> (usize, usize, usize, usize, f64, f64) {
    let (gh, gw) = grid;
    let gr = (pt.0 / stride as f64).clamp(0.0, (gh - 1) as f64);
    let gc = (pt.1 / stride as f64).clamp(0.0, (gw - 1) as f64);
    let r0 = gr.floor() as usize;
    let c0 = gc.floor() as usize;
    let r1 = (r0 + 1).min(gh - 1);
    let c1 = (c0 + 1).min(gw - 1);
    (r0, r1, c0, c1, gr - r0 as f64, gc - c0 as f64)
}

fn sample_level_into(level: &Array3<f64>, pt: (f64, f64), stride: usize, out: &mut [f64]) {
    let (_, gh, gw) = level.dim();
    let (r0, r1, c0, c1, fr, fc) = level_taps((gh, gw), pt, stride);
    let w00 = (1.0 - fr) * (1.0 - fc);
    let w01 = (1.0 - fr) * fc;
    let w10 = fr * (1.0 - fc);
    let w11 = fr * fc;
    for (ch, slot) in out.iter_mut().enumerate() {
        *slot = level[[ch, r0, c0]] * w00
            + level[[ch, r0, c1]] * w01
            + level[[ch, r1, c0]] * w10
            + level[[ch, r1, c1]] * w11;
    }
}

fn scatter_level(grad: &mut Array3<f64>, pt: (f64, f64), stride: usize, dv: &[f64]) {
    let (_, gh, gw) = grad.dim();
    let (r0, r1, c0, c1, fr, fc) = level_taps((gh, gw), pt, stride);
    let w00 = (1.0 - fr) * (1.0 - fc);
    let w01 = (1.0 - fr) * fc;
    let w10 = fr * (1.0 - fc);
    let w11 = fr * fc;
    for (ch, &g) in dv.iter().enumerate() {
        grad[[ch, r0, c0]] += g * w00;
        grad[[ch, r0, c1]] += g * w01;
        grad[[ch, r1, c0]] += g * w10;
        grad[[ch, r1, c1]] += g * w11;
    }
}

impl ModelParams {
    /// Matching probability for one descriptor pair:
    /// sigmoid(w · |f1 - f2| + b).
    pub fn match_head(&self, f1: ArrayView1<f64>, f2: ArrayView1<f64>) -> Result<f64> {
        let dim = self.head_w.len();
        if f1.len() != dim || f2.len() != dim {
            return Err(Error::invalid(format!(
                "descriptor dims ({}, {}) do not match head width {dim}",
                f1.len(),
                f2.len()
            )));
        }
        let mut z = self.head_b;
        for d in 0..dim {
            z += self.head_w[d] * (f1[d] - f2[d]).abs();
        }
        Ok(crate::nn::sigmoid_scalar(z))
    }

    /// Matching probabilities for all descriptor pairs: entry (i, j) scores
    /// d1 row i against d2 row j.
    pub fn match_matrix(&self, d1: &DescriptorSet, d2: &DescriptorSet) -> Result<Array2<f64>> {
        let dim = self.head_w.len();
        if d1.dim() != dim || d2.dim() != dim {
            return Err(Error::invalid(format!(
                "descriptor dims ({}, {}) do not match head width {dim}",
                d1.dim(),
                d2.dim()
            )));
        }
        let (k1, k2) = (d1.len(), d2.len());
        let mut z = Array2::from_elem((k1, k2), self.head_b);
        // cache-blocked |f1-f2| accumulation; d2 transposed (into row-major
        // storage) so the inner sweeps run over contiguous memory
        let f2t = d2.vectors.t().as_standard_layout().into_owned(); // [dim, k2]
        const JB: usize = 1024;
        const IB: usize = 64;
        let mut j0 = 0;
        while j0 < k2 {
            let jn = (j0 + JB).min(k2);
            let mut i0 = 0;
            while i0 < k1 {
                let in_ = (i0 + IB).min(k1);
                for d in 0..dim {
                    let wd = self.head_w[d];
                    let f2row = f2t.row(d);
                    let f2s = &f2row.as_slice().unwrap()[j0..jn];
                    for i in i0..in_ {
                        let a = d1.vectors[[i, d]];
                        let mut zrow = z.row_mut(i);
                        let zs = &mut zrow.as_slice_mut().unwrap()[j0..jn];
                        for (zv, &b) in zs.iter_mut().zip(f2s) {
                            *zv += wd * (a - b).abs();
                        }
                    }
                }
                i0 = in_;
            }
            j0 = jn;
        }
        Ok(sigmoid(&z))
    }

    /// Backward of [`match_matrix`]: given d(loss)/d(c_hat), accumulate head
    /// gradients and return gradients on the two descriptor sets.
    pub fn match_matrix_backward(
        &self,
        d1: &DescriptorSet,
        d2: &DescriptorSet,
        c_hat: &Array2<f64>,
        grad_c: &Array2<f64>,
        grads: &mut ModelGrads,
    ) -> (Array2<f64>, Array2<f64>) {
        let dim = self.head_w.len();
        let (k1, k2) = c_hat.dim();
        debug_assert_eq!(grad_c.dim(), (k1, k2));
        let mut g_f1 = Array2::zeros((k1, dim));
        let mut g_f2 = Array2::zeros((k2, dim));
        for i in 0..k1 {
            for j in 0..k2 {
                let gc = grad_c[[i, j]];
                if gc == 0.0 {
                    continue;
                }
                let y = c_hat[[i, j]];
                let dz = gc * y * (1.0 - y);
                grads.head_b += dz;
                for d in 0..dim {
                    let diff = d1.vectors[[i, d]] - d2.vectors[[j, d]];
                    let s = if diff > 0.0 {
                        1.0
                    } else if diff < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    grads.head_w[d] += dz * diff.abs();
                    let g = dz * self.head_w[d] * s;
                    g_f1[[i, d]] += g;
                    g_f2[[j, d]] -= g;
                }
            }
        }
        (g_f1, g_f2)
    }
}

/// Squared Euclidean distance matrix between descriptor rows, computed via
/// one GEMM on unit-norm rows: d²(i,j) = 2 - 2·(f1·f2), clamped to [0, 4].
pub fn distance2_matrix(d1: &DescriptorSet, d2: &DescriptorSet) -> Array2<f64> {
    let mut m = d1.vectors.dot(&d2.vectors.t());
    m.mapv_inplace(|dot| (2.0 - 2.0 * dot).clamp(0.0, 4.0));
    m
}

/// Exact squared distance between two descriptor rows (no GEMM shortcut, so
/// identical rows report exactly zero).
pub fn distance2_exact(f1: ArrayView1<f64>, f2: ArrayView1<f64>) -> f64 {
    f1.iter().zip(f2.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

// ------------------------------------------------------------- checkpoints

const CHECKPOINT_MAGIC: &[u8; 4] = b"LMCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Serialize config + all named parameter arrays, integrity-protected by a
/// trailing SHA-256. The write is atomic (temp file + rename).
pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    let path = path.as_ref();
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config_json = serde_json::to_vec(params.config())?;
    buf.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&config_json);
    let mut entries: Vec<(String, Vec<f64>)> = Vec::new();
    params.visit(&mut |name, values| entries.push((name.to_string(), values.to_vec())));
    buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, values) in &entries {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&buf)?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Load a checkpoint, rebuilding the model from the embedded config and
/// rejecting integrity or layout mismatches.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 32 + 8 {
        return Err(Error::Checkpoint(format!("{} is too short", path.display())));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint(format!(
            "{}: integrity check failed (corrupt or tampered file)",
            path.display()
        )));
    }
    let mut r = ByteReader { buf: body, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let config_len = r.u64()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)?;
    config.validate()?;
    // deterministic skeleton; every array is overwritten below
    let mut params =
        ModelParams::init(config, &mut rand_chacha::ChaCha20Rng::seed_from_u64(0))
            .expect("validated config");
    let n_entries = r.u64()? as usize;
    let mut loaded: std::collections::HashMap<String, Vec<f64>> =
        std::collections::HashMap::with_capacity(n_entries);
    for _ in 0..n_entries {
        let name_len = r.u64()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF-8 entry name".into()))?;
        let count = r.u64()? as usize;
        let raw = r.take(count * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        loaded.insert(name, values);
    }
    let mut err: Option<Error> = None;
    params.visit_mut(&mut |name, slot| {
        if err.is_some() {
            return;
        }
        match loaded.get(name) {
            Some(values) if values.len() == slot.len() => slot.copy_from_slice(values),
            Some(values) => {
                err = Some(Error::Checkpoint(format!(
                    "entry {name} has {} values, model expects {}",
                    values.len(),
                    slot.len()
                )))
            }
            None => err = Some(Error::Checkpoint(format!("missing entry {name}"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    Ok(params)
}
