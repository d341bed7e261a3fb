//! Training loop and paired inference.
//!
//! Training synthesizes its own supervision: each step picks a reference
//! image, draws a random transformation, warps the reference into a target,
//! runs both through the shared-weight branch, and labels landmark
//! cross-pairs by exact projection through the known transform. Gradients
//! from the multi-task loss flow through the matching head, the descriptor
//! sampler, and both branch evaluations into one shared parameter set,
//! updated with Adam. Runs are deterministic for a given seed: every step
//! derives its own sub-seeds from one master stream, and gradients are
//! reduced in a fixed order.
//!
//! Inference forwards two images, keeps grid-sampled candidates whose
//! landmark probability clears a threshold, scores all cross-pairs, and
//! accepts only pairs that are mutual best under both the match probability
//! and the descriptor distance.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image_io::{compute_valid_mask, BinaryMask, GrayImage};
use crate::loss::{
    descriptor_matching_loss_with_grad, landmark_probability_loss_with_grad, total_loss,
    LossBreakdown,
};
use crate::network::{
    distance2_exact, distance2_matrix, sample_descriptors, sample_descriptors_backward,
    save_checkpoint, ModelConfig, ModelGrads, ModelParams,
};
use crate::sampling::{generate_ground_truth, grid_sample_all, grid_sample_landmarks, LandmarkSet};
use crate::transforms::{
    sample_transform, warp_image, warp_mask, Transform, TransformFamily, TransformRanges,
    TransformSpec,
};

/// Everything a training run depends on. Serializable so the effective
/// configuration can be echoed and archived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Landmarks sampled per image per step.
    pub k: usize,
    /// Grid cell side for landmark sampling.
    pub cell_px: usize,
    /// Ground-truth correspondence distance threshold.
    pub thresh_pixels: f64,
    pub m_pos: f64,
    pub m_neg: f64,
    /// Families mixed uniformly when drawing each step's transform.
    pub families: Vec<TransformFamily>,
    pub ranges: TransformRanges,
    /// Fraction of the dataset held out for validation loss reporting
    /// (at least one image whenever the dataset has two or more).
    pub validation_fraction: f64,
    pub mask: MaskOptions,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 50,
            batch_size: 4,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            k: 400,
            cell_px: 8,
            thresh_pixels: 2.0,
            m_pos: 0.1,
            m_neg: 1.0,
            families: TransformFamily::TRAINING_MIX.to_vec(),
            ranges: TransformRanges::default(),
            validation_fraction: 0.1,
            mask: MaskOptions::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.k == 0 || self.cell_px == 0 {
            return Err(Error::invalid(
                "batch_size, k, and cell_px must all be positive",
            ));
        }
        if !(self.learning_rate > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::invalid(
                "learning_rate must be positive and weight_decay non-negative",
            ));
        }
        if !(self.thresh_pixels > 0.0) {
            return Err(Error::invalid("thresh_pixels must be positive"));
        }
        if !(self.m_pos >= 0.0 && self.m_neg > self.m_pos) {
            return Err(Error::invalid("margins must satisfy 0 <= m_pos < m_neg"));
        }
        if self.families.is_empty() {
            return Err(Error::invalid("at least one transform family is required"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Valid-mask extraction settings (intensity threshold plus a minimum
/// connected-component size to drop speckle).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskOptions {
    pub intensity_thresh: f64,
    pub min_component_px: usize,
}

impl Default for MaskOptions {
    fn default() -> Self {
        Self { intensity_thresh: 1e-3, min_component_px: 16 }
    }
}

impl MaskOptions {
    pub fn compute(&self, img: &GrayImage) -> BinaryMask {
        compute_valid_mask(img, self.intensity_thresh, self.min_component_px)
    }
}

/// The step-level hyperparameters shared by training and the gradient
/// checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairLossSettings {
    pub k: usize,
    pub cell_px: usize,
    pub thresh_pixels: f64,
    pub m_pos: f64,
    pub m_neg: f64,
}

impl From<&TrainConfig> for PairLossSettings {
    fn from(c: &TrainConfig) -> Self {
        Self {
            k: c.k,
            cell_px: c.cell_px,
            thresh_pixels: c.thresh_pixels,
            m_pos: c.m_pos,
            m_neg: c.m_neg,
        }
    }
}

/// One fully materialized training example: a reference image, its warped
/// counterpart, both valid masks, and the exact transform linking them.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub reference: GrayImage,
    pub target: GrayImage,
    pub mask1: BinaryMask,
    pub mask2: BinaryMask,
    pub transform: Transform,
}

/// Warp `img` with `t` into a training pair. The target's valid mask is the
/// reference mask carried through the same geometry, so both masks describe
/// the same content.
pub fn synthesize_pair(img: &GrayImage, t: &Transform, mask: &MaskOptions) -> Result<PairSample> {
    let mask1 = mask.compute(img);
    let mask2 = warp_mask(&mask1, t)?;
    let target = warp_image(img, t)?;
    Ok(PairSample {
        reference: img.clone(),
        target,
        mask1,
        mask2,
        transform: t.clone(),
    })
}

/// Loss of one training pair (no gradients); the cheap path for finite
/// differences and validation.
pub fn pair_loss(
    params: &ModelParams,
    sample: &PairSample,
    settings: &PairLossSettings,
) -> Result<LossBreakdown> {
    let out1 = params.forward_branch(&sample.reference)?;
    let out2 = params.forward_branch(&sample.target)?;
    let lm1 = grid_sample_landmarks(&out1.prob, &sample.mask1, settings.cell_px, settings.k)?;
    let lm2 = grid_sample_landmarks(&out2.prob, &sample.mask2, settings.cell_px, settings.k)?;
    let d1 = sample_descriptors(&out1.pyramid, &lm1.points_f64())?;
    let d2 = sample_descriptors(&out2.pyramid, &lm2.points_f64())?;
    let gt = generate_ground_truth(
        &lm1,
        &lm2,
        &sample.transform,
        settings.thresh_pixels,
        &sample.mask1,
    )?;
    let c_hat = params.match_matrix(&d1, &d2)?;
    let (l1, _) = landmark_probability_loss_with_grad(&lm1.probs, &gt.p1)?;
    let (l2, _) = landmark_probability_loss_with_grad(&lm2.probs, &gt.p2)?;
    let (parts, _, _, _) =
        descriptor_matching_loss_with_grad(&d1, &d2, &c_hat, &gt, settings.m_pos, settings.m_neg)?;
    total_loss(l1, l2, parts)
}

/// Loss of one training pair plus the full parameter gradient, accumulated
/// into `grads`.
pub fn pair_loss_and_grads(
    params: &ModelParams,
    sample: &PairSample,
    settings: &PairLossSettings,
    grads: &mut ModelGrads,
) -> Result<LossBreakdown> {
    let (out1, cache1) = params.forward_branch_cached(&sample.reference)?;
    let (out2, cache2) = params.forward_branch_cached(&sample.target)?;
    let lm1 = grid_sample_landmarks(&out1.prob, &sample.mask1, settings.cell_px, settings.k)?;
    let lm2 = grid_sample_landmarks(&out2.prob, &sample.mask2, settings.cell_px, settings.k)?;
    let pts1 = lm1.points_f64();
    let pts2 = lm2.points_f64();
    let d1 = sample_descriptors(&out1.pyramid, &pts1)?;
    let d2 = sample_descriptors(&out2.pyramid, &pts2)?;
    let gt = generate_ground_truth(
        &lm1,
        &lm2,
        &sample.transform,
        settings.thresh_pixels,
        &sample.mask1,
    )?;
    let c_hat = params.match_matrix(&d1, &d2)?;

    let (l1, g_p1) = landmark_probability_loss_with_grad(&lm1.probs, &gt.p1)?;
    let (l2, g_p2) = landmark_probability_loss_with_grad(&lm2.probs, &gt.p2)?;
    let (parts, g_d1_loss, g_d2_loss, g_chat) =
        descriptor_matching_loss_with_grad(&d1, &d2, &c_hat, &gt, settings.m_pos, settings.m_neg)?;
    let breakdown = total_loss(l1, l2, parts)?;

    // the head backward adds its descriptor contribution to the hinge's
    let (g_d1_head, g_d2_head) = params.match_matrix_backward(&d1, &d2, &c_hat, &g_chat, grads);
    let g_d1 = g_d1_loss + g_d1_head;
    let g_d2 = g_d2_loss + g_d2_head;
    let (g_mid1, g_deep1) = sample_descriptors_backward(&out1.pyramid, &pts1, &g_d1);
    let (g_mid2, g_deep2) = sample_descriptors_backward(&out2.pyramid, &pts2, &g_d2);

    // landmark-probability gradients live at isolated pixels of the maps
    let mut g_prob1 = Array2::zeros(out1.prob.dim());
    for (&(r, c), &g) in lm1.points.iter().zip(&g_p1) {
        g_prob1[[r, c]] += g;
    }
    let mut g_prob2 = Array2::zeros(out2.prob.dim());
    for (&(r, c), &g) in lm2.points.iter().zip(&g_p2) {
        g_prob2[[r, c]] += g;
    }

    params.backward_branch(&cache1, &g_prob1, &g_mid1, &g_deep1, grads);
    params.backward_branch(&cache2, &g_prob2, &g_mid2, &g_deep2, grads);
    Ok(breakdown)
}

// ------------------------------------------------------------------- optim

/// Adam with coupled (L2-style) weight decay: the decay term joins the
/// gradient before the moment updates.
pub(crate) struct Adam {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64, n_params: usize) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(theta.len(), grad.len());
        debug_assert_eq!(theta.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            let g = grad[i] + self.weight_decay * theta[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

// ---------------------------------------------------------------- training

/// One training-log line. `kind` distinguishes per-step records from
/// per-epoch summaries in the same JSON-lines stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: u64,
        epoch: usize,
        #[serde(flatten)]
        losses: LossBreakdown,
        /// Digest of the RNG material behind this step's batch; identical
        /// runs produce identical digest sequences.
        seed_state_digest: String,
    },
    Epoch {
        epoch: usize,
        mean_total: f64,
        validation_total: Option<f64>,
    },
}

/// Where a training run writes its artifacts.
#[derive(Default)]
pub struct TrainOutputs<'a> {
    /// Per-epoch rolling checkpoint `latest.ck` plus a final `model.ck`.
    pub checkpoint_dir: Option<&'a Path>,
    /// JSON-lines training log, one [`LogRecord`] per line.
    pub log: Option<&'a mut dyn Write>,
}

/// Result of a training run.
pub struct TrainOutcome {
    pub params: ModelParams,
    pub records: Vec<LogRecord>,
    pub epochs_completed: usize,
    /// True if the run aborted on a non-finite loss; `params` then holds the
    /// last good epoch-end state.
    pub diverged: bool,
}

fn digest_seeds(seeds: &[u64]) -> String {
    let mut hasher = Sha256::new();
    for s in seeds {
        hasher.update(s.to_le_bytes());
    }
    let hex: String = hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    hex[..16].to_string()
}

fn emit(
    records: &mut Vec<LogRecord>,
    log: &mut Option<&mut dyn Write>,
    rec: LogRecord,
) -> Result<()> {
    if let Some(w) = log.as_deref_mut() {
        serde_json::to_writer(&mut *w, &rec)?;
        writeln!(w)?;
    }
    records.push(rec);
    Ok(())
}

fn lb_add(a: LossBreakdown, b: LossBreakdown) -> LossBreakdown {
    LossBreakdown {
        landmark_loss_i1: a.landmark_loss_i1 + b.landmark_loss_i1,
        landmark_loss_i2: a.landmark_loss_i2 + b.landmark_loss_i2,
        descriptor_loss: a.descriptor_loss + b.descriptor_loss,
        hinge_pos: a.hinge_pos + b.hinge_pos,
        hinge_neg: a.hinge_neg + b.hinge_neg,
        weighted_ce: a.weighted_ce + b.weighted_ce,
        total: a.total + b.total,
    }
}

fn lb_scale(b: LossBreakdown, s: f64) -> LossBreakdown {
    LossBreakdown {
        landmark_loss_i1: b.landmark_loss_i1 * s,
        landmark_loss_i2: b.landmark_loss_i2 * s,
        descriptor_loss: b.descriptor_loss * s,
        hinge_pos: b.hinge_pos * s,
        hinge_neg: b.hinge_neg * s,
        weighted_ce: b.weighted_ce * s,
        total: b.total * s,
    }
}

/// Train from scratch (or from `initial`) on `dataset`. See the module docs
/// for the step recipe; determinism is guaranteed for a fixed seed because
/// every batch item draws from its own pre-derived sub-stream and gradient
/// reduction is ordered. A non-finite loss aborts the run, rolling the
/// parameters back to the end of the last completed epoch.
pub fn train(
    config: &TrainConfig,
    dataset: &[GrayImage],
    initial: Option<ModelParams>,
    outputs: &mut TrainOutputs,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    let mut params = match initial {
        Some(p) => {
            if p.config() != &config.model {
                return Err(Error::invalid(
                    "initial parameters were built for a different model config",
                ));
            }
            p
        }
        None => {
            let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
            ModelParams::init(config.model.clone(), &mut rng)?
        }
    };
    let settings = PairLossSettings::from(config);

    // deterministic validation split: the tail of the dataset order
    let n_val = if dataset.len() >= 2 && config.validation_fraction > 0.0 {
        (((dataset.len() as f64) * config.validation_fraction).floor() as usize).max(1)
    } else {
        0
    };
    let (train_set, val_set) = dataset.split_at(dataset.len() - n_val);

    let mut master = ChaCha20Rng::seed_from_u64(config.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut adam = Adam::new(config.learning_rate, config.weight_decay, params.param_count());
    let steps_per_epoch = train_set.len().div_ceil(config.batch_size);
    let mut records: Vec<LogRecord> = Vec::new();
    let mut last_good = params.clone();
    let mut diverged = false;
    let mut step: u64 = 0;
    let mut epochs_completed = 0;

    'epochs: for epoch in 0..config.epochs {
        let mut epoch_total = 0.0;
        let mut epoch_steps = 0;
        for _ in 0..steps_per_epoch {
            // every batch item owns a pre-drawn sub-seed; the digest of
            // those seeds identifies the step's randomness exactly
            let item_seeds: Vec<u64> =
                (0..config.batch_size).map(|_| master.random()).collect();
            let digest = digest_seeds(&item_seeds);

            let mut grads = params.grad_buffer();
            let mut sums: Option<LossBreakdown> = None;
            for &item_seed in &item_seeds {
                let mut rng = ChaCha20Rng::seed_from_u64(item_seed);
                let img = &train_set[rng.random_range(0..train_set.len())];
                let family = config.families[rng.random_range(0..config.families.len())];
                let spec = TransformSpec {
                    family,
                    image_shape: img.shape(),
                    ranges: config.ranges.clone(),
                };
                let t = sample_transform(&spec, &mut rng)?;
                let sample = synthesize_pair(img, &t, &config.mask)?;
                match pair_loss_and_grads(&params, &sample, &settings, &mut grads) {
                    Ok(b) => {
                        sums = Some(match sums {
                            None => b,
                            Some(s) => lb_add(s, b),
                        });
                    }
                    Err(Error::NonFinite(component)) => {
                        eprintln!(
                            "training diverged at step {step} (non-finite {component}); \
                             keeping the last epoch's parameters"
                        );
                        params = last_good.clone();
                        diverged = true;
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                }
            }
            let scale = 1.0 / config.batch_size as f64;
            grads.scale(scale);
            let b = lb_scale(sums.expect("batch_size >= 1 items per step"), scale);
            if !b.total.is_finite() {
                eprintln!(
                    "training diverged at step {step} (non-finite batch loss); \
                     keeping the last epoch's parameters"
                );
                params = last_good.clone();
                diverged = true;
                break 'epochs;
            }

            let mut theta = params.flatten();
            adam.step(&mut theta, &grads.flatten());
            params.load_flat(&theta)?;

            epoch_total += b.total;
            epoch_steps += 1;
            emit(
                &mut records,
                &mut outputs.log,
                LogRecord::Step { step, epoch, losses: b, seed_state_digest: digest },
            )?;
            step += 1;
        }

        // epoch bookkeeping: validation loss, rolling checkpoint, summary.
        // Validation transforms depend only on (seed, image index) so the
        // loss is comparable across epochs.
        let validation_total = if val_set.is_empty() {
            None
        } else {
            let mut val_sum = 0.0;
            for (vi, img) in val_set.iter().enumerate() {
                let mut rng = ChaCha20Rng::seed_from_u64(
                    config.seed ^ 0xa5a5_a5a5_5a5a_5a5a ^ (vi as u64),
                );
                let family = config.families[rng.random_range(0..config.families.len())];
                let spec = TransformSpec {
                    family,
                    image_shape: img.shape(),
                    ranges: config.ranges.clone(),
                };
                let t = sample_transform(&spec, &mut rng)?;
                let sample = synthesize_pair(img, &t, &config.mask)?;
                match pair_loss(&params, &sample, &settings) {
                    Ok(b) => val_sum += b.total,
                    Err(Error::NonFinite(component)) => {
                        eprintln!(
                            "training diverged during validation after epoch {epoch} \
                             (non-finite {component}); keeping the last epoch's parameters"
                        );
                        params = last_good.clone();
                        diverged = true;
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                }
            }
            Some(val_sum / val_set.len() as f64)
        };
        if let Some(dir) = outputs.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            save_checkpoint(dir.join("latest.ck"), &params)?;
        }
        last_good = params.clone();
        epochs_completed = epoch + 1;
        emit(
            &mut records,
            &mut outputs.log,
            LogRecord::Epoch {
                epoch,
                mean_total: epoch_total / (epoch_steps.max(1) as f64),
                validation_total,
            },
        )?;
    }

    if let Some(dir) = outputs.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(dir.join("model.ck"), &params)?;
    }
    Ok(TrainOutcome { params, records, epochs_completed, diverged })
}

// --------------------------------------------------------------- inference

/// Inference-time settings; the defaults mirror training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferOptions {
    /// Candidates must have landmark probability strictly above this.
    pub thresh_landmark: f64,
    pub cell_px: usize,
    pub mask: MaskOptions,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self { thresh_landmark: 0.5, cell_px: 8, mask: MaskOptions::default() }
    }
}

/// One accepted landmark correspondence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub pt1: (usize, usize),
    pub pt2: (usize, usize),
    /// Candidate indices the pair came from.
    pub index1: usize,
    pub index2: usize,
    pub match_prob: f64,
    pub desc_dist2: f64,
}

/// All accepted correspondences of one image pair; one-to-one by
/// construction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSet {
    pub pairs: Vec<MatchPair>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// CSV with header `row1,col1,row2,col2,match_prob,desc_dist2`. Floats
    /// print in shortest round-trip form, so write → read → write is stable.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "row1,col1,row2,col2,match_prob,desc_dist2")?;
        for p in &self.pairs {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                p.pt1.0, p.pt1.1, p.pt2.0, p.pt2.1, p.match_prob, p.desc_dist2
            )?;
        }
        Ok(())
    }

    /// Inverse of [`write_csv`](Self::write_csv). Candidate indices are not
    /// stored in the file, so they are rebuilt as row numbers.
    pub fn read_csv(mut r: impl std::io::Read) -> Result<Self> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header.trim() != "row1,col1,row2,col2,match_prob,desc_dist2" {
            return Err(Error::format(format!("unexpected match CSV header: {header}")));
        }
        let mut pairs = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(Error::format(format!(
                    "match CSV line {}: expected 6 fields, got {}",
                    ln + 2,
                    fields.len()
                )));
            }
            let parse_usize = |s: &str| {
                s.trim().parse::<usize>().map_err(|_| {
                    Error::format(format!("match CSV line {}: bad integer {s:?}", ln + 2))
                })
            };
            let parse_f64 = |s: &str| {
                s.trim().parse::<f64>().map_err(|_| {
                    Error::format(format!("match CSV line {}: bad number {s:?}", ln + 2))
                })
            };
            let idx = pairs.len();
            pairs.push(MatchPair {
                pt1: (parse_usize(fields[0])?, parse_usize(fields[1])?),
                pt2: (parse_usize(fields[2])?, parse_usize(fields[3])?),
                index1: idx,
                index2: idx,
                match_prob: parse_f64(fields[4])?,
                desc_dist2: parse_f64(fields[5])?,
            });
        }
        Ok(Self { pairs })
    }
}

/// Pairs that are mutual best under BOTH criteria: (i, j) is accepted iff j
/// is the first argmax of row i of `c_hat` and i the first argmax of its
/// column j, and likewise j/i are the first argmins of `d2`'s row i and
/// column j. The result is one-to-one because each accepted i pins down its
/// row argmax j and vice versa.
pub fn inverse_consistent_match(c_hat: &Array2<f64>, d2: &Array2<f64>) -> Vec<(usize, usize)> {
    let (k1, k2) = c_hat.dim();
    debug_assert_eq!(d2.dim(), (k1, k2));
    if k1 == 0 || k2 == 0 {
        return Vec::new();
    }
    fn argbest(values: impl Iterator<Item = f64>, higher_better: bool) -> usize {
        let mut best_idx = 0;
        let mut best = if higher_better { f64::NEG_INFINITY } else { f64::INFINITY };
        for (idx, v) in values.enumerate() {
            if (higher_better && v > best) || (!higher_better && v < best) {
                best = v;
                best_idx = idx;
            }
        }
        best_idx
    }
    let row_arg_c: Vec<usize> = (0..k1)
        .map(|i| argbest(c_hat.row(i).iter().copied(), true))
        .collect();
    let col_arg_c: Vec<usize> = (0..k2)
        .map(|j| argbest(c_hat.column(j).iter().copied(), true))
        .collect();
    let row_arg_d: Vec<usize> = (0..k1)
        .map(|i| argbest(d2.row(i).iter().copied(), false))
        .collect();
    let col_arg_d: Vec<usize> = (0..k2)
        .map(|j| argbest(d2.column(j).iter().copied(), false))
        .collect();
    (0..k1)
        .filter_map(|i| {
            let j = row_arg_c[i];
            (col_arg_c[j] == i && row_arg_d[i] == j && col_arg_d[j] == i).then_some((i, j))
        })
        .collect()
}

/// Match two images: forward both branches, grid-sample candidates, keep
/// those with probability strictly above the threshold, and accept
/// inverse-consistent pairs. Reported squared distances are recomputed
/// exactly per accepted pair.
pub fn infer_pair(
    params: &ModelParams,
    i1: &GrayImage,
    i2: &GrayImage,
    opts: &InferOptions,
) -> Result<MatchSet> {
    let out1 = params.forward_branch(i1)?;
    let out2 = params.forward_branch(i2)?;
    let mask1 = opts.mask.compute(i1);
    let mask2 = opts.mask.compute(i2);
    let cand1 = grid_sample_all(&out1.prob, &mask1, opts.cell_px)?;
    let cand2 = grid_sample_all(&out2.prob, &mask2, opts.cell_px)?;

    fn keep(lm: &LandmarkSet, thresh: f64) -> Vec<(usize, usize)> {
        lm.points
            .iter()
            .zip(&lm.probs)
            .filter(|&(_, &p)| p > thresh)
            .map(|(&pt, _)| pt)
            .collect()
    }
    let pts1 = keep(&cand1, opts.thresh_landmark);
    let pts2 = keep(&cand2, opts.thresh_landmark);
    if pts1.is_empty() || pts2.is_empty() {
        return Ok(MatchSet::default());
    }

    fn as_f64(pts: &[(usize, usize)]) -> Vec<(f64, f64)> {
        pts.iter().map(|&(r, c)| (r as f64, c as f64)).collect()
    }
    let d1 = sample_descriptors(&out1.pyramid, &as_f64(&pts1))?;
    let d2 = sample_descriptors(&out2.pyramid, &as_f64(&pts2))?;
    let c_hat = params.match_matrix(&d1, &d2)?;
    let dist2 = distance2_matrix(&d1, &d2);
    let accepted = inverse_consistent_match(&c_hat, &dist2);

    let pairs = accepted
        .into_iter()
        .map(|(i, j)| MatchPair {
            pt1: pts1[i],
            pt2: pts2[j],
            index1: i,
            index2: j,
            match_prob: c_hat[[i, j]],
            desc_dist2: distance2_exact(d1.vectors.row(i), d2.vectors.row(j)),
        })
        .collect();
    Ok(MatchSet { pairs })
}
