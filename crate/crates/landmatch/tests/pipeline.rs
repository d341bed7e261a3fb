//! Contract tests for training and paired inference: the inverse-consistent
//! matcher against a brute-force oracle, determinism of full training runs,
//! divergence handling, end-to-end gradients against finite differences,
//! and the match CSV format.

use landmatch::image_io::GrayImage;
use landmatch::network::{ModelConfig, ModelParams};
use landmatch::pipeline::{
    infer_pair, inverse_consistent_match, pair_loss, pair_loss_and_grads, synthesize_pair, train,
    InferOptions, LogRecord, MaskOptions, MatchPair, MatchSet, PairLossSettings, TrainConfig,
    TrainOutputs,
};
use landmatch::transforms::{
    sample_transform, AffineTransform2D, IntensityJitter, JitterMode, Transform, TransformFamily,
    TransformSpec,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Smooth blob texture: bright Gaussian bumps on a mid-gray background, so
/// every pixel is valid and the content has structure worth matching.
fn blob_texture(shape: (usize, usize), n_blobs: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (h, w) = shape;
    let mut pixels = Array2::from_elem(shape, 0.15);
    for _ in 0..n_blobs {
        let cr = rng.random_range(0.0..h as f64);
        let cc = rng.random_range(0.0..w as f64);
        let sigma = rng.random_range(2.0..(h.min(w) as f64 / 4.0));
        let amp = rng.random_range(0.3..0.8);
        for r in 0..h {
            for c in 0..w {
                let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
                pixels[[r, c]] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    let max = pixels.iter().cloned().fold(f64::MIN, f64::max);
    pixels.mapv_inplace(|v| v / max);
    GrayImage::new(pixels, (1.0, 1.0)).unwrap()
}

fn tiny_params(seed: u64) -> ModelParams {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    ModelParams::init(ModelConfig::tiny(), &mut rng).unwrap()
}

fn small_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        model: ModelConfig::tiny(),
        epochs,
        k: 32,
        seed,
        ..TrainConfig::default()
    }
}

// --------------------------------------------------- inverse consistency

#[test]
fn inverse_consistent_accepts_mutual_best_under_both_criteria() {
    let c_hat = ndarray::array![[0.9, 0.1], [0.2, 0.8]];
    let d2 = ndarray::array![[0.1, 1.0], [1.2, 0.3]];
    assert_eq!(inverse_consistent_match(&c_hat, &d2), vec![(0, 0), (1, 1)]);
}

#[test]
fn inverse_consistent_rejects_pairs_where_criteria_disagree() {
    // probabilities point at the diagonal, distances at the anti-diagonal
    let c_hat = ndarray::array![[0.9, 0.1], [0.2, 0.8]];
    let d2 = ndarray::array![[1.0, 0.1], [0.3, 1.2]];
    assert!(inverse_consistent_match(&c_hat, &d2).is_empty());
}

#[test]
fn inverse_consistent_handles_empty_inputs() {
    let empty = Array2::<f64>::zeros((0, 5));
    let d = Array2::<f64>::zeros((0, 5));
    assert!(inverse_consistent_match(&empty, &d).is_empty());
}

/// Brute force restatement of the contract: (i, j) is accepted iff j is the
/// first index attaining the max of c_hat's row i, i the first attaining the
/// max of column j, and the same with min for d2.
fn oracle_mutual_best(c_hat: &Array2<f64>, d2: &Array2<f64>) -> Vec<(usize, usize)> {
    let (k1, k2) = c_hat.dim();
    let mut out = Vec::new();
    for i in 0..k1 {
        for j in 0..k2 {
            let row_c: Vec<f64> = c_hat.row(i).to_vec();
            let col_c: Vec<f64> = c_hat.column(j).to_vec();
            let row_d: Vec<f64> = d2.row(i).to_vec();
            let col_d: Vec<f64> = d2.column(j).to_vec();
            let first_max = |v: &[f64]| {
                let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                v.iter().position(|&x| x == m).unwrap()
            };
            let first_min = |v: &[f64]| {
                let m = v.iter().cloned().fold(f64::INFINITY, f64::min);
                v.iter().position(|&x| x == m).unwrap()
            };
            if first_max(&row_c) == j
                && first_max(&col_c) == i
                && first_min(&row_d) == j
                && first_min(&col_d) == i
            {
                out.push((i, j));
            }
        }
    }
    out
}

#[test]
fn inverse_consistent_matches_brute_force_oracle() {
    let mut rng = ChaCha20Rng::seed_from_u64(41);
    for case in 0..200 {
        let k1 = rng.random_range(1..=30);
        let k2 = rng.random_range(1..=30);
        // quantized values force ties, exercising the first-index rule
        let c_hat =
            Array2::from_shape_fn((k1, k2), |_| rng.random_range(0..8) as f64 / 8.0);
        let d2 = Array2::from_shape_fn((k1, k2), |_| rng.random_range(0..8) as f64 / 2.0);
        let got = inverse_consistent_match(&c_hat, &d2);
        let want = oracle_mutual_best(&c_hat, &d2);
        assert_eq!(got, want, "case {case}: {k1}x{k2}");
    }
}

#[test]
fn inverse_consistent_result_is_one_to_one() {
    let mut rng = ChaCha20Rng::seed_from_u64(42);
    for _ in 0..100 {
        let k1 = rng.random_range(1..=25);
        let k2 = rng.random_range(1..=25);
        let c_hat = Array2::from_shape_fn((k1, k2), |_| rng.random_range(0.0..1.0));
        let d2 = Array2::from_shape_fn((k1, k2), |_| rng.random_range(0.0..4.0));
        let got = inverse_consistent_match(&c_hat, &d2);
        let mut seen1 = std::collections::HashSet::new();
        let mut seen2 = std::collections::HashSet::new();
        for (i, j) in got {
            assert!(i < k1 && j < k2);
            assert!(seen1.insert(i), "index {i} matched twice");
            assert!(seen2.insert(j), "index {j} matched twice");
        }
    }
}

#[test]
fn inverse_consistent_is_invariant_to_monotone_rescaling() {
    let mut rng = ChaCha20Rng::seed_from_u64(43);
    for _ in 0..50 {
        let k1 = rng.random_range(1..=20);
        let k2 = rng.random_range(1..=20);
        let c_hat = Array2::from_shape_fn((k1, k2), |_| rng.random_range(0.0..1.0));
        let d2 = Array2::from_shape_fn((k1, k2), |_| rng.random_range(0.0..4.0));
        let base = inverse_consistent_match(&c_hat, &d2);
        // strictly increasing maps preserve every argmax and argmin
        let c_scaled = c_hat.mapv(|v| 0.3 + 0.5 * v * v * v);
        let d_scaled = d2.mapv(|v| (v + 1.0).ln() * 7.0);
        assert_eq!(inverse_consistent_match(&c_scaled, &d2), base);
        assert_eq!(inverse_consistent_match(&c_hat, &d_scaled), base);
        assert_eq!(inverse_consistent_match(&c_scaled, &d_scaled), base);
    }
}

// -------------------------------------------------------------- training

#[test]
fn zero_epochs_returns_initial_parameters_unchanged() {
    let config = small_config(0, 9);
    let dataset = vec![blob_texture((48, 48), 4, 1), blob_texture((48, 48), 4, 2)];
    let outcome = train(&config, &dataset, None, &mut TrainOutputs::default()).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let fresh = ModelParams::init(config.model.clone(), &mut rng).unwrap();
    assert_eq!(outcome.params.flatten(), fresh.flatten());
    assert_eq!(outcome.epochs_completed, 0);
    assert!(!outcome.diverged);
    assert!(outcome.records.is_empty());
}

#[test]
fn training_is_deterministic_for_a_fixed_seed() {
    let config = small_config(2, 77);
    let dataset: Vec<GrayImage> =
        (0..6).map(|i| blob_texture((64, 64), 5, 100 + i)).collect();

    let run = || {
        let outcome = train(&config, &dataset, None, &mut TrainOutputs::default()).unwrap();
        let losses: Vec<f64> = outcome
            .records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { losses, .. } => Some(losses.total),
                _ => None,
            })
            .collect();
        let digests: Vec<String> = outcome
            .records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { seed_state_digest, .. } => Some(seed_state_digest.clone()),
                _ => None,
            })
            .collect();
        (losses, digests, outcome.params.flatten())
    };
    let (losses_a, digests_a, params_a) = run();
    let (losses_b, digests_b, params_b) = run();
    assert!(!losses_a.is_empty());
    assert_eq!(losses_a, losses_b, "step losses must be bit-identical");
    assert_eq!(digests_a, digests_b);
    assert_eq!(params_a, params_b, "final parameters must be bit-identical");
}

#[test]
fn divergence_aborts_and_reports_last_good_parameters() {
    let mut poisoned = tiny_params(3);
    let n = poisoned.param_count();
    poisoned.load_flat(&vec![f64::NAN; n]).unwrap();
    let snapshot: Vec<u64> = poisoned.flatten().iter().map(|v| v.to_bits()).collect();

    let config = small_config(2, 3);
    let dataset = vec![blob_texture((48, 48), 4, 7), blob_texture((48, 48), 4, 8)];
    let outcome = train(&config, &dataset, Some(poisoned), &mut TrainOutputs::default()).unwrap();
    assert!(outcome.diverged);
    assert_eq!(outcome.epochs_completed, 0);
    let bits: Vec<u64> = outcome.params.flatten().iter().map(|v| v.to_bits()).collect();
    assert_eq!(bits, snapshot, "divergence must hand back the pre-step state");
}

#[test]
fn training_reduces_loss_on_a_small_corpus() {
    let mut config = small_config(6, 5);
    config.k = 16;
    let dataset: Vec<GrayImage> =
        (0..8).map(|i| blob_texture((48, 48), 4, 200 + i)).collect();
    let outcome = train(&config, &dataset, None, &mut TrainOutputs::default()).unwrap();
    assert!(!outcome.diverged);
    assert_eq!(outcome.epochs_completed, 6);
    let means: Vec<f64> = outcome
        .records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Epoch { mean_total, .. } => Some(*mean_total),
            _ => None,
        })
        .collect();
    assert_eq!(means.len(), 6);
    assert!(
        means[5] < means[0],
        "mean loss should drop over training: first {} last {}",
        means[0],
        means[5]
    );
}

#[test]
fn train_rejects_empty_dataset_and_mismatched_initial_parameters() {
    let config = small_config(1, 0);
    assert!(train(&config, &[], None, &mut TrainOutputs::default()).is_err());

    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let wrong = ModelParams::init(ModelConfig::default(), &mut rng).unwrap();
    let dataset = vec![blob_texture((48, 48), 4, 1)];
    assert!(train(&config, &dataset, Some(wrong), &mut TrainOutputs::default()).is_err());
}

#[test]
fn training_log_is_parseable_json_lines() {
    let config = small_config(1, 11);
    let dataset: Vec<GrayImage> =
        (0..4).map(|i| blob_texture((48, 48), 3, 300 + i)).collect();
    let mut buf: Vec<u8> = Vec::new();
    let mut outputs = TrainOutputs { checkpoint_dir: None, log: Some(&mut buf) };
    let outcome = train(&config, &dataset, None, &mut outputs).unwrap();

    let text = String::from_utf8(buf).unwrap();
    let mut step_lines = 0;
    let mut epoch_lines = 0;
    for line in text.lines() {
        let value: serde_json::Value = serde_json::from_str(line).unwrap();
        match value["kind"].as_str().unwrap() {
            "step" => {
                step_lines += 1;
                assert!(value["step"].is_u64());
                assert!(value["epoch"].is_u64());
                assert!(value["total"].is_f64());
                assert!(value["landmark_loss_i1"].is_f64());
                assert!(value["descriptor_loss"].is_f64());
                assert!(value["seed_state_digest"].is_string());
            }
            "epoch" => {
                epoch_lines += 1;
                assert!(value["mean_total"].is_f64());
            }
            other => panic!("unexpected record kind {other}"),
        }
        // the typed form parses too
        let _: LogRecord = serde_json::from_str(line).unwrap();
    }
    assert_eq!(step_lines + epoch_lines, outcome.records.len());
    assert!(step_lines >= 1 && epoch_lines == 1);
}

#[test]
fn checkpoints_are_written_per_epoch_and_at_the_end() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(1, 13);
    let dataset: Vec<GrayImage> =
        (0..3).map(|i| blob_texture((48, 48), 3, 400 + i)).collect();
    let mut outputs = TrainOutputs { checkpoint_dir: Some(dir.path()), log: None };
    let outcome = train(&config, &dataset, None, &mut outputs).unwrap();

    let latest = landmatch::network::load_checkpoint(dir.path().join("latest.ck")).unwrap();
    let final_ck = landmatch::network::load_checkpoint(dir.path().join("model.ck")).unwrap();
    assert_eq!(latest.flatten(), outcome.params.flatten());
    assert_eq!(final_ck.flatten(), outcome.params.flatten());
}

// ------------------------------------------------- pair loss and gradients

fn fixed_sample(shape: (usize, usize), seed: u64) -> landmatch::pipeline::PairSample {
    let img = blob_texture(shape, 4, seed);
    let spec = TransformSpec {
        family: TransformFamily::Rotation,
        image_shape: shape,
        ranges: Default::default(),
    };
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xffff);
    let t = sample_transform(&spec, &mut rng).unwrap();
    synthesize_pair(&img, &t, &MaskOptions::default()).unwrap()
}

#[test]
fn pair_loss_agrees_between_plain_and_gradient_paths() {
    let params = tiny_params(21);
    let sample = fixed_sample((48, 48), 500);
    let settings = PairLossSettings { k: 16, cell_px: 8, thresh_pixels: 2.0, m_pos: 0.1, m_neg: 1.0 };
    let plain = pair_loss(&params, &sample, &settings).unwrap();
    let mut grads = params.grad_buffer();
    let with_grads = pair_loss_and_grads(&params, &sample, &settings, &mut grads).unwrap();
    assert_eq!(plain.total.to_bits(), with_grads.total.to_bits());
    assert_eq!(plain.descriptor_loss.to_bits(), with_grads.descriptor_loss.to_bits());
}

/// End-to-end gradient check: the full pair loss (both branches, landmark
/// selection, descriptor sampling, matching head, every loss term) against
/// central finite differences on a spread of parameters.
#[test]
fn pair_gradients_match_finite_differences_end_to_end() {
    let params = tiny_params(22);
    let sample = fixed_sample((32, 32), 600);
    let settings = PairLossSettings { k: 8, cell_px: 8, thresh_pixels: 2.0, m_pos: 0.1, m_neg: 1.0 };

    let mut grads = params.grad_buffer();
    pair_loss_and_grads(&params, &sample, &settings, &mut grads).unwrap();
    let grad_flat = grads.flatten();
    let theta = params.flatten();
    let n = theta.len();

    // deterministic spread of probe indices across the whole vector; drawn
    // generously because probes landing on inactive (dead-relu) parameters
    // are skipped below
    let mut rng = ChaCha20Rng::seed_from_u64(23);
    let mut indices: Vec<usize> = (0..40).map(|_| rng.random_range(0..n)).collect();
    indices.sort_unstable();
    indices.dedup();

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for &idx in &indices {
        let h = 1e-5 * theta[idx].abs().max(1.0);
        let mut minus = params.clone();
        let mut plus = params.clone();
        let mut tm = theta.clone();
        tm[idx] -= h;
        minus.load_flat(&tm).unwrap();
        let mut tp = theta.clone();
        tp[idx] += h;
        plus.load_flat(&tp).unwrap();
        let lm = pair_loss(&minus, &sample, &settings).unwrap().total;
        let lp = pair_loss(&plus, &sample, &settings).unwrap().total;
        let fd = (lp - lm) / (2.0 * h);
        let denom = fd.abs().max(grad_flat[idx].abs());
        if denom < 1e-8 {
            continue; // inactive parameter (dead relu region)
        }
        let rel = (fd - grad_flat[idx]).abs() / denom;
        worst = worst.max(rel);
        checked += 1;
        assert!(
            rel <= 1e-3,
            "param {idx}: analytic {} vs fd {fd}, rel err {rel}",
            grad_flat[idx]
        );
    }
    assert!(checked >= 20, "only {checked} active parameters checked");
    eprintln!("worst relative error across {checked} parameters: {worst:.3e}");
}

// -------------------------------------------------------------- inference

#[test]
fn inference_with_zero_parameters_finds_nothing() {
    // all-zero weights give probability exactly 0.5 everywhere, which does
    // not clear the strict > 0.5 threshold
    let mut params = tiny_params(31);
    let n = params.param_count();
    params.load_flat(&vec![0.0; n]).unwrap();
    let img = blob_texture((64, 64), 5, 700);
    let matches = infer_pair(&params, &img, &img, &InferOptions::default()).unwrap();
    assert!(matches.is_empty());
}

#[test]
fn inference_with_impossible_threshold_finds_nothing() {
    let params = tiny_params(32);
    let img = blob_texture((64, 64), 5, 701);
    let opts = InferOptions { thresh_landmark: 1.0, ..InferOptions::default() };
    let matches = infer_pair(&params, &img, &img, &opts).unwrap();
    assert!(matches.is_empty());
}

#[test]
fn identical_images_give_self_matches_with_exactly_zero_distance() {
    let params = tiny_params(33);
    let img = blob_texture((64, 64), 6, 702);
    let matches = infer_pair(&params, &img, &img, &InferOptions::default()).unwrap();
    for p in &matches.pairs {
        assert!(p.match_prob > 0.0 && p.match_prob < 1.0);
        assert!(p.desc_dist2.is_finite() && p.desc_dist2 >= 0.0);
        if p.pt1 == p.pt2 {
            assert_eq!(p.desc_dist2, 0.0, "self-pair must have exactly zero distance");
        }
    }

    // with the matching head zeroed, every score ties at 0.5, the
    // first-index rule elects candidate 0, and the distance criterion
    // confirms it: exactly one self-match survives
    let mut flat_head = params.clone();
    flat_head.visit_mut(&mut |name, values| {
        if name.starts_with("head.") {
            values.iter_mut().for_each(|v| *v = 0.0);
        }
    });
    let matches = infer_pair(&flat_head, &img, &img, &InferOptions::default()).unwrap();
    if let Some(first) = matches.pairs.first() {
        assert_eq!(matches.len(), 1);
        assert_eq!(first.pt1, first.pt2);
        assert_eq!(first.desc_dist2, 0.0);
        assert!((first.match_prob - 0.5).abs() < 1e-15);
    }
}

#[test]
fn translated_pair_with_identity_transform_masks() {
    // a pure intensity change keeps the valid mask untouched; a translation
    // carries it through the same geometry as the image
    let img = blob_texture((40, 40), 3, 703);
    let jitter = Transform::from_intensity(IntensityJitter {
        mode: JitterMode::Brightness,
        magnitude: 0.1,
    });
    let pair = synthesize_pair(&img, &jitter, &MaskOptions::default()).unwrap();
    assert_eq!(pair.mask1, pair.mask2);

    let shift = Transform::from_affine(AffineTransform2D::translation(10.0, 0.0));
    let pair = synthesize_pair(&img, &shift, &MaskOptions::default()).unwrap();
    assert!(
        pair.mask2.count_ones() < pair.mask1.count_ones(),
        "translation must cut off part of the mask"
    );
}

// ------------------------------------------------------------- match sets

#[test]
fn match_csv_round_trips() {
    let set = MatchSet {
        pairs: vec![
            MatchPair {
                pt1: (3, 4),
                pt2: (5, 6),
                index1: 0,
                index2: 0,
                match_prob: 0.123456789012345678,
                desc_dist2: 1.9999999999999998,
            },
            MatchPair {
                pt1: (10, 0),
                pt2: (0, 31),
                index1: 1,
                index2: 1,
                match_prob: 1e-12,
                desc_dist2: 0.0,
            },
        ],
    };
    let mut buf: Vec<u8> = Vec::new();
    set.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("row1,col1,row2,col2,match_prob,desc_dist2\n"));

    let back = MatchSet::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back.len(), set.len());
    for (a, b) in set.pairs.iter().zip(&back.pairs) {
        assert_eq!(a.pt1, b.pt1);
        assert_eq!(a.pt2, b.pt2);
        assert_eq!(a.match_prob.to_bits(), b.match_prob.to_bits());
        assert_eq!(a.desc_dist2.to_bits(), b.desc_dist2.to_bits());
    }

    // second serialization is byte-identical
    let mut again: Vec<u8> = Vec::new();
    back.write_csv(&mut again).unwrap();
    assert_eq!(buf, again);
}

#[test]
fn match_csv_rejects_malformed_input() {
    assert!(MatchSet::read_csv("not,a,header\n1,2,3,4,5,6\n".as_bytes()).is_err());
    let missing_field = "row1,col1,row2,col2,match_prob,desc_dist2\n1,2,3,4,5\n";
    assert!(MatchSet::read_csv(missing_field.as_bytes()).is_err());
    let bad_number = "row1,col1,row2,col2,match_prob,desc_dist2\n1,2,3,4,x,6\n";
    assert!(MatchSet::read_csv(bad_number.as_bytes()).is_err());
}
