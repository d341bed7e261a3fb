//! Temporary diagnostic probe for the desk-scale elastic criterion.
//! Not part of the suite; run with
//! `cargo test -p landmatch-cli --test probe -- --nocapture --ignored`.

use std::path::PathBuf;
use std::time::Instant;

use landmatch::evaluation::compute_matching_errors;
use landmatch::network::{load_checkpoint, save_checkpoint, ModelConfig, ModelParams};
use landmatch::pipeline::{infer_pair, train, InferOptions, TrainConfig, TrainOutputs};
use landmatch::synthetic::{texture_dataset, textured_image};
use landmatch::transforms::{sample_transform, warp_image, TransformFamily, TransformSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn desk_params(filters: &[usize], seed: u64) -> ModelParams {
    let tag: String = filters.iter().map(|f| f.to_string()).collect::<Vec<_>>().join("_");
    let path = PathBuf::from(format!("/tmp/desk_probe_{tag}_s{seed}.ck"));
    if path.is_file() {
        eprintln!("loading cached {}", path.display());
        return load_checkpoint(&path).unwrap();
    }
    let dataset = texture_dataset(64, (96, 96), 100);
    let config = TrainConfig {
        model: ModelConfig { encoder_filters: filters.to_vec() },
        epochs: 30,
        batch_size: 4,
        k: 100,
        cell_px: 8,
        seed,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let outcome =
        train(&config, &dataset, None, &mut TrainOutputs { checkpoint_dir: None, log: None })
            .unwrap();
    eprintln!("trained in {:.0} s, diverged={}", start.elapsed().as_secs_f64(), outcome.diverged);
    let epochs: Vec<(usize, f64, Option<f64>)> = outcome
        .records
        .iter()
        .filter_map(|r| match r {
            landmatch::pipeline::LogRecord::Epoch { epoch, mean_total, validation_total } => {
                Some((*epoch, *mean_total, *validation_total))
            }
            _ => None,
        })
        .collect();
    for (epoch, mean, val) in epochs.iter().take(3).chain(epochs.iter().rev().take(5).rev()) {
        eprintln!("  epoch {epoch:>2}: train {mean:.4} val {val:?}");
    }
    save_checkpoint(&path, &outcome.params).unwrap();
    outcome.params
}

fn probe_family(params: &ModelParams, family: TransformFamily, seed0: u64, thresh_px: f64) {
    let opts = InferOptions::default();
    let mut all: Vec<(f64, f64, f64)> = Vec::new(); // (err, prob, d2)
    let mut counts = Vec::new();
    for i in 0..20u64 {
        let img = textured_image((96, 96), 5000 + seed0 + i);
        let spec = TransformSpec::new(family, (96, 96));
        let mut rng = ChaCha20Rng::seed_from_u64(seed0 + 900 + i);
        let t = sample_transform(&spec, &mut rng).unwrap();
        let target = warp_image(&img, &t).unwrap();
        let ms = infer_pair(params, &img, &target, &opts).unwrap();
        let errors = compute_matching_errors(&ms, &t, 1.0).unwrap();
        let within = errors.iter().filter(|&&e| e <= thresh_px).count();
        counts.push(ms.pairs.len());
        eprintln!(
            "  pair {i:>2}: {:>3} matches, {:>3} within {thresh_px} px ({:.0}%)",
            ms.pairs.len(),
            within,
            if errors.is_empty() { 0.0 } else { 100.0 * within as f64 / errors.len() as f64 }
        );
        for (mp, e) in ms.pairs.iter().zip(&errors) {
            all.push((*e, mp.match_prob, mp.desc_dist2));
        }
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = all.len();
    eprintln!("pooled {n} matches; error deciles:");
    for d in 0..=10 {
        let idx = ((n - 1) * d) / 10;
        eprintln!("  p{:>3}: {:8.2} px", d * 10, all[idx].0);
    }
    let (good, bad): (Vec<_>, Vec<_>) = all.iter().partition(|m| m.0 <= thresh_px);
    let mean = |v: &[&(f64, f64, f64)], f: fn(&(f64, f64, f64)) -> f64| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().map(|m| f(m)).sum::<f64>() / v.len() as f64
        }
    };
    let g: Vec<&(f64, f64, f64)> = good.iter().collect();
    let b: Vec<&(f64, f64, f64)> = bad.iter().collect();
    eprintln!(
        "  correct: n={} mean prob {:.3} mean d2 {:.4}",
        g.len(),
        mean(&g, |m| m.1),
        mean(&g, |m| m.2)
    );
    eprintln!(
        "  wrong:   n={} mean prob {:.3} mean d2 {:.4}",
        b.len(),
        mean(&b, |m| m.1),
        mean(&b, |m| m.2)
    );
    counts.sort_unstable();
    eprintln!("  per-pair match counts: min {} median {} max {}", counts[0], counts[10], counts[19]);
}

/// Separate candidate repeatability from descriptor discrimination: with the
/// model's own candidate sets, how well could an oracle matcher (nearest
/// reference candidate to each projected target candidate) do, and how far
/// are the accepted matches from that oracle?
fn probe_candidate_ceiling(params: &ModelParams, seed0: u64) {
    use landmatch::pipeline::MaskOptions;
    use landmatch::sampling::grid_sample_all;
    use landmatch::transforms::project_to_reference;

    let mut oracle_within = [0usize; 3]; // at 2, 4, 8 px
    let mut n_targets = 0usize;
    let mut accepted_err = Vec::new();
    let mut oracle_err_of_accepted = Vec::new();
    for i in 0..20u64 {
        let img = textured_image((96, 96), 5000 + seed0 + i);
        let spec = TransformSpec::new(TransformFamily::Elastic, (96, 96));
        let mut rng = ChaCha20Rng::seed_from_u64(seed0 + 900 + i);
        let t = sample_transform(&spec, &mut rng).unwrap();
        let target = warp_image(&img, &t).unwrap();

        let out1 = params.forward_branch(&img).unwrap();
        let out2 = params.forward_branch(&target).unwrap();
        let mask_opts = MaskOptions::default();
        let cand1 = grid_sample_all(&out1.prob, &mask_opts.compute(&img), 8).unwrap();
        let cand2 = grid_sample_all(&out2.prob, &mask_opts.compute(&target), 8).unwrap();
        let kept1: Vec<(usize, usize)> = cand1
            .points
            .iter()
            .zip(&cand1.probs)
            .filter(|&(_, &p)| p > 0.5)
            .map(|(&pt, _)| pt)
            .collect();
        let kept2: Vec<(usize, usize)> = cand2
            .points
            .iter()
            .zip(&cand2.probs)
            .filter(|&(_, &p)| p > 0.5)
            .map(|(&pt, _)| pt)
            .collect();

        let nearest = |q: (f64, f64)| -> f64 {
            kept1
                .iter()
                .map(|&(r, c)| ((r as f64 - q.0).powi(2) + (c as f64 - q.1).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        };
        for &(r2, c2) in &kept2 {
            let q = project_to_reference((r2 as f64, c2 as f64), &t);
            let d = nearest(q);
            n_targets += 1;
            for (slot, thresh) in [2.0, 4.0, 8.0].iter().enumerate() {
                if d <= *thresh {
                    oracle_within[slot] += 1;
                }
            }
        }

        // how far each accepted match is from the best available candidate
        let ms = infer_pair(params, &img, &target, &InferOptions::default()).unwrap();
        for mp in &ms.pairs {
            let q = project_to_reference((mp.pt2.0 as f64, mp.pt2.1 as f64), &t);
            let err =
                ((mp.pt1.0 as f64 - q.0).powi(2) + (mp.pt1.1 as f64 - q.1).powi(2)).sqrt();
            accepted_err.push(err);
            oracle_err_of_accepted.push(nearest(q));
        }
    }
    let pct = |k: usize| 100.0 * k as f64 / n_targets as f64;
    eprintln!(
        "candidate ceiling over {} target candidates: {:.1}% have a reference candidate within 2 px, {:.1}% within 4 px, {:.1}% within 8 px",
        n_targets,
        pct(oracle_within[0]),
        pct(oracle_within[1]),
        pct(oracle_within[2])
    );
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    eprintln!(
        "accepted matches: mean error {:.2} px vs mean best-available {:.2} px ({} accepted)",
        mean(&accepted_err),
        mean(&oracle_err_of_accepted),
        accepted_err.len()
    );
}

#[test]
#[ignore]
fn probe_desk_elastic() {
    let params = desk_params(&[16, 32, 64, 128, 256], 7);
    eprintln!("== elastic, threshold 8 px ==");
    probe_family(&params, TransformFamily::Elastic, 200, 8.0);
    eprintln!("== candidate ceiling (elastic) ==");
    probe_candidate_ceiling(&params, 200);
    eprintln!("== intensity (brightness), threshold 2 px ==");
    probe_family(&params, TransformFamily::Brightness, 0, 2.0);
}
