//! Evaluation-metric tests: analytic projection errors, a direct
//! recomputation oracle for random affine transforms, cumulative-curve
//! invariants, summary aggregation, and renderer output checks.

use landmatch::evaluation::{
    compute_matching_errors, cumulative_curve, default_thresholds, render_text_table, summarize,
    write_cumulative_svg, write_reports_csv, write_reports_json, EvalReport, PairEvaluation,
};
use landmatch::pipeline::{MatchPair, MatchSet};
use landmatch::transforms::AffineTransform2D;
use landmatch::Transform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn match_set(points: &[((usize, usize), (usize, usize))]) -> MatchSet {
    MatchSet {
        pairs: points
            .iter()
            .enumerate()
            .map(|(i, &(pt1, pt2))| MatchPair {
                pt1,
                pt2,
                index1: i,
                index2: i,
                match_prob: 0.9,
                desc_dist2: 0.1,
            })
            .collect(),
    }
}

fn pair_eval(method: &str, family: &str, count: usize, errors: Vec<f64>) -> PairEvaluation {
    PairEvaluation { method: method.into(), family: family.into(), match_count: count, errors_mm: errors }
}

// ---------------------------------------------------- matching errors

#[test]
fn identity_transform_self_matches_have_zero_error() {
    let ms = match_set(&[((3, 4), (3, 4)), ((10, 0), (10, 0)), ((7, 99), (7, 99))]);
    let errs = compute_matching_errors(&ms, &Transform::identity(), 1.0).unwrap();
    assert_eq!(errs, vec![0.0, 0.0, 0.0]);
}

#[test]
fn uncompensated_translation_gives_analytic_error() {
    // The true map sends target point x to reference point x + (3, 4); a
    // match that pairs the same coordinates is off by exactly 5 px.
    let t = Transform::from_affine(AffineTransform2D::translation(3.0, 4.0));
    let ms = match_set(&[((10, 20), (10, 20)), ((50, 5), (50, 5))]);
    let errs = compute_matching_errors(&ms, &t, 1.0).unwrap();
    assert_eq!(errs, vec![5.0, 5.0]);
    // Pixel spacing scales the error linearly into millimeters.
    let errs_2mm = compute_matching_errors(&ms, &t, 2.0).unwrap();
    assert_eq!(errs_2mm, vec![10.0, 10.0]);
}

#[test]
fn compensated_translation_has_zero_error() {
    let t = Transform::from_affine(AffineTransform2D::translation(3.0, 4.0));
    let ms = match_set(&[((13, 24), (10, 20)), ((53, 9), (50, 5))]);
    let errs = compute_matching_errors(&ms, &t, 1.0).unwrap();
    assert_eq!(errs, vec![0.0, 0.0]);
}

#[test]
fn random_affine_errors_match_direct_recomputation() {
    let mut rng = ChaCha20Rng::seed_from_u64(41);
    for _ in 0..200 {
        let m = [
            [1.0 + rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)],
            [rng.random_range(-0.2..0.2), 1.0 + rng.random_range(-0.2..0.2)],
        ];
        let center = (rng.random_range(20.0..100.0), rng.random_range(20.0..100.0));
        let shift = (rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
        let affine = AffineTransform2D::about_center(center, m, shift);
        let t = Transform::from_affine(affine);
        let spacing = rng.random_range(0.5..3.0);

        let points: Vec<((usize, usize), (usize, usize))> = (0..rng.random_range(1..8))
            .map(|_| {
                (
                    (rng.random_range(0..128), rng.random_range(0..128)),
                    (rng.random_range(0..128), rng.random_range(0..128)),
                )
            })
            .collect();
        let ms = match_set(&points);
        let errs = compute_matching_errors(&ms, &t, spacing).unwrap();

        for (&((r1, c1), (r2, c2)), &err) in points.iter().zip(&errs) {
            // Independent recomputation from the affine definition:
            // φ(x) = m · (x − center) + center + shift.
            let (xr, xc) = (r2 as f64 - center.0, c2 as f64 - center.1);
            let pr = m[0][0] * xr + m[0][1] * xc + center.0 + shift.0;
            let pc = m[1][0] * xr + m[1][1] * xc + center.1 + shift.1;
            let expected = ((r1 as f64 - pr).powi(2) + (c1 as f64 - pc).powi(2)).sqrt() * spacing;
            assert!(
                (err - expected).abs() <= 1e-9,
                "error {err} differs from direct recomputation {expected}"
            );
        }
    }
}

#[test]
fn errors_are_invariant_to_match_order() {
    let t = Transform::from_affine(AffineTransform2D::about_center(
        (30.0, 30.0),
        [[0.98, 0.05], [-0.03, 1.02]],
        (2.0, -1.5),
    ));
    let mut points: Vec<((usize, usize), (usize, usize))> =
        (0..20).map(|i| ((i * 3, 60 - i * 2), (i * 2 + 5, i * 3))).collect();
    let forward = compute_matching_errors(&match_set(&points), &t, 1.0).unwrap();
    points.reverse();
    let reversed = compute_matching_errors(&match_set(&points), &t, 1.0).unwrap();
    let mut forward_sorted = forward;
    forward_sorted.sort_by(f64::total_cmp);
    let mut reversed_sorted = reversed;
    reversed_sorted.sort_by(f64::total_cmp);
    assert_eq!(forward_sorted, reversed_sorted);
}

#[test]
fn non_positive_spacing_is_rejected() {
    let ms = match_set(&[((0, 0), (0, 0))]);
    for bad in [0.0, -1.0, f64::NAN, f64::INFINITY] {
        assert!(compute_matching_errors(&ms, &Transform::identity(), bad).is_err());
    }
}

// ---------------------------------------------------- cumulative curves

#[test]
fn curve_matches_counted_fractions() {
    let curve = cumulative_curve(&[0.0, 1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
    assert_eq!(curve.fractions, vec![0.5, 0.75, 1.0]);
}

#[test]
fn curve_handles_ties_at_thresholds() {
    let curve = cumulative_curve(&[1.0, 1.0, 2.0], &[0.0, 1.0, 2.0, 3.0]).unwrap();
    assert_eq!(curve.fractions, vec![0.0, 2.0 / 3.0, 1.0, 1.0]);
}

#[test]
fn all_zero_errors_reach_one_immediately() {
    let curve = cumulative_curve(&[0.0; 5], &[0.0, 1.0, 2.0]).unwrap();
    assert_eq!(curve.fractions, vec![1.0, 1.0, 1.0]);
}

#[test]
fn empty_errors_yield_flagged_zero_curve() {
    let curve = cumulative_curve(&[], &[0.0, 1.0]).unwrap();
    assert!(curve.empty);
    assert_eq!(curve.fractions, vec![0.0, 0.0]);
}

#[test]
fn unsorted_or_non_finite_inputs_are_rejected() {
    assert!(cumulative_curve(&[1.0], &[2.0, 1.0]).is_err());
    assert!(cumulative_curve(&[1.0], &[0.0, f64::NAN]).is_err());
    assert!(cumulative_curve(&[f64::NAN], &[0.0, 1.0]).is_err());
}

#[test]
fn random_curves_are_monotone_within_bounds_and_end_at_one() {
    let mut rng = ChaCha20Rng::seed_from_u64(42);
    for _ in 0..100 {
        let errors: Vec<f64> =
            (0..rng.random_range(1..50)).map(|_| rng.random_range(0.0..20.0)).collect();
        let thresholds = default_thresholds(&errors);
        let curve = cumulative_curve(&errors, &thresholds).unwrap();
        assert!(curve.fractions.iter().all(|&f| (0.0..=1.0).contains(&f)));
        assert!(curve.fractions.windows(2).all(|w| w[0] <= w[1]), "curve must be nondecreasing");
        assert_eq!(*curve.fractions.last().unwrap(), 1.0, "default grid covers the max error");
        assert!(*curve.fractions.first().unwrap() >= 0.0);
    }
}

// ---------------------------------------------------- summaries

#[test]
fn count_quartiles_use_linear_interpolation() {
    let pairs: Vec<PairEvaluation> =
        (1..=5).map(|c| pair_eval("proposed", "affine", c, vec![0.5; c])).collect();
    let reports = summarize(&pairs).unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0].median_matches, 3.0);
    assert_eq!(reports[0].iqr_matches, (2.0, 4.0));
}

#[test]
fn summarize_groups_by_method_then_family() {
    let pairs = vec![
        pair_eval("baseline", "elastic", 4, vec![3.0; 4]),
        pair_eval("proposed", "affine", 10, vec![1.0; 10]),
        pair_eval("baseline", "affine", 5, vec![2.0; 5]),
        pair_eval("proposed", "elastic", 8, vec![4.0; 8]),
        pair_eval("baseline", "affine", 7, vec![2.5; 7]),
    ];
    let reports = summarize(&pairs).unwrap();
    let labels: Vec<(&str, &str)> =
        reports.iter().map(|r| (r.method.as_str(), r.family.as_str())).collect();
    assert_eq!(
        labels,
        vec![
            ("baseline", "affine"),
            ("baseline", "elastic"),
            ("proposed", "affine"),
            ("proposed", "elastic"),
        ]
    );
    assert_eq!(reports[0].pair_match_counts, vec![5, 7]);
    assert_eq!(reports[0].errors_mm.len(), 12);
}

#[test]
fn summarize_rejects_empty_input() {
    assert!(summarize(&[]).is_err());
}

#[test]
fn zero_match_group_reports_no_error_statistics() {
    let pairs = vec![
        pair_eval("baseline", "elastic", 0, vec![]),
        pair_eval("baseline", "elastic", 0, vec![]),
    ];
    let reports = summarize(&pairs).unwrap();
    assert_eq!(reports[0].median_matches, 0.0);
    assert_eq!(reports[0].median_error_mm, None);
    assert_eq!(reports[0].iqr_error_mm, None);
    assert!(reports[0].curve.empty);
    let table = render_text_table(&reports);
    assert!(table.contains('-'), "missing error statistics render as a dash");
}

#[test]
fn duplicating_a_pair_preserves_medians_counts_and_curve() {
    // Duplicating the same evaluated pair must not change the reported
    // statistics. Count aggregates, the error median, and the cumulative
    // curve are exactly invariant. The interpolated error quartiles can
    // shift within one gap between adjacent error values (interpolation
    // positions depend on sample size), so they get a bounded check.
    let mut rng = ChaCha20Rng::seed_from_u64(43);
    for &(k, n) in &[(1usize, 3usize), (3, 2), (4, 3), (5, 7), (8, 4)] {
        let errors: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..10.0)).collect();
        let single = vec![pair_eval("proposed", "elastic", k, errors.clone())];
        let repeated: Vec<PairEvaluation> =
            (0..n).map(|_| single[0].clone()).collect();
        let rs = summarize(&single).unwrap();
        let rr = summarize(&repeated).unwrap();
        assert_eq!(rr[0].median_matches, rs[0].median_matches);
        assert_eq!(rr[0].iqr_matches, rs[0].iqr_matches);
        assert_eq!(rr[0].median_error_mm, rs[0].median_error_mm);
        assert_eq!(rr[0].curve, rs[0].curve);

        let mut sorted = errors.clone();
        sorted.sort_by(f64::total_cmp);
        let max_gap =
            sorted.windows(2).map(|w| w[1] - w[0]).fold(0.0f64, f64::max);
        let (s1, s3) = rs[0].iqr_error_mm.unwrap();
        let (r1, r3) = rr[0].iqr_error_mm.unwrap();
        assert!((r1 - s1).abs() <= max_gap + 1e-12);
        assert!((r3 - s3).abs() <= max_gap + 1e-12);
    }
}

#[test]
fn singleton_pair_summary_repeats_its_count() {
    let reports =
        summarize(&[pair_eval("proposed", "intensity", 639, vec![0.0; 639])]).unwrap();
    assert_eq!(reports[0].median_matches, 639.0);
    assert_eq!(reports[0].iqr_matches, (639.0, 639.0));
    assert_eq!(reports[0].median_error_mm, Some(0.0));
    assert_eq!(reports[0].iqr_error_mm, Some((0.0, 0.0)));
    assert_eq!(*reports[0].curve.fractions.last().unwrap(), 1.0);
}

// ---------------------------------------------------- renderers

fn sample_reports() -> Vec<EvalReport> {
    summarize(&[
        pair_eval("proposed", "affine", 12, vec![0.4, 1.2, 0.9, 2.1]),
        pair_eval("proposed", "affine", 8, vec![0.3, 3.0]),
        pair_eval("baseline", "affine", 3, vec![5.0, 7.5]),
    ])
    .unwrap()
}

#[test]
fn text_table_is_aligned_and_complete() {
    let table = render_text_table(&sample_reports());
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("method"));
    assert!(lines[1].starts_with("baseline"));
    assert!(lines[2].starts_with("proposed"));
    // Columns align: "family" starts at the same byte offset in every line.
    let col = lines[0].find("family").unwrap();
    assert_eq!(&lines[1][col..col + 6], "affine");
    assert_eq!(&lines[2][col..col + 6], "affine");
    assert!(lines[2].contains("10.0 (9.0 - 11.0)"), "counts 8,12 -> median 10, IQR (9, 11)");
}

#[test]
fn csv_lists_one_row_per_report() {
    let reports = sample_reports();
    let mut buf = Vec::new();
    write_reports_csv(&reports, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + reports.len());
    assert_eq!(
        lines[0],
        "method,family,n_pairs,median_matches,q1_matches,q3_matches,\
         median_error_mm,q1_error_mm,q3_error_mm"
    );
    let fields: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(fields.len(), 9);
    assert_eq!(fields[0], "baseline");
    assert_eq!(fields[2], "1");
    assert_eq!(fields[3].parse::<f64>().unwrap(), 3.0);
}

#[test]
fn json_round_trips_reports_exactly() {
    let reports = sample_reports();
    let mut buf = Vec::new();
    write_reports_json(&reports, &mut buf).unwrap();
    let back: Vec<EvalReport> = serde_json::from_slice(&buf).unwrap();
    assert_eq!(back, reports);
}

#[test]
fn svg_plot_draws_one_curve_per_report() {
    let reports = sample_reports();
    let mut buf = Vec::new();
    write_cumulative_svg(&reports, &mut buf).unwrap();
    let svg = String::from_utf8(buf).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<polyline").count(), reports.len());
    assert!(svg.contains("error (mm)"));
    assert!(svg.contains("fraction of matches"));
    assert!(svg.contains("baseline / affine"));
    assert!(svg.contains("proposed / affine"));
}
