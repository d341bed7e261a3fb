//! Quantitative evaluation of match sets against known transforms: spatial
//! error via projection into the reference frame, cumulative error
//! distributions, and per-family summary tables with medians and
//! interquartile ranges.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use crate::error::{Error, Result};
use crate::pipeline::MatchSet;
use crate::stats::{quartiles, Quartiles};
use crate::transforms::{project_to_reference, Transform};

/// Fraction of matches at or below each error threshold. `empty` flags a
/// curve built from zero matches, whose fractions are all defined as 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeCurve {
    pub thresholds_mm: Vec<f64>,
    pub fractions: Vec<f64>,
    pub empty: bool,
}

/// Everything measured about one (method, family) group of evaluated pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub family: String,
    /// Accepted matches per pair, in input order.
    pub pair_match_counts: Vec<usize>,
    /// Pooled per-match spatial errors.
    pub errors_mm: Vec<f64>,
    pub median_matches: f64,
    pub iqr_matches: (f64, f64),
    /// `None` when the group produced no matches at all.
    pub median_error_mm: Option<f64>,
    pub iqr_error_mm: Option<(f64, f64)>,
    pub curve: CumulativeCurve,
}

/// One evaluated image pair, ready for aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEvaluation {
    pub method: String,
    pub family: String,
    pub match_count: usize,
    pub errors_mm: Vec<f64>,
}

/// Spatial error of every match: project pt2 through the known transform
/// into the reference frame and measure the distance to pt1, scaled to
/// millimeters.
pub fn compute_matching_errors(
    matches: &MatchSet,
    t: &Transform,
    spacing_mm: f64,
) -> Result<Vec<f64>> {
    if !(spacing_mm > 0.0 && spacing_mm.is_finite()) {
        return Err(Error::invalid(format!(
            "spacing_mm must be positive and finite, got {spacing_mm}"
        )));
    }
    Ok(matches
        .pairs
        .iter()
        .map(|p| {
            let pt2 = (p.pt2.0 as f64, p.pt2.1 as f64);
            let q = project_to_reference(pt2, t);
            let dr = p.pt1.0 as f64 - q.0;
            let dc = p.pt1.1 as f64 - q.1;
            (dr * dr + dc * dc).sqrt() * spacing_mm
        })
        .collect())
}

/// Fraction of errors at or below each threshold. Thresholds must be sorted
/// ascending. An empty error list yields all-zero fractions with the
/// `empty` flag set.
pub fn cumulative_curve(errors: &[f64], thresholds_mm: &[f64]) -> Result<CumulativeCurve> {
    if thresholds_mm.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("thresholds must be sorted ascending"));
    }
    if thresholds_mm.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("thresholds must be finite"));
    }
    if errors.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("errors must be finite"));
    }
    if errors.is_empty() {
        return Ok(CumulativeCurve {
            thresholds_mm: thresholds_mm.to_vec(),
            fractions: vec![0.0; thresholds_mm.len()],
            empty: true,
        });
    }
    let n = errors.len() as f64;
    let fractions = thresholds_mm
        .iter()
        .map(|&t| errors.iter().filter(|&&e| e <= t).count() as f64 / n)
        .collect();
    Ok(CumulativeCurve {
        thresholds_mm: thresholds_mm.to_vec(),
        fractions,
        empty: false,
    })
}

/// Even threshold grid from 0 to a hair past the largest error, so a curve
/// built from it always reaches 1.0.
pub fn default_thresholds(errors: &[f64]) -> Vec<f64> {
    let max = errors.iter().cloned().fold(0.0f64, f64::max);
    let hi = max.ceil().max(2.0);
    (0..=100).map(|i| hi * i as f64 / 100.0).collect()
}

impl EvalReport {
    /// Aggregate one (method, family) group of evaluated pairs.
    pub fn from_pairs(method: &str, family: &str, pairs: &[&PairEvaluation]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("cannot summarize zero evaluated pairs"));
        }
        let pair_match_counts: Vec<usize> = pairs.iter().map(|p| p.match_count).collect();
        let errors_mm: Vec<f64> =
            pairs.iter().flat_map(|p| p.errors_mm.iter().copied()).collect();
        let counts_f64: Vec<f64> = pair_match_counts.iter().map(|&c| c as f64).collect();
        let qc = quartiles(&counts_f64);
        let qe: Option<Quartiles> =
            (!errors_mm.is_empty()).then(|| quartiles(&errors_mm));
        let curve = cumulative_curve(&errors_mm, &default_thresholds(&errors_mm))?;
        Ok(Self {
            method: method.to_string(),
            family: family.to_string(),
            pair_match_counts,
            errors_mm,
            median_matches: qc.median,
            iqr_matches: (qc.q1, qc.q3),
            median_error_mm: qe.as_ref().map(|q| q.median),
            iqr_error_mm: qe.as_ref().map(|q| (q.q1, q.q3)),
            curve,
        })
    }
}

/// Group evaluated pairs by (method, family) and aggregate each group.
/// Output rows are sorted by method, then family.
pub fn summarize(pairs: &[PairEvaluation]) -> Result<Vec<EvalReport>> {
    if pairs.is_empty() {
        return Err(Error::invalid("cannot summarize zero evaluated pairs"));
    }
    let mut groups: BTreeMap<(String, String), Vec<&PairEvaluation>> = BTreeMap::new();
    for p in pairs {
        groups
            .entry((p.method.clone(), p.family.clone()))
            .or_default()
            .push(p);
    }
    groups
        .into_iter()
        .map(|((method, family), group)| EvalReport::from_pairs(&method, &family, &group))
        .collect()
}

// -------------------------------------------------------------- rendering

/// Aligned text table, one row per report:
/// method, family, matches median (IQR), error median (IQR).
pub fn render_text_table(reports: &[EvalReport]) -> String {
    let mut rows: Vec<[String; 4]> = vec![[
        "method".into(),
        "family".into(),
        "matches median (IQR)".into(),
        "error mm median (IQR)".into(),
    ]];
    for r in reports {
        let error_cell = match (r.median_error_mm, r.iqr_error_mm) {
            (Some(med), Some((q1, q3))) => format!("{med:.2} ({q1:.2} - {q3:.2})"),
            _ => "-".to_string(),
        };
        rows.push([
            r.method.clone(),
            r.family.clone(),
            format!(
                "{:.1} ({:.1} - {:.1})",
                r.median_matches, r.iqr_matches.0, r.iqr_matches.1
            ),
            error_cell,
        ]);
    }
    let widths: Vec<usize> = (0..4)
        .map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        for (i, cell) in row.iter().enumerate() {
            let _ = write!(out, "{:<width$}", cell, width = widths[i] + 2);
        }
        out.truncate(out.trim_end().len());
        out.push('\n');
    }
    out
}

/// Summary CSV, one row per report (curves live in the JSON form).
pub fn write_reports_csv(reports: &[EvalReport], mut w: impl Write) -> Result<()> {
    writeln!(
        w,
        "method,family,n_pairs,median_matches,q1_matches,q3_matches,\
         median_error_mm,q1_error_mm,q3_error_mm"
    )?;
    for r in reports {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.method,
            r.family,
            r.pair_match_counts.len(),
            r.median_matches,
            r.iqr_matches.0,
            r.iqr_matches.1,
            opt(r.median_error_mm),
            opt(r.iqr_error_mm.map(|q| q.0)),
            opt(r.iqr_error_mm.map(|q| q.1))
        )?;
    }
    Ok(())
}

/// Full reports (including curves) as pretty JSON.
pub fn write_reports_json(reports: &[EvalReport], mut w: impl Write) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, reports)?;
    writeln!(w)?;
    Ok(())
}

const SVG_COLORS: [&str; 6] = ["#1b6ca8", "#c1403d", "#3a923a", "#8c5fa8", "#c98a1e", "#3fa7a0"];

/// Cumulative error curves as a standalone SVG: one polyline per report,
/// axes in millimeters, legend in the top-left.
pub fn write_cumulative_svg(reports: &[EvalReport], mut w: impl Write) -> Result<()> {
    let (width, height) = (640.0, 440.0);
    let (left, right, top, bottom) = (70.0, 20.0, 20.0, 50.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let x_max = reports
        .iter()
        .flat_map(|r| r.curve.thresholds_mm.last().copied())
        .fold(2.0f64, f64::max);

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">"
    );
    let _ = writeln!(
        s,
        "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>"
    );
    // axes
    let x0 = left;
    let y0 = height - bottom;
    let _ = writeln!(
        s,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{}\" y2=\"{y0}\" stroke=\"black\"/>",
        left + plot_w
    );
    let _ = writeln!(
        s,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{top}\" stroke=\"black\"/>"
    );
    // ticks and grid: x every x_max/5, y every 0.25
    for i in 0..=5 {
        let frac = i as f64 / 5.0;
        let x = left + plot_w * frac;
        let _ = writeln!(
            s,
            "<line x1=\"{x}\" y1=\"{y0}\" x2=\"{x}\" y2=\"{}\" stroke=\"black\"/>",
            y0 + 5.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{x}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{:.1}</text>",
            y0 + 20.0,
            x_max * frac
        );
    }
    for i in 0..=4 {
        let frac = i as f64 / 4.0;
        let y = y0 - plot_h * frac;
        let _ = writeln!(
            s,
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{x0}\" y2=\"{y}\" stroke=\"black\"/>",
            x0 - 5.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">{frac:.2}</text>",
            x0 - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\">error (mm)</text>",
        left + plot_w / 2.0,
        height - 10.0
    );
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\" \
         transform=\"rotate(-90 16 {})\">fraction of matches</text>",
        top + plot_h / 2.0,
        top + plot_h / 2.0
    );

    for (i, r) in reports.iter().enumerate() {
        let color = SVG_COLORS[i % SVG_COLORS.len()];
        let points: Vec<String> = r
            .curve
            .thresholds_mm
            .iter()
            .zip(&r.curve.fractions)
            .map(|(&t, &f)| {
                let x = left + plot_w * (t / x_max).min(1.0);
                let y = y0 - plot_h * f.clamp(0.0, 1.0);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\" points=\"{}\"/>",
            points.join(" ")
        );
        // legend entry
        let ly = top + 16.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" \
             stroke-width=\"1.8\"/>",
            left + 12.0,
            left + 40.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\">{} / {}</text>",
            left + 46.0,
            ly + 4.0,
            r.method,
            r.family
        );
    }
    let _ = writeln!(s, "</svg>");
    w.write_all(s.as_bytes())?;
    Ok(())
}
