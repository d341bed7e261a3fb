//! The train / infer / evaluate / compare-baseline / plot commands.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use landmatch::baseline::{
    detect_and_describe, match_inverse_consistent, match_ratio_test, read_keypoints_csv,
    write_keypoints_csv, ClassicKeypoint,
};
use landmatch::evaluation::{
    compute_matching_errors, render_text_table, summarize, write_cumulative_svg,
    write_reports_csv, write_reports_json, EvalReport, PairEvaluation,
};
use landmatch::image_io::load_grayscale;
use landmatch::network::{load_checkpoint, ModelParams};
use landmatch::pipeline::{infer_pair, train, MatchSet, TrainOutputs};
use landmatch::transforms::project_to_reference;
use landmatch::{GrayImage, Transform};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::errors::{data, numeric, CliError, CliResult};
use crate::pairs::{self, LoadedPair};
use crate::rundir::{write_atomic, RunDir};

const PROPOSED: &str = "proposed";
const BASELINE_IC: &str = "baseline-inverse-consistency";
const BASELINE_RT: &str = "baseline-ratio-test";

// ------------------------------------------------------------------ train

/// Train on every image under the data directory (plain images or the
/// reference halves of pair directories) and leave checkpoints + a JSONL log.
pub fn train_cmd(cfg: &RunConfig, rd: &RunDir) -> CliResult<()> {
    let images = load_training_images(cfg, rd)?;
    println!("training on {} images for {} epochs", images.len(), cfg.train.epochs);

    let ck_dir = rd.checkpoints();
    let log_path = rd.logs().join("train.jsonl");
    let mut log = BufWriter::new(
        File::create(&log_path)
            .map_err(|e| data(format!("cannot create {}: {e}", log_path.display())))?,
    );
    let mut outputs =
        TrainOutputs { checkpoint_dir: Some(&ck_dir), log: Some(&mut log) };
    let outcome = train(&cfg.train, &images, None, &mut outputs)?;
    log.flush()?;

    println!(
        "completed {} epochs; log at {}",
        outcome.epochs_completed,
        log_path.display()
    );
    if outcome.diverged {
        return Err(numeric(
            "training diverged; checkpoints hold the last stable parameters",
        ));
    }
    println!("wrote checkpoint {}", ck_dir.join("model.ck").display());
    Ok(())
}

fn load_training_images(cfg: &RunConfig, rd: &RunDir) -> CliResult<Vec<GrayImage>> {
    let dir = cfg
        .data_dir
        .clone()
        .or_else(|| cfg.pairs_dir.clone())
        .unwrap_or_else(|| rd.default_pairs());
    if !dir.is_dir() {
        return Err(data(format!(
            "training data directory {} does not exist; set data_dir or run make-pairs",
            dir.display()
        )));
    }
    let mut entries: Vec<PathBuf> =
        std::fs::read_dir(&dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    entries.sort();

    let mut paths = Vec::new();
    for entry in entries {
        if entry.is_dir() {
            let reference = entry.join("reference.png");
            if reference.is_file() {
                paths.push(reference);
            }
        } else if matches!(
            entry.extension().and_then(|e| e.to_str()),
            Some("png") | Some("pgm") | Some("pnm")
        ) {
            paths.push(entry);
        }
    }
    if paths.is_empty() {
        return Err(data(format!("no training images under {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            load_grayscale(p)
                .map_err(|e| data(format!("cannot load {}: {e}", p.display())))
        })
        .collect()
}

// ------------------------------------------------------------------ infer

/// Match every pair with the trained model; one MatchSet CSV per pair.
pub fn infer_cmd(cfg: &RunConfig, rd: &RunDir) -> CliResult<()> {
    let params = load_model(cfg, rd)?;
    let loaded = load_pairs_lenient(&cfg.pairs_dir(rd))?;

    let results: Vec<(String, Result<MatchSet, CliError>)> = loaded
        .par_iter()
        .map(|p| {
            let r = infer_pair(&params, &p.reference, &p.target, &cfg.infer)
                .map_err(CliError::from);
            (p.name.clone(), r)
        })
        .collect();

    let mut total = 0usize;
    for (name, result) in results {
        let set = result.map_err(|e| CliError {
            code: e.code,
            msg: format!("inference on {name} failed: {}", e.msg),
        })?;
        total += set.len();
        let mut buf = Vec::new();
        set.write_csv(&mut buf)?;
        write_atomic(&rd.matches().join(format!("{name}.csv")), &buf)?;
    }
    println!(
        "wrote match sets for {} pairs ({} matches) to {}",
        loaded.len(),
        total,
        rd.matches().display()
    );
    Ok(())
}

fn load_model(cfg: &RunConfig, rd: &RunDir) -> CliResult<ModelParams> {
    let path = cfg.checkpoint_path(rd);
    if !path.is_file() {
        return Err(data(format!(
            "checkpoint {} does not exist; run `landmatch train` first",
            path.display()
        )));
    }
    Ok(load_checkpoint(&path)?)
}

/// Load pairs, skipping incomplete directories with a warning. Erroring out
/// only when nothing at all is usable.
fn load_pairs_lenient(pairs_dir: &Path) -> CliResult<Vec<LoadedPair>> {
    let refs = pairs::scan(pairs_dir)?;
    let mut out = Vec::new();
    for r in &refs {
        match pairs::load(r) {
            Ok(p) => out.push(p),
            Err(e) => eprintln!("warning: skipping pair {}: {}", r.name, e.msg),
        }
    }
    if out.is_empty() {
        return Err(data(format!(
            "all {} pair directories under {} were skipped",
            refs.len(),
            pairs_dir.display()
        )));
    }
    Ok(out)
}

// --------------------------------------------------------------- evaluate

/// Score the stored match sets against the known transforms and render
/// summary tables.
pub fn evaluate_cmd(cfg: &RunConfig, rd: &RunDir) -> CliResult<()> {
    let refs = pairs::scan(&cfg.pairs_dir(rd))?;
    let spacing = cfg.evaluate.spacing_mm;

    let mut evals = Vec::new();
    for r in &refs {
        let meta = match pairs::load_meta(&r.path) {
            Ok(m) => m,
            Err(e) => {
                eprintln!("warning: skipping pair {}: {}", r.name, e.msg);
                continue;
            }
        };
        let csv_path = rd.matches().join(format!("{}.csv", r.name));
        if !csv_path.is_file() {
            eprintln!(
                "warning: skipping pair {}: no match set at {}",
                r.name,
                csv_path.display()
            );
            continue;
        }
        let file = File::open(&csv_path)
            .map_err(|e| data(format!("cannot open {}: {e}", csv_path.display())))?;
        let set = MatchSet::read_csv(BufReader::new(file))?;
        let errors = compute_matching_errors(&set, &meta.transform, spacing)?;
        evals.push(PairEvaluation {
            method: PROPOSED.to_string(),
            family: meta.family.to_string(),
            match_count: set.len(),
            errors_mm: errors,
        });
    }
    if evals.is_empty() {
        return Err(data("no pairs could be evaluated"));
    }
    let reports = summarize(&evals)?;
    write_reports(rd, "evaluation", &reports)
}

fn write_reports(rd: &RunDir, stem: &str, reports: &[EvalReport]) -> CliResult<()> {
    let table = render_text_table(reports);
    print!("{table}");
    write_atomic(&rd.reports().join(format!("{stem}.txt")), table.as_bytes())?;

    let mut csv = Vec::new();
    write_reports_csv(reports, &mut csv)?;
    write_atomic(&rd.reports().join(format!("{stem}.csv")), &csv)?;

    let mut json = Vec::new();
    write_reports_json(reports, &mut json)?;
    write_atomic(&rd.reports().join(format!("{stem}.json")), &json)?;

    println!("wrote {stem}.{{txt,csv,json}} to {}", rd.reports().display());
    Ok(())
}

// ------------------------------------------------------------ comparison

/// Evaluate the trained model and both classical matching strategies on the
/// same pairs, side by side.
pub fn compare_cmd(
    cfg: &RunConfig,
    rd: &RunDir,
    import_keypoints: Option<&Path>,
) -> CliResult<()> {
    let params = load_model(cfg, rd)?;
    let loaded = load_pairs_lenient(&cfg.pairs_dir(rd))?;
    let spacing = cfg.evaluate.spacing_mm;

    struct PairOutput {
        name: String,
        evals: Vec<PairEvaluation>,
        /// Keypoints to export when they came from the detector.
        detected: Option<(Vec<ClassicKeypoint>, Vec<ClassicKeypoint>)>,
    }

    let results: Vec<Result<PairOutput, CliError>> = loaded
        .par_iter()
        .map(|p| {
            let family = p.meta.family.to_string();
            let t = &p.meta.transform;
            let mut evals = Vec::with_capacity(3);

            let set = infer_pair(&params, &p.reference, &p.target, &cfg.infer)?;
            let errors = compute_matching_errors(&set, t, spacing)?;
            evals.push(PairEvaluation {
                method: PROPOSED.to_string(),
                family: family.clone(),
                match_count: set.len(),
                errors_mm: errors,
            });

            let (kps1, kps2, detected) = match import_keypoints {
                Some(dir) => {
                    (read_keypoints(dir, &p.name, "reference")?,
                     read_keypoints(dir, &p.name, "target")?,
                     false)
                }
                None => {
                    let b = &cfg.baseline;
                    (detect_and_describe(
                        &p.reference, b.octaves, b.scales_per_octave, b.contrast_thresh)?,
                     detect_and_describe(
                        &p.target, b.octaves, b.scales_per_octave, b.contrast_thresh)?,
                     true)
                }
            };

            let ic = match_inverse_consistent(&kps1, &kps2)?;
            evals.push(keypoint_evaluation(BASELINE_IC, &family, &kps1, &kps2, &ic, t, spacing));
            let rt = match_ratio_test(&kps1, &kps2, cfg.baseline.ratio)?;
            evals.push(keypoint_evaluation(BASELINE_RT, &family, &kps1, &kps2, &rt, t, spacing));

            Ok(PairOutput {
                name: p.name.clone(),
                evals,
                detected: detected.then_some((kps1, kps2)),
            })
        })
        .collect();

    let mut evals = Vec::new();
    for result in results {
        let out = result?;
        if let Some((kps1, kps2)) = &out.detected {
            export_keypoints(rd, &out.name, "reference", kps1)?;
            export_keypoints(rd, &out.name, "target", kps2)?;
        }
        evals.extend(out.evals);
    }
    let reports = summarize(&evals)?;
    write_reports(rd, "comparison", &reports)
}

/// Spatial errors for matched classical keypoints, using their sub-pixel
/// locations directly.
fn keypoint_evaluation(
    method: &str,
    family: &str,
    kps1: &[ClassicKeypoint],
    kps2: &[ClassicKeypoint],
    matched: &[(usize, usize)],
    t: &Transform,
    spacing_mm: f64,
) -> PairEvaluation {
    let errors_mm = matched
        .iter()
        .map(|&(i, j)| {
            let p = project_to_reference(kps2[j].location, t);
            let dr = kps1[i].location.0 - p.0;
            let dc = kps1[i].location.1 - p.1;
            (dr * dr + dc * dc).sqrt() * spacing_mm
        })
        .collect();
    PairEvaluation {
        method: method.to_string(),
        family: family.to_string(),
        match_count: matched.len(),
        errors_mm,
    }
}

fn keypoints_csv_name(pair: &str, side: &str) -> String {
    format!("{pair}.{side}.csv")
}

fn read_keypoints(dir: &Path, pair: &str, side: &str) -> CliResult<Vec<ClassicKeypoint>> {
    let path = dir.join(keypoints_csv_name(pair, side));
    let file = File::open(&path)
        .map_err(|e| data(format!("cannot open imported keypoints {}: {e}", path.display())))?;
    Ok(read_keypoints_csv(BufReader::new(file))?)
}

fn export_keypoints(
    rd: &RunDir,
    pair: &str,
    side: &str,
    kps: &[ClassicKeypoint],
) -> CliResult<()> {
    let mut buf = Vec::new();
    write_keypoints_csv(kps, &mut buf)?;
    write_atomic(&rd.keypoints().join(keypoints_csv_name(pair, side)), &buf)
}

// ------------------------------------------------------------------- plot

/// Render cumulative error curves from the most informative report present.
pub fn plot_cmd(rd: &RunDir) -> CliResult<()> {
    let candidates =
        [rd.reports().join("comparison.json"), rd.reports().join("evaluation.json")];
    let source = candidates.iter().find(|p| p.is_file()).ok_or_else(|| {
        data("no report found; run evaluate or compare-baseline first")
    })?;
    let text = std::fs::read_to_string(source)
        .map_err(|e| data(format!("cannot read {}: {e}", source.display())))?;
    let reports: Vec<EvalReport> = serde_json::from_str(&text)
        .map_err(|e| data(format!("bad report {}: {e}", source.display())))?;

    let mut buf = Vec::new();
    write_cumulative_svg(&reports, &mut buf)?;
    let out = rd.plots().join("cumulative_error.svg");
    write_atomic(&out, &buf)?;
    println!("wrote {} ({} curves)", out.display(), reports.len());
    Ok(())
}
