//! Run configuration: one TOML file with defaults for every field, overridden
//! by command-line flags, echoed verbatim into the run directory.

use std::path::{Path, PathBuf};

use landmatch::baseline::{
    DEFAULT_CONTRAST_THRESH, DEFAULT_OCTAVES, DEFAULT_RATIO, DEFAULT_SCALES_PER_OCTAVE,
};
use landmatch::pipeline::{InferOptions, TrainConfig};
use landmatch::transforms::TransformFamily;
use serde::{Deserialize, Serialize};

use crate::errors::{usage, CliResult};
use crate::rundir;

/// Everything a run needs. An empty config file yields the defaults; a flag
/// beats the file; the effective result is archived next to the artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory receiving every artifact of this run.
    pub output_dir: PathBuf,
    /// Training images: a directory of PNG/PGM files, or a pairs directory
    /// (each pair's reference image is used). Defaults to the pairs dir.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    /// Image pairs read by infer/evaluate/compare-baseline and written by
    /// make-pairs. Defaults to `<output_dir>/pairs`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairs_dir: Option<PathBuf>,
    /// Model weights for infer/compare-baseline. Defaults to
    /// `<output_dir>/checkpoints/model.ck`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub train: TrainConfig,
    pub infer: InferOptions,
    pub pairs: PairGenConfig,
    pub evaluate: EvalSettings,
    pub baseline: BaselineSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/run"),
            data_dir: None,
            pairs_dir: None,
            checkpoint: None,
            train: TrainConfig::default(),
            infer: InferOptions::default(),
            pairs: PairGenConfig::default(),
            evaluate: EvalSettings::default(),
            baseline: BaselineSettings::default(),
        }
    }
}

/// Settings for `make-pairs`: how many synthetic pairs, their size, and
/// which transformation families to cycle through.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairGenConfig {
    pub count: usize,
    /// (rows, cols) of the generated images.
    pub image_size: [usize; 2],
    /// Families assigned round-robin over the pair index.
    pub families: Vec<TransformFamily>,
    pub seed: u64,
}

impl Default for PairGenConfig {
    fn default() -> Self {
        Self {
            count: 20,
            image_size: [96, 96],
            families: TransformFamily::TRAINING_MIX.to_vec(),
            seed: 0,
        }
    }
}

/// Settings for `evaluate` and `compare-baseline`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Physical size of one pixel; errors are reported in millimeters.
    pub spacing_mm: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { spacing_mm: 1.0 }
    }
}

/// Classical-baseline detector and matcher settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSettings {
    pub octaves: usize,
    pub scales_per_octave: usize,
    pub contrast_thresh: f64,
    /// Nearest-to-second-nearest distance ratio for the ratio test.
    pub ratio: f64,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        Self {
            octaves: DEFAULT_OCTAVES,
            scales_per_octave: DEFAULT_SCALES_PER_OCTAVE,
            contrast_thresh: DEFAULT_CONTRAST_THRESH,
            ratio: DEFAULT_RATIO,
        }
    }
}

/// Values carried by command-line flags; `None` leaves the file value alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub k: Option<usize>,
    pub cell_px: Option<usize>,
    pub m_pos: Option<f64>,
    pub m_neg: Option<f64>,
    pub thresh_landmark: Option<f64>,
}

impl RunConfig {
    /// Apply flag overrides. `--seed` drives both training and pair
    /// generation; `--cell-px` keeps training and inference grids in step.
    pub fn apply(&mut self, ov: &Overrides) {
        if let Some(dir) = &ov.output_dir {
            self.output_dir = dir.clone();
        }
        if let Some(seed) = ov.seed {
            self.train.seed = seed;
            self.pairs.seed = seed;
        }
        if let Some(epochs) = ov.epochs {
            self.train.epochs = epochs;
        }
        if let Some(k) = ov.k {
            self.train.k = k;
        }
        if let Some(cell) = ov.cell_px {
            self.train.cell_px = cell;
            self.infer.cell_px = cell;
        }
        if let Some(m) = ov.m_pos {
            self.train.m_pos = m;
        }
        if let Some(m) = ov.m_neg {
            self.train.m_neg = m;
        }
        if let Some(t) = ov.thresh_landmark {
            self.infer.thresh_landmark = t;
        }
    }

    fn validate(&self) -> CliResult<()> {
        self.train.validate().map_err(|e| usage(e.to_string()))?;
        if !(self.evaluate.spacing_mm > 0.0 && self.evaluate.spacing_mm.is_finite()) {
            return Err(usage(format!(
                "evaluate.spacing_mm must be positive, got {}",
                self.evaluate.spacing_mm
            )));
        }
        if !(self.baseline.ratio > 0.0 && self.baseline.ratio < 1.0) {
            return Err(usage(format!(
                "baseline.ratio must lie in (0, 1), got {}",
                self.baseline.ratio
            )));
        }
        if self.baseline.octaves == 0 || self.baseline.scales_per_octave == 0 {
            return Err(usage("baseline.octaves and baseline.scales_per_octave must be >= 1"));
        }
        if self.pairs.families.is_empty() {
            return Err(usage("pairs.families must not be empty"));
        }
        Ok(())
    }

    pub fn pairs_dir(&self, rd: &crate::rundir::RunDir) -> PathBuf {
        self.pairs_dir.clone().unwrap_or_else(|| rd.default_pairs())
    }

    pub fn checkpoint_path(&self, rd: &crate::rundir::RunDir) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| rd.checkpoints().join("model.ck"))
    }
}

/// Load the config file (or defaults when absent), apply overrides, validate.
pub fn load(path: Option<&Path>, ov: &Overrides) -> CliResult<RunConfig> {
    let mut cfg = match path {
        None => RunConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str(&text)
                .map_err(|e| usage(format!("config {}: {e}", p.display())))?
        }
    };
    cfg.apply(ov);
    cfg.validate()?;
    Ok(cfg)
}

/// Archive the configuration actually used into the run directory.
pub fn write_effective(cfg: &RunConfig, run_root: &Path) -> CliResult<PathBuf> {
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| usage(format!("cannot serialize effective config: {e}")))?;
    let path = run_root.join("config.effective");
    rundir::write_atomic(&path, text.as_bytes())?;
    Ok(path)
}
