//! Run-directory layout and atomic file writes.
//!
//! Every command works inside one run directory:
//!
//! ```text
//! <output_dir>/
//!   config.effective   # the configuration actually used, echoed as TOML
//!   pairs/             # default location for synthesized image pairs
//!   checkpoints/       # latest.ck per epoch, model.ck when training ends
//!   logs/              # train.jsonl
//!   matches/           # one MatchSet CSV per pair
//!   keypoints/         # classical keypoints exported by compare-baseline
//!   reports/           # evaluation/comparison tables (txt, csv, json)
//!   plots/             # cumulative-error curves (svg)
//! ```

use std::path::{Path, PathBuf};

use crate::errors::{data, CliResult};

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Create the run directory and its fixed substructure.
    pub fn create(root: &Path) -> CliResult<Self> {
        let rd = Self { root: root.to_path_buf() };
        for dir in [
            rd.root.clone(),
            rd.checkpoints(),
            rd.logs(),
            rd.matches(),
            rd.keypoints(),
            rd.reports(),
            rd.plots(),
        ] {
            std::fs::create_dir_all(&dir)
                .map_err(|e| data(format!("cannot create {}: {e}", dir.display())))?;
        }
        Ok(rd)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn default_pairs(&self) -> PathBuf {
        self.root.join("pairs")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn matches(&self) -> PathBuf {
        self.root.join("matches")
    }

    pub fn keypoints(&self) -> PathBuf {
        self.root.join("keypoints")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
}

/// Path for a scratch file that will be renamed onto `path`. Keeps the final
/// extension so format-sniffing writers still work, and stays in the same
/// directory so the rename cannot cross filesystems.
pub fn scratch_path(path: &Path) -> PathBuf {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    path.with_file_name(format!(".tmp.{name}"))
}

/// Write a file atomically: scratch file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = scratch_path(path);
    std::fs::write(&tmp, bytes)
        .map_err(|e| data(format!("cannot write {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| data(format!("cannot rename {} into place: {e}", tmp.display())))?;
    Ok(())
}
