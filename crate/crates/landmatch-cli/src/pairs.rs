//! Synthesized image-pair directories.
//!
//! `make-pairs` writes one directory per pair:
//!
//! ```text
//! <pairs_dir>/pair_007_elastic/
//!   reference.png    # 16-bit grayscale
//!   target.png       # reference warped by the recorded transform
//!   transform.json   # family, exact transform, PNG scale, pixel spacing
//! ```
//!
//! The other commands discover pairs by scanning for such directories.

use std::path::{Path, PathBuf};

use landmatch::image_io::{load_grayscale, save_png16};
use landmatch::synthetic::textured_image;
use landmatch::transforms::{sample_transform, warp_image, TransformFamily, TransformSpec};
use landmatch::{GrayImage, Transform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::errors::{data, usage, CliResult};
use crate::rundir::{scratch_path, write_atomic, RunDir};

/// Everything needed to reproduce and evaluate one pair, stored as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairMeta {
    pub family: TransformFamily,
    pub transform: Transform,
    /// Intensity multiplier used when quantizing to 16-bit PNG.
    pub png_scale: f64,
    pub spacing_mm: f64,
}

/// A discovered pair directory, not yet loaded.
#[derive(Debug, Clone)]
pub struct PairRef {
    pub name: String,
    pub path: PathBuf,
}

/// A fully loaded pair.
pub struct LoadedPair {
    pub name: String,
    pub meta: PairMeta,
    pub reference: GrayImage,
    pub target: GrayImage,
}

/// List pair directories under `pairs_dir`, sorted by name.
pub fn scan(pairs_dir: &Path) -> CliResult<Vec<PairRef>> {
    if !pairs_dir.is_dir() {
        return Err(data(format!(
            "pairs directory {} does not exist; run make-pairs first",
            pairs_dir.display()
        )));
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(pairs_dir)? {
        let path = entry?.path();
        if !path.is_dir() {
            continue;
        }
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n.to_string(),
            None => continue,
        };
        out.push(PairRef { name, path });
    }
    out.sort_by(|a, b| a.name.cmp(&b.name));
    if out.is_empty() {
        return Err(data(format!(
            "no pair directories under {}; run make-pairs first",
            pairs_dir.display()
        )));
    }
    Ok(out)
}

/// Read just the transform metadata of a pair.
pub fn load_meta(dir: &Path) -> CliResult<PairMeta> {
    let path = dir.join("transform.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| data(format!("bad transform metadata {}: {e}", path.display())))
}

/// Load a complete pair; any missing or unreadable piece is an error the
/// caller may treat as "skip with a warning".
pub fn load(pair: &PairRef) -> CliResult<LoadedPair> {
    let meta = load_meta(&pair.path)?;
    let reference = load_grayscale(pair.path.join("reference.png"))?;
    let target = load_grayscale(pair.path.join("target.png"))?;
    Ok(LoadedPair { name: pair.name.clone(), meta, reference, target })
}

/// Save a 16-bit PNG atomically (the scratch file keeps the .png extension
/// so the encoder recognizes the format, and the sidecar is renamed along).
fn save_png16_atomic(path: &Path, img: &GrayImage, scale: f64) -> CliResult<()> {
    let tmp = scratch_path(path);
    save_png16(&tmp, img, scale)?;
    std::fs::rename(&tmp, path)?;
    std::fs::rename(tmp.with_extension("json"), path.with_extension("json"))?;
    Ok(())
}

/// The `make-pairs` command: synthesize textured reference images, draw one
/// transform per pair (families round-robin), and write pair directories.
pub fn make_pairs(cfg: &RunConfig, rd: &RunDir) -> CliResult<()> {
    let dir = cfg.pairs_dir(rd);
    std::fs::create_dir_all(&dir)
        .map_err(|e| data(format!("cannot create {}: {e}", dir.display())))?;
    let [h, w] = cfg.pairs.image_size;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.pairs.seed);

    for i in 0..cfg.pairs.count {
        let family = cfg.pairs.families[i % cfg.pairs.families.len()];
        let reference = textured_image((h, w), rng.random());
        let spec = TransformSpec::new(family, (h, w));
        let transform =
            sample_transform(&spec, &mut rng).map_err(|e| usage(e.to_string()))?;
        let target = warp_image(&reference, &transform)?;

        // One scale per pair keeps the two PNGs directly comparable and
        // avoids clipping bright jittered targets.
        let peak = reference.max_intensity().max(target.max_intensity()).max(1e-9);
        let png_scale = 60000.0 / peak;

        let pair_dir = dir.join(format!("pair_{i:03}_{family}"));
        std::fs::create_dir_all(&pair_dir)
            .map_err(|e| data(format!("cannot create {}: {e}", pair_dir.display())))?;
        save_png16_atomic(&pair_dir.join("reference.png"), &reference, png_scale)?;
        save_png16_atomic(&pair_dir.join("target.png"), &target, png_scale)?;

        let meta =
            PairMeta { family, transform, png_scale, spacing_mm: cfg.evaluate.spacing_mm };
        let json = serde_json::to_string_pretty(&meta)
            .map_err(|e| data(format!("cannot serialize transform metadata: {e}")))?;
        write_atomic(&pair_dir.join("transform.json"), json.as_bytes())?;
    }
    println!("wrote {} pairs to {}", cfg.pairs.count, dir.display());
    Ok(())
}
