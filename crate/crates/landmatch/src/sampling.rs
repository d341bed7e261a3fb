//! Grid-constrained landmark selection and on-the-fly ground-truth labels.
//!
//! The sampling layer has no learnable parameters. It picks at most one
//! candidate landmark per grid cell (the masked probability argmax), keeps
//! the K strongest cells, and — during training, where the warp between the
//! two images is known exactly — labels every cross-pair of landmarks by
//! projecting the target-image landmarks back into the reference image and
//! thresholding the Euclidean distance.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::image_io::BinaryMask;
use crate::network::LandmarkProbMap;
use crate::transforms::{project_to_reference, Transform};

/// Landmark candidates: integer pixel locations with their probability-map
/// values. At most one point per grid cell, every point on the valid mask,
/// listed in row-major image order.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub points: Vec<(usize, usize)>,
    pub probs: Vec<f64>,
}

impl LandmarkSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points as floating (row, col) pairs, e.g. for descriptor sampling.
    pub fn points_f64(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|&(r, c)| (r as f64, c as f64)).collect()
    }

    /// Debug export, one `row,col,prob` line per landmark.
    pub fn write_csv(&self, mut w: impl std::io::Write) -> Result<()> {
        writeln!(w, "row,col,prob")?;
        for (&(r, c), &p) in self.points.iter().zip(&self.probs) {
            writeln!(w, "{r},{c},{p}")?;
        }
        Ok(())
    }
}

/// Correspondence labels for one training pair: per-landmark "has a partner"
/// flags and the full K1 x K2 match matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub p1: Vec<u8>,
    pub p2: Vec<u8>,
    pub c: Array2<u8>,
    pub k_pos: usize,
    pub k_neg: usize,
}

/// Pick at most one landmark per `cell_px` x `cell_px` grid cell (the masked
/// argmax; ties to the lowest row-major pixel), then keep the `k` cells with
/// the highest maxima (ties to the lowest row-major cell). Cells that are
/// fully masked out contribute nothing, so fewer than `k` landmarks — or
/// none at all — is a legal outcome.
pub fn grid_sample_landmarks(
    prob_map: &LandmarkProbMap,
    mask: &BinaryMask,
    cell_px: usize,
    k: usize,
) -> Result<LandmarkSet> {
    if cell_px < 1 {
        return Err(Error::invalid("cell_px must be at least 1"));
    }
    if k < 1 {
        return Err(Error::invalid("landmark budget K must be at least 1"));
    }
    let (h, w) = prob_map.dim();
    if mask.shape() != (h, w) {
        return Err(Error::invalid(format!(
            "mask shape {:?} does not match probability map {:?}",
            mask.shape(),
            (h, w)
        )));
    }

    // (cell row-major index, best value, best point), one entry per
    // non-empty cell; cells scanned in row-major order
    let cells_w = w.div_ceil(cell_px);
    let mut cells: Vec<(usize, f64, (usize, usize))> = Vec::new();
    for cr in 0..h.div_ceil(cell_px) {
        for cc in 0..cells_w {
            let mut best: Option<(f64, (usize, usize))> = None;
            for r in cr * cell_px..((cr + 1) * cell_px).min(h) {
                for c in cc * cell_px..((cc + 1) * cell_px).min(w) {
                    if !mask.is_set(r, c) {
                        continue;
                    }
                    let v = prob_map[[r, c]];
                    // strict > keeps the first (lowest row-major) maximum
                    if best.is_none_or(|(bv, _)| v > bv) {
                        best = Some((v, (r, c)));
                    }
                }
            }
            if let Some((v, pt)) = best {
                cells.push((cr * cells_w + cc, v, pt));
            }
        }
    }

    // top-k cells by value, ties by cell index (already the sort's secondary
    // key because the vector is in index order and the sort is stable)
    cells.sort_by(|a, b| b.1.total_cmp(&a.1));
    cells.truncate(k);
    // report landmarks in row-major image order
    cells.sort_by_key(|&(_, _, pt)| pt);

    Ok(LandmarkSet {
        points: cells.iter().map(|&(_, _, pt)| pt).collect(),
        probs: cells.iter().map(|&(_, v, _)| v).collect(),
    })
}

/// Grid sampling with an unlimited cell budget: every non-empty cell
/// contributes its argmax (used at inference before probability
/// thresholding).
pub fn grid_sample_all(
    prob_map: &LandmarkProbMap,
    mask: &BinaryMask,
    cell_px: usize,
) -> Result<LandmarkSet> {
    let (h, w) = prob_map.dim();
    grid_sample_landmarks(prob_map, mask, cell_px, h.div_ceil(cell_px) * w.div_ceil(cell_px))
}

/// Label every (i, j) landmark cross-pair of a training pair. Landmark j of
/// the warped image is projected back into the reference image; the pair is
/// a match iff the Euclidean distance to landmark i is strictly below
/// `thresh_px`, the projection lands inside the image, and the reference
/// valid mask is 1 at the rounded projection. Many-to-many labels are
/// permitted.
pub fn generate_ground_truth(
    lm1: &LandmarkSet,
    lm2: &LandmarkSet,
    t: &Transform,
    thresh_px: f64,
    mask1: &BinaryMask,
) -> Result<GroundTruth> {
    if !(thresh_px > 0.0) {
        return Err(Error::invalid("thresh_px must be positive"));
    }
    let (h, w) = mask1.shape();
    let (k1, k2) = (lm1.len(), lm2.len());
    let mut c = Array2::<u8>::zeros((k1, k2));
    for (j, &(r2, c2)) in lm2.points.iter().enumerate() {
        let q = project_to_reference((r2 as f64, c2 as f64), t);
        let in_bounds =
            q.0 >= 0.0 && q.1 >= 0.0 && q.0 <= (h - 1) as f64 && q.1 <= (w - 1) as f64;
        if !in_bounds || !mask1.is_set(q.0.round() as usize, q.1.round() as usize) {
            continue;
        }
        for (i, &(r1, c1)) in lm1.points.iter().enumerate() {
            let (dr, dc) = (r1 as f64 - q.0, c1 as f64 - q.1);
            if (dr * dr + dc * dc).sqrt() < thresh_px {
                c[[i, j]] = 1;
            }
        }
    }
    let p1: Vec<u8> = (0..k1)
        .map(|i| c.row(i).iter().any(|&v| v == 1) as u8)
        .collect();
    let p2: Vec<u8> = (0..k2)
        .map(|j| c.column(j).iter().any(|&v| v == 1) as u8)
        .collect();
    let k_pos = c.iter().filter(|&&v| v == 1).count();
    Ok(GroundTruth { p1, p2, c, k_pos, k_neg: k1 * k2 - k_pos })
}
