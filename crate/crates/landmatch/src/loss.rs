//! The multi-task training objective.
//!
//! Total loss = landmark probability loss on each image + descriptor
//! matching loss on the landmark cross-pairs. The landmark term rewards
//! confident probability at every sampled location; the descriptor term is a
//! margin (hinge) loss on squared descriptor distances plus a
//! class-frequency-weighted cross-entropy on the match-head scores. All
//! functions are pure; `_with_grad` variants return analytic gradients with
//! respect to their direct inputs.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::network::DescriptorSet;
use crate::sampling::GroundTruth;

/// Probability floor inside every logarithm.
const EPS: f64 = 1e-7;

/// Per-term decomposition of one batch's loss, for logging and debugging.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub landmark_loss_i1: f64,
    pub landmark_loss_i2: f64,
    pub descriptor_loss: f64,
    pub hinge_pos: f64,
    pub hinge_neg: f64,
    pub weighted_ce: f64,
    pub total: f64,
}

/// Sub-terms of the descriptor matching loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescriptorLossParts {
    pub hinge_pos: f64,
    pub hinge_neg: f64,
    pub weighted_ce: f64,
    pub total: f64,
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

/// Mean over landmarks of (1 - p_hat) + cross-entropy(p_hat, p). Encourages
/// confident, correct probabilities at every sampled landmark. An empty
/// batch scores 0.
pub fn landmark_probability_loss(p_hat: &[f64], p: &[u8]) -> Result<f64> {
    Ok(landmark_probability_loss_with_grad(p_hat, p)?.0)
}

/// Loss plus d(loss)/d(p_hat_i).
pub fn landmark_probability_loss_with_grad(p_hat: &[f64], p: &[u8]) -> Result<(f64, Vec<f64>)> {
    if p_hat.len() != p.len() {
        return Err(Error::invalid(format!(
            "probability vector length {} does not match label length {}",
            p_hat.len(),
            p.len()
        )));
    }
    let k = p_hat.len();
    if k == 0 {
        return Ok((0.0, Vec::new()));
    }
    let inv_k = 1.0 / k as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; k];
    for i in 0..k {
        let raw = p_hat[i];
        let q = clamp_prob(raw);
        let label = p[i] as f64;
        let ce = -(label * q.ln() + (1.0 - label) * (1.0 - q).ln());
        loss += (1.0 - raw) + ce;
        // the (1 - p_hat) term always flows; the CE term only when the clamp
        // is inactive
        grad[i] = -inv_k;
        if raw == q {
            grad[i] += inv_k * (q - label) / (q * (1.0 - q));
        }
    }
    Ok((loss * inv_k, grad))
}

fn check_descriptor_shapes(
    f1: &DescriptorSet,
    f2: &DescriptorSet,
    c_hat: &Array2<f64>,
    gt: &GroundTruth,
) -> Result<()> {
    let (k1, k2) = (f1.len(), f2.len());
    if f1.dim() != f2.dim() {
        return Err(Error::invalid(format!(
            "descriptor widths differ: {} vs {}",
            f1.dim(),
            f2.dim()
        )));
    }
    if c_hat.dim() != (k1, k2) || gt.c.dim() != (k1, k2) {
        return Err(Error::invalid(format!(
            "pair matrices {:?} / {:?} do not match descriptor counts ({k1}, {k2})",
            c_hat.dim(),
            gt.c.dim()
        )));
    }
    Ok(())
}

/// Hinge loss on squared descriptor distances plus frequency-weighted
/// cross-entropy on the match-head scores.
///
/// Positive pairs are pulled until d² ≤ m_pos, negative pairs pushed until
/// d² ≥ m_neg. The cross-entropy weights the positive-class term by the
/// negative-class frequency and vice versa, so the dominant class cannot
/// drown out the rare one. Any term whose pair class is empty contributes 0.
pub fn descriptor_matching_loss(
    f1: &DescriptorSet,
    f2: &DescriptorSet,
    c_hat: &Array2<f64>,
    gt: &GroundTruth,
    m_pos: f64,
    m_neg: f64,
) -> Result<DescriptorLossParts> {
    let (parts, _, _, _) =
        descriptor_matching_loss_with_grad(f1, f2, c_hat, gt, m_pos, m_neg)?;
    Ok(parts)
}

/// Loss parts plus gradients with respect to the descriptor rows and the
/// match-score matrix.
#[allow(clippy::type_complexity)]
pub fn descriptor_matching_loss_with_grad(
    f1: &DescriptorSet,
    f2: &DescriptorSet,
    c_hat: &Array2<f64>,
    gt: &GroundTruth,
    m_pos: f64,
    m_neg: f64,
) -> Result<(DescriptorLossParts, Array2<f64>, Array2<f64>, Array2<f64>)> {
    if !(m_pos >= 0.0 && m_neg > m_pos) {
        return Err(Error::invalid(format!(
            "margins must satisfy 0 <= m_pos < m_neg, got ({m_pos}, {m_neg})"
        )));
    }
    check_descriptor_shapes(f1, f2, c_hat, gt)?;
    let (k1, k2) = (f1.len(), f2.len());
    let dim = f1.dim();
    let total_pairs = gt.k_pos + gt.k_neg;
    debug_assert_eq!(total_pairs, k1 * k2);

    let mut g_f1 = Array2::zeros((k1, dim));
    let mut g_f2 = Array2::zeros((k2, dim));
    let mut g_chat = Array2::zeros((k1, k2));
    let mut hinge_pos = 0.0;
    let mut hinge_neg = 0.0;
    let mut wce = 0.0;

    let inv_pos = if gt.k_pos > 0 { 1.0 / gt.k_pos as f64 } else { 0.0 };
    let inv_neg = if gt.k_neg > 0 { 1.0 / gt.k_neg as f64 } else { 0.0 };
    let inv_all = if total_pairs > 0 { 1.0 / total_pairs as f64 } else { 0.0 };
    // positive CE term weighted by the frequency of negatives, and vice versa
    let w_pos = gt.k_neg as f64 * inv_all;
    let w_neg = gt.k_pos as f64 * inv_all;

    for i in 0..k1 {
        let r1 = f1.vectors.row(i);
        for j in 0..k2 {
            let r2 = f2.vectors.row(j);
            let mut d2 = 0.0;
            for d in 0..dim {
                let diff = r1[d] - r2[d];
                d2 += diff * diff;
            }
            let positive = gt.c[[i, j]] == 1;
            // hinge on the squared distance; gradient 2(f1-f2) when active
            let (active, hinge_scale) = if positive {
                (d2 > m_pos, inv_pos)
            } else {
                (d2 < m_neg, -inv_neg)
            };
            if positive {
                hinge_pos += (d2 - m_pos).max(0.0) * inv_pos;
            } else {
                hinge_neg += (m_neg - d2).max(0.0) * inv_neg;
            }
            if active && hinge_scale != 0.0 {
                for d in 0..dim {
                    let g = 2.0 * (r1[d] - r2[d]) * hinge_scale;
                    g_f1[[i, d]] += g;
                    g_f2[[j, d]] -= g;
                }
            }

            let raw = c_hat[[i, j]];
            let q = clamp_prob(raw);
            if positive {
                wce += w_pos * -q.ln() * inv_all;
                if raw == q {
                    g_chat[[i, j]] = w_pos * (-1.0 / q) * inv_all;
                }
            } else {
                wce += w_neg * -(1.0 - q).ln() * inv_all;
                if raw == q {
                    g_chat[[i, j]] = w_neg * (1.0 / (1.0 - q)) * inv_all;
                }
            }
        }
    }

    let parts = DescriptorLossParts {
        hinge_pos,
        hinge_neg,
        weighted_ce: wce,
        total: hinge_pos + hinge_neg + wce,
    };
    Ok((parts, g_f1, g_f2, g_chat))
}

/// Assemble the full breakdown, rejecting non-finite components by name.
pub fn total_loss(
    landmark_loss_i1: f64,
    landmark_loss_i2: f64,
    descriptor: DescriptorLossParts,
) -> Result<LossBreakdown> {
    for (name, v) in [
        ("landmark_loss_i1", landmark_loss_i1),
        ("landmark_loss_i2", landmark_loss_i2),
        ("descriptor_loss", descriptor.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    Ok(LossBreakdown {
        landmark_loss_i1,
        landmark_loss_i2,
        descriptor_loss: descriptor.total,
        hinge_pos: descriptor.hinge_pos,
        hinge_neg: descriptor.hinge_neg,
        weighted_ce: descriptor.weighted_ce,
        total: landmark_loss_i1 + landmark_loss_i2 + descriptor.total,
    })
}
