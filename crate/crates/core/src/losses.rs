//! Training objectives: soft-IoU detection loss and endpoint-error tracking
//! loss.

use voxtrack_tape::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::grid::OccupancyGrid;

/// Level weights of the detection loss, coarsest first.
pub const LEVEL_WEIGHTS: [f64; 4] = [0.30, 0.27, 0.23, 0.20];

/// `sum(p g) / sum(p + g - p g)`; two empty inputs score 1.
pub fn soft_iou(probs: &[f64], gt: &OccupancyGrid) -> Result<f64> {
    if probs.len() != gt.len() {
        return Err(Error::Invalid(format!("soft_iou: {} probabilities for {} voxels", probs.len(), gt.len())));
    }
    let mut inter = 0.0;
    let mut union = 0.0;
    for (&p, &g) in probs.iter().zip(&gt.data) {
        let g = g as u8 as f64;
        inter += p * g;
        union += p + g - p * g;
    }
    Ok(if union == 0.0 { 1.0 } else { inter / union })
}

/// Differentiable [`soft_iou`] of `probs[N]`.
pub fn soft_iou_var(g: &Graph, probs: Var, gt: &OccupancyGrid) -> Var {
    let n = g.value(probs).len();
    assert_eq!(n, gt.len(), "soft_iou_var: size mismatch");
    let gv = g.constant(Tensor::new(vec![n], gt.as_f64()));
    let inter = g.sum(g.mul(probs, gv));
    let union = g.add_scalar(g.sub(g.sum(probs), inter), gt.count() as f64);
    if g.value(union).item() == 0.0 {
        return g.constant(Tensor::new(vec![1], vec![1.0]));
    }
    g.div_scalar(inter, union)
}

fn check_weights(n: usize, gt_levels: usize, w: &[f64]) -> Result<()> {
    if n != gt_levels || n != w.len() {
        return Err(Error::Invalid(format!(
            "detection loss: {n} predicted levels, {gt_levels} target levels, {} weights",
            w.len()
        )));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("detection loss weights sum to {s}, not 1")));
    }
    Ok(())
}

/// `sum_j w_j (1 - soft_iou_j)`.
pub fn detection_loss(probs: &[Vec<f64>], gt: &[OccupancyGrid], w: &[f64]) -> Result<f64> {
    check_weights(probs.len(), gt.len(), w)?;
    let mut loss = 0.0;
    for ((p, t), &wj) in probs.iter().zip(gt).zip(w) {
        loss += wj * (1.0 - soft_iou(p, t)?);
    }
    Ok(loss)
}

pub fn detection_loss_var(g: &Graph, probs: &[Var], gt: &[OccupancyGrid], w: &[f64]) -> Result<Var> {
    check_weights(probs.len(), gt.len(), w)?;
    let terms: Vec<Var> = probs
        .iter()
        .zip(gt)
        .zip(w)
        .map(|((&p, t), &wj)| g.scale(g.add_scalar(g.scale(soft_iou_var(g, p, t), -1.0), 1.0), wj))
        .collect();
    Ok(g.add_n(&terms))
}

/// Mean Euclidean distance in meters between two dense voxel-unit flow fields.
pub fn tracking_loss(pred: &[[f64; 3]], gt: &[[f64; 3]], l4: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Invalid(format!("tracking loss: {} vs {} voxels", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, t)| ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2) + (p[2] - t[2]).powi(2)).sqrt())
        .sum();
    Ok(total * l4 / pred.len() as f64)
}

/// Differentiable [`tracking_loss`] of `pred[N, 3]`.
pub fn tracking_loss_var(g: &Graph, pred: Var, gt: &[[f64; 3]], l4: f64) -> Var {
    let n = gt.len();
    assert_eq!(g.shape(pred), vec![n, 3], "tracking_loss_var: shape mismatch");
    let t = g.constant(Tensor::new(vec![n, 3], gt.concat()));
    g.scale(g.mean(g.row_norm(g.sub(pred, t))), l4)
}
