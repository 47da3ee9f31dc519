//! OKS-based average precision and a duplicate-prediction diagnostic.
//!
//! Matching is the COCO keypoint-eval rule: predictions sorted by score
//! globally, each greedily taking the unmatched ground truth of highest OKS
//! in its image when that OKS clears the threshold. Precision-recall is
//! integrated exactly under the monotone precision envelope.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{oks, GroundTruthPose};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalConfig {
    /// OKS thresholds averaged into AP; strictly increasing, in (0, 1).
    pub oks_thresholds: Vec<f64>,
    /// Score cutoff for the duplicate diagnostic.
    pub score_threshold: f64,
    /// Per-image detection cap (highest scores kept).
    pub max_detections: usize,
    /// Per-keypoint OKS constant, broadcast over K.
    pub kappa: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            oks_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            score_threshold: 0.5,
            max_detections: 20,
            kappa: 0.1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.oks_thresholds.is_empty() {
            return Err(Error::Config("need at least one OKS threshold".into()));
        }
        let ok = self
            .oks_thresholds
            .windows(2)
            .all(|w| w[0] < w[1]);
        if !ok || !self.oks_thresholds.iter().all(|&t| 0.0 < t && t < 1.0) {
            return Err(Error::Config("OKS thresholds must be strictly increasing in (0, 1)".into()));
        }
        if self.kappa <= 0.0 {
            return Err(Error::Config("kappa must be positive".into()));
        }
        if self.max_detections == 0 {
            return Err(Error::Config("max_detections must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// One decoded pose prediction: confidence plus K (x, y) pairs.
#[derive(Clone, Debug)]
pub struct PosePrediction {
    pub score: f64,
    pub keypoints: Vec<f64>,
}

/// Everything the evaluator needs for one image.
#[derive(Clone, Debug, Default)]
pub struct ImageEval {
    pub preds: Vec<PosePrediction>,
    pub gts: Vec<GroundTruthPose<f64>>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct ApReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

/// (image, pred index) pairs in global evaluation order: score descending,
/// ties broken by image then index for determinism. Applies the per-image
/// detection cap.
fn global_order(items: &[ImageEval], max_det: usize) -> Vec<(usize, usize)> {
    let mut order: Vec<(usize, usize)> = Vec::new();
    for (ii, item) in items.iter().enumerate() {
        let mut idx: Vec<usize> = (0..item.preds.len()).collect();
        idx.sort_by(|&a, &b| {
            item.preds[b]
                .score
                .partial_cmp(&item.preds[a].score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        for &pi in idx.iter().take(max_det) {
            order.push((ii, pi));
        }
    }
    order.sort_by(|&(ia, pa), &(ib, pb)| {
        items[ib].preds[pb]
            .score
            .partial_cmp(&items[ia].preds[pa].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(ia.cmp(&ib))
            .then(pa.cmp(&pb))
    });
    order
}

/// OKS of every (kept prediction, gt) pair per image, computed once and
/// shared across thresholds.
fn oks_table(items: &[ImageEval], order: &[(usize, usize)], kappa: f64) -> Result<Vec<Vec<f64>>> {
    let mut table = Vec::with_capacity(order.len());
    for &(ii, pi) in order {
        let item = &items[ii];
        let mut row = Vec::with_capacity(item.gts.len());
        for gt in &item.gts {
            let kappas = vec![kappa; gt.n_keypoints()];
            row.push(oks(&item.preds[pi].keypoints, gt, &kappas)?);
        }
        table.push(row);
    }
    Ok(table)
}

/// AP at one OKS threshold: greedy matching in global score order, then the
/// exact area under the monotone precision envelope.
fn ap_at_threshold(
    items: &[ImageEval],
    order: &[(usize, usize)],
    oks_rows: &[Vec<f64>],
    threshold: f64,
    total_gt: usize,
) -> f64 {
    if total_gt == 0 {
        return 0.0;
    }
    let mut claimed: Vec<Vec<bool>> = items.iter().map(|it| vec![false; it.gts.len()]).collect();
    let mut is_tp = Vec::with_capacity(order.len());
    for (row, &(ii, _)) in oks_rows.iter().zip(order) {
        let mut best: Option<(usize, f64)> = None;
        for (gi, &sim) in row.iter().enumerate() {
            if claimed[ii][gi] {
                continue;
            }
            if best.map_or(true, |(_, b)| sim > b) {
                best = Some((gi, sim));
            }
        }
        match best {
            Some((gi, sim)) if sim >= threshold => {
                claimed[ii][gi] = true;
                is_tp.push(true);
            }
            _ => is_tp.push(false),
        }
    }
    // precision at each rank, then envelope: each true positive contributes
    // (1/total_gt) · max precision at or after its rank
    let n = is_tp.len();
    let mut precision = vec![0.0; n];
    let mut tp = 0usize;
    for i in 0..n {
        if is_tp[i] {
            tp += 1;
        }
        precision[i] = tp as f64 / (i + 1) as f64;
    }
    let mut ap = 0.0;
    let mut env = 0.0f64;
    for i in (0..n).rev() {
        env = env.max(precision[i]);
        if is_tp[i] {
            ap += env / total_gt as f64;
        }
    }
    ap
}

/// COCO-style keypoint AP: mean over the configured thresholds, plus the
/// values at 0.50 and 0.75.
pub fn evaluate_ap(items: &[ImageEval], cfg: &EvalConfig) -> Result<ApReport> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::contract("evaluate_ap", "needs at least one image"));
    }
    let order = global_order(items, cfg.max_detections);
    let oks_rows = oks_table(items, &order, cfg.kappa)?;
    let total_gt: usize = items.iter().map(|it| it.gts.len()).sum();
    let at = |t: f64| ap_at_threshold(items, &order, &oks_rows, t, total_gt);
    let mean: f64 = cfg.oks_thresholds.iter().map(|&t| at(t)).sum::<f64>() / cfg.oks_thresholds.len() as f64;
    Ok(ApReport { ap: mean, ap50: at(0.5), ap75: at(0.75) })
}

/// Fraction of above-threshold predictions whose best-OKS ground truth
/// (at OKS ≥ 0.5) was already claimed by a higher-scoring prediction.
pub fn duplicate_rate(items: &[ImageEval], cfg: &EvalConfig) -> Result<f64> {
    cfg.validate()?;
    let order = global_order(items, usize::MAX);
    let oks_rows = oks_table(items, &order, cfg.kappa)?;
    let mut claimed: Vec<Vec<bool>> = items.iter().map(|it| vec![false; it.gts.len()]).collect();
    let mut considered = 0usize;
    let mut duplicates = 0usize;
    for (row, &(ii, pi)) in oks_rows.iter().zip(&order) {
        if items[ii].preds[pi].score < cfg.score_threshold {
            continue;
        }
        considered += 1;
        let mut best: Option<(usize, f64)> = None;
        for (gi, &sim) in row.iter().enumerate() {
            if best.map_or(true, |(_, b)| sim > b) {
                best = Some((gi, sim));
            }
        }
        if let Some((gi, sim)) = best {
            if sim >= 0.5 {
                if claimed[ii][gi] {
                    duplicates += 1;
                } else {
                    claimed[ii][gi] = true;
                }
            }
        }
    }
    if considered == 0 {
        return Ok(0.0);
    }
    Ok(duplicates as f64 / considered as f64)
}

#[cfg(test)]
mod tests;
