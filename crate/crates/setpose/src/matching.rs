//! Hungarian one-to-one matching, OKS similarity, and the training loss
//! (classification + ℓ1 + OKS keypoint regression).
//!
//! Matching is a stop-gradient decision: costs are computed from detached
//! values, and only the losses built afterwards join the tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::{OksTargets, Scalar, Tape, Var};

#[derive(Clone, Debug)]
pub struct GroundTruthPose<S> {
    /// K (x, y) pairs, normalized to [0, 1].
    pub keypoints: Vec<S>,
    pub visibility: Vec<bool>,
    /// Normalized instance area, > 0.
    pub area: S,
}

impl<S: Scalar> GroundTruthPose<S> {
    pub fn new(keypoints: Vec<S>, visibility: Vec<bool>, area: S) -> Result<Self> {
        if keypoints.len() != visibility.len() * 2 {
            return Err(Error::contract(
                "ground_truth_pose",
                format!("{} coordinates for {} visibility flags", keypoints.len(), visibility.len()),
            ));
        }
        if !visibility.iter().any(|&v| v) {
            return Err(Error::contract("ground_truth_pose", "needs at least one visible keypoint"));
        }
        if area.to_f64() <= 0.0 {
            return Err(Error::contract("ground_truth_pose", "area must be positive"));
        }
        Ok(GroundTruthPose { keypoints, visibility, area })
    }

    pub fn n_keypoints(&self) -> usize {
        self.visibility.len()
    }
}

/// Loss weights (w_*), matching-cost coefficients (c_*), and focal-loss
/// shape parameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_cls: f64,
    pub w_l1: f64,
    pub w_oks: f64,
    pub c_cls: f64,
    pub c_l1: f64,
    pub c_oks: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_cls: 2.0,
            w_l1: 5.0,
            w_oks: 2.0,
            c_cls: 2.0,
            c_l1: 5.0,
            c_oks: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_cls, self.w_l1, self.w_oks, self.c_cls, self.c_l1, self.c_oks];
        if all.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("loss weights must be finite and ≥ 0".into()));
        }
        if self.c_cls + self.c_l1 + self.c_oks <= 0.0 {
            return Err(Error::Config("at least one matching cost term must be positive".into()));
        }
        Ok(())
    }
}

/// One-to-one assignment between predictions and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// (prediction index, ground-truth index), sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Object-keypoint similarity between a predicted pose (K (x,y) pairs) and a
/// ground-truth pose: mean over visible keypoints of exp(−d²/(2·area·κ²)).
pub fn oks<S: Scalar>(pred: &[S], gt: &GroundTruthPose<S>, kappas: &[S]) -> Result<S> {
    let k = gt.n_keypoints();
    if pred.len() != 2 * k || kappas.len() != k {
        return Err(Error::contract(
            "oks",
            format!("pred has {} coords, kappas {} for K={k}", pred.len(), kappas.len()),
        ));
    }
    let visible = gt.visibility.iter().filter(|&&v| v).count();
    if visible == 0 {
        return Err(Error::contract("oks", "no visible keypoints"));
    }
    let two = S::from_f64(2.0);
    let mut sim = S::zero();
    for i in 0..k {
        if !gt.visibility[i] {
            continue;
        }
        let dx = pred[2 * i] - gt.keypoints[2 * i];
        let dy = pred[2 * i + 1] - gt.keypoints[2 * i + 1];
        let denom = two * gt.area * kappas[i] * kappas[i];
        sim += (-(dx * dx + dy * dy) / denom).exp();
    }
    Ok(sim / S::from_usize(visible))
}

/// Focal classification cost of predicting probability `p` for a positive,
/// relative to predicting it for a negative (the DETR focal matching cost).
fn focal_cost(p: f64, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    let pos = alpha * (1.0 - p).powf(gamma) * (-p.ln());
    let neg = (1.0 - alpha) * p.powf(gamma) * (-(1.0 - p).ln());
    pos - neg
}

/// N×M matching-cost matrix: classification + mean visible ℓ1 + (1 − OKS).
pub fn matching_cost<S: Scalar>(
    scores: &[S],
    keypoints: &[S],
    gts: &[GroundTruthPose<S>],
    w: &LossWeights,
    kappas: &[S],
) -> Result<Vec<f64>> {
    if gts.is_empty() {
        return Err(Error::contract("matching_cost", "needs at least one ground-truth pose"));
    }
    let n = scores.len();
    let k = gts[0].n_keypoints();
    if keypoints.len() != n * 2 * k {
        return Err(Error::contract(
            "matching_cost",
            format!("{} keypoint coords for {n} predictions with K={k}", keypoints.len()),
        ));
    }
    let mut cost = vec![0.0; n * gts.len()];
    for (ni, &score) in scores.iter().enumerate() {
        let cls = focal_cost(score.to_f64(), w.focal_alpha, w.focal_gamma);
        let pred = &keypoints[ni * 2 * k..(ni + 1) * 2 * k];
        for (mi, gt) in gts.iter().enumerate() {
            if gt.n_keypoints() != k {
                return Err(Error::contract("matching_cost", "ground-truth K mismatch"));
            }
            let visible = gt.visibility.iter().filter(|&&v| v).count();
            let mut l1 = 0.0;
            for i in 0..k {
                if gt.visibility[i] {
                    l1 += (pred[2 * i] - gt.keypoints[2 * i]).to_f64().abs()
                        + (pred[2 * i + 1] - gt.keypoints[2 * i + 1]).to_f64().abs();
                }
            }
            l1 /= visible as f64;
            let sim = oks(pred, gt, kappas)?.to_f64();
            cost[ni * gts.len() + mi] = w.c_cls * cls + w.c_l1 * l1 + w.c_oks * (1.0 - sim);
        }
    }
    Ok(cost)
}

/// Minimum-cost one-to-one assignment of an N×M cost matrix (row-major).
/// Rectangular inputs leave |N−M| rows or columns unmatched.
pub fn hungarian(cost: &[f64], n: usize, m: usize) -> Result<MatchResult> {
    if cost.len() != n * m {
        return Err(Error::contract("hungarian", format!("{} entries for {n}x{m}", cost.len())));
    }
    if cost.iter().any(|c| c.is_nan()) {
        return Err(Error::contract("hungarian", "cost matrix contains NaN"));
    }
    if n == 0 || m == 0 {
        return Ok(MatchResult { pairs: Vec::new(), total_cost: 0.0 });
    }
    if n > m {
        // solve on the transpose so every row can be matched
        let mut t = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                t[j * n + i] = cost[i * m + j];
            }
        }
        let sol = hungarian(&t, m, n)?;
        let mut pairs: Vec<(usize, usize)> = sol.pairs.into_iter().map(|(a, b)| (b, a)).collect();
        pairs.sort_unstable();
        return Ok(MatchResult { pairs, total_cost: sol.total_cost });
    }

    // Augmenting-path assignment with potentials (1-indexed), n ≤ m.
    let a = |i: usize, j: usize| cost[(i - 1) * m + (j - 1)];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut row_of = vec![0usize; m + 1]; // row matched to column j
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs = Vec::with_capacity(n);
    let mut total = 0.0;
    for j in 1..=m {
        if row_of[j] != 0 {
            pairs.push((row_of[j] - 1, j - 1));
            total += a(row_of[j], j);
        }
    }
    pairs.sort_unstable();
    Ok(MatchResult { pairs, total_cost: total })
}

/// One decoder layer's predictions on the tape: score logits [N] and
/// keypoint coordinates [N, 2K].
#[derive(Clone, Copy, Debug)]
pub struct PoseSet {
    pub score_logits: Var,
    pub keypoints: Var,
}

#[derive(Clone, Debug)]
pub struct LossBreakdown {
    /// Weighted total across all layers, on the tape.
    pub total: Var,
    pub cls: f64,
    pub l1: f64,
    pub oks: f64,
    /// Assignment of the final layer (empty when there is no ground truth).
    pub final_match: Vec<(usize, usize)>,
}

fn detached_sigmoid<S: Scalar>(logits: &[S]) -> Vec<S> {
    logits
        .iter()
        .map(|&x| {
            let x = x.to_f64();
            S::from_f64(if x >= 0.0 { 1.0 / (1.0 + (-x).exp()) } else { x.exp() / (1.0 + x.exp()) })
        })
        .collect()
}

/// Sum of per-layer set losses: focal classification over all N predictions
/// (matched = positive), plus mean-visible ℓ1 and (1 − OKS) over matched
/// pairs, each averaged over matched instances. Matching is recomputed per
/// layer from detached values.
pub fn compute_losses<S: Scalar>(
    tape: &mut Tape<S>,
    pose_sets: &[PoseSet],
    gts: &[GroundTruthPose<S>],
    w: &LossWeights,
    kappas: &[S],
) -> Result<LossBreakdown> {
    w.validate()?;
    if pose_sets.is_empty() {
        return Err(Error::contract("compute_losses", "no prediction sets"));
    }
    let k = kappas.len();
    for gt in gts {
        if gt.n_keypoints() != k {
            return Err(Error::contract("compute_losses", "ground-truth K mismatch"));
        }
    }
    let mut total: Option<Var> = None;
    let mut cls_sum = 0.0;
    let mut l1_sum = 0.0;
    let mut oks_sum = 0.0;
    let mut final_match = Vec::new();

    for set in pose_sets {
        let n = tape.shape(set.score_logits).iter().product::<usize>();
        let kshape = tape.shape(set.keypoints).to_vec();
        if kshape.iter().product::<usize>() != n * 2 * k {
            return Err(Error::shape("compute_losses", &kshape, &[n, 2 * k]));
        }

        let pairs = if gts.is_empty() {
            Vec::new()
        } else {
            let probs = detached_sigmoid(tape.data(set.score_logits));
            let cost = matching_cost(&probs, tape.data(set.keypoints), gts, w, kappas)?;
            hungarian(&cost, n, gts.len())?.pairs
        };

        // classification: matched predictions are the positives
        let mut targets = vec![S::zero(); n];
        for &(p, _) in &pairs {
            targets[p] = S::one();
        }
        let norm = S::from_usize(pairs.len().max(1));
        let cls = tape.focal_bce_loss(
            set.score_logits,
            &targets,
            S::from_f64(w.focal_alpha),
            S::from_f64(w.focal_gamma),
            norm,
        )?;
        cls_sum += tape.scalar_value(cls)?.to_f64();
        let mut layer = tape.scale(cls, S::from_f64(w.w_cls))?;

        if !pairs.is_empty() {
            // ℓ1 over visible coordinates, mean per instance, mean over instances
            let mut l1_t = vec![S::zero(); n * 2 * k];
            let mut l1_w = vec![S::zero(); n * 2 * k];
            for &(p, g) in &pairs {
                let gt = &gts[g];
                let visible = gt.visibility.iter().filter(|&&v| v).count();
                let weight = S::one() / S::from_usize(visible * pairs.len());
                for i in 0..k {
                    if gt.visibility[i] {
                        let dst = p * 2 * k + 2 * i;
                        l1_t[dst] = gt.keypoints[2 * i];
                        l1_t[dst + 1] = gt.keypoints[2 * i + 1];
                        l1_w[dst] = weight;
                        l1_w[dst + 1] = weight;
                    }
                }
            }
            let l1 = tape.weighted_l1_loss(set.keypoints, &l1_t, &l1_w)?;
            l1_sum += tape.scalar_value(l1)?.to_f64();
            let l1s = tape.scale(l1, S::from_f64(w.w_l1))?;
            layer = tape.add(layer, l1s)?;

            let flat = tape.reshape(set.keypoints, vec![n, 2 * k])?;
            let rows: Vec<usize> = pairs.iter().map(|&(p, _)| p).collect();
            let matched = tape.gather_rows(flat, &rows)?;
            let mut gt_flat = Vec::with_capacity(pairs.len() * 2 * k);
            let mut vis_flags = Vec::with_capacity(pairs.len() * k);
            let mut areas = Vec::with_capacity(pairs.len());
            for &(_, g) in &pairs {
                gt_flat.extend_from_slice(&gts[g].keypoints);
                vis_flags.extend(gts[g].visibility.iter().copied());
                areas.push(gts[g].area);
            }
            let tgt = OksTargets { gt: gt_flat, vis: vis_flags, area: areas, kappas: kappas.to_vec() };
            let ol = tape.oks_loss(matched, tgt)?;
            oks_sum += tape.scalar_value(ol)?.to_f64();
            let ols = tape.scale(ol, S::from_f64(w.w_oks))?;
            layer = tape.add(layer, ols)?;
        }

        total = Some(match total {
            Some(t) => tape.add(t, layer)?,
            None => layer,
        });
        final_match = pairs;
    }

    Ok(LossBreakdown {
        total: total.expect("at least one set"),
        cls: cls_sum,
        l1: l1_sum,
        oks: oks_sum,
        final_match,
    })
}

#[cfg(test)]
mod tests;
