use proptest::prelude::*;

use super::*;
use crate::numgrad::gradcheck::{central_diff_check, seeded_uniform, CheckOpts};
use crate::numgrad::{Tape, Tensor};

fn gt(coords: &[f64], vis: &[bool], area: f64) -> GroundTruthPose<f64> {
    GroundTruthPose::new(coords.to_vec(), vis.to_vec(), area).unwrap()
}

/// Minimum assignment cost by exhaustive enumeration (rows → columns).
fn brute_force_min(cost: &[f64], n: usize, m: usize) -> f64 {
    fn rec(cost: &[f64], m: usize, row: usize, n: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == n {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        for j in 0..m {
            if !used[j] {
                used[j] = true;
                rec(cost, m, row + 1, n, used, acc + cost[row * m + j], best);
                used[j] = false;
            }
        }
    }
    if n > m {
        let mut t = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                t[j * n + i] = cost[i * m + j];
            }
        }
        return brute_force_min(&t, m, n);
    }
    let mut best = f64::INFINITY;
    rec(cost, m, 0, n, &mut vec![false; m], 0.0, &mut best);
    best
}

fn splitmix(state: &mut u64) -> f64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

#[test]
fn oks_identity_is_one() {
    let g = gt(&[0.2, 0.3, 0.6, 0.7], &[true, true], 0.05);
    let v = oks(&[0.2, 0.3, 0.6, 0.7], &g, &[0.1, 0.1]).unwrap();
    assert!((v - 1.0).abs() < 1e-12);
}

#[test]
fn oks_single_keypoint_closed_form() {
    // d² = 2·area·κ² ⇒ OKS = e⁻¹
    let area = 0.04f64;
    let kappa = 0.1f64;
    let d = (2.0 * area * kappa * kappa).sqrt();
    let g = gt(&[0.5, 0.5, 0.9, 0.9], &[true, false], area);
    let v = oks(&[0.5 + d, 0.5, 0.0, 0.0], &g, &[kappa, kappa]).unwrap();
    assert!((v - (-1.0f64).exp()).abs() < 1e-10, "got {v}");
}

#[test]
fn oks_strictly_decreases_with_displacement() {
    let g = gt(&[0.5, 0.5, 0.3, 0.3], &[true, true], 0.05);
    let kappas = [0.1, 0.1];
    let mut prev = oks(&[0.5, 0.5, 0.3, 0.3], &g, &kappas).unwrap();
    for step in 1..=5 {
        let dx = step as f64 * 0.02;
        let cur = oks(&[0.5 + dx, 0.5, 0.3, 0.3], &g, &kappas).unwrap();
        assert!(cur < prev, "step {step}: {cur} !< {prev}");
        prev = cur;
    }
}

#[test]
fn oks_rejects_zero_visible() {
    assert!(GroundTruthPose::new(vec![0.1, 0.2], vec![false], 0.1).is_err());
    // bypass the constructor to hit the oks contract directly
    let g = GroundTruthPose { keypoints: vec![0.1, 0.2], visibility: vec![false], area: 0.1 };
    assert!(oks(&[0.1, 0.2], &g, &[0.1]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn oks_keypoint_permutation_covariant(seed in 0u64..10_000) {
        let mut st = seed;
        let k = 4 + (splitmix(&mut st) * 4.0) as usize;
        let coords: Vec<f64> = (0..2 * k).map(|_| splitmix(&mut st)).collect();
        let pred: Vec<f64> = coords.iter().map(|c| c + 0.1 * splitmix(&mut st)).collect();
        let vis: Vec<bool> = (0..k).map(|i| i == 0 || splitmix(&mut st) > 0.3).collect();
        let kappas: Vec<f64> = (0..k).map(|_| 0.05 + 0.2 * splitmix(&mut st)).collect();
        let g = gt(&coords, &vis, 0.07);
        let base = oks(&pred, &g, &kappas).unwrap();

        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            let j = (splitmix(&mut st) * (i + 1) as f64) as usize;
            perm.swap(i, j.min(i));
        }
        let pc: Vec<f64> = perm.iter().flat_map(|&i| [coords[2 * i], coords[2 * i + 1]]).collect();
        let pp: Vec<f64> = perm.iter().flat_map(|&i| [pred[2 * i], pred[2 * i + 1]]).collect();
        let pv: Vec<bool> = perm.iter().map(|&i| vis[i]).collect();
        let pk: Vec<f64> = perm.iter().map(|&i| kappas[i]).collect();
        let permuted = oks(&pp, &gt(&pc, &pv, 0.07), &pk).unwrap();
        prop_assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn cost_scaling_keeps_argmin(seed in 0u64..10_000) {
        let mut st = seed;
        let n = 3 + (splitmix(&mut st) * 3.0) as usize;
        let k = 3;
        let scores: Vec<f64> = (0..n).map(|_| 0.05 + 0.9 * splitmix(&mut st)).collect();
        let kpts: Vec<f64> = (0..n * 2 * k).map(|_| splitmix(&mut st)).collect();
        let gts: Vec<GroundTruthPose<f64>> = (0..n)
            .map(|_| gt(&(0..2 * k).map(|_| splitmix(&mut st)).collect::<Vec<_>>(), &[true; 3], 0.06))
            .collect();
        let kappas = [0.1; 3];
        let w = LossWeights::default();
        let mut w2 = w;
        w2.c_cls *= 3.7;
        w2.c_l1 *= 3.7;
        w2.c_oks *= 3.7;
        let c1 = matching_cost(&scores, &kpts, &gts, &w, &kappas).unwrap();
        let c2 = matching_cost(&scores, &kpts, &gts, &w2, &kappas).unwrap();
        let m1 = hungarian(&c1, n, n).unwrap();
        let m2 = hungarian(&c2, n, n).unwrap();
        prop_assert_eq!(m1.pairs, m2.pairs);
    }

    #[test]
    fn loss_total_is_nonnegative(seed in 0u64..10_000) {
        let mut st = seed;
        let (n, k) = (3usize, 2usize);
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::from_fn(vec![n], |_| 4.0 * splitmix(&mut st) - 2.0));
        let kpts = tape.leaf(Tensor::from_fn(vec![n, 2 * k], |_| splitmix(&mut st)));
        let gts = vec![
            gt(&(0..2 * k).map(|_| splitmix(&mut st)).collect::<Vec<_>>(), &[true, true], 0.05),
            gt(&(0..2 * k).map(|_| splitmix(&mut st)).collect::<Vec<_>>(), &[true, false], 0.08),
        ];
        let sets = [PoseSet { score_logits: logits, keypoints: kpts }];
        let out = compute_losses(&mut tape, &sets, &gts, &LossWeights::default(), &[0.1, 0.1]).unwrap();
        let total = tape.scalar_value(out.total).unwrap();
        prop_assert!(total >= 0.0, "total {}", total);
        prop_assert!(out.cls >= 0.0 && out.l1 >= 0.0 && out.oks >= 0.0);
    }
}

#[test]
fn matching_cost_hand_case() {
    // 2 predictions x 2 ground truths, K = 1, hand-evaluated entry by entry.
    let scores = [0.8, 0.3];
    let kpts = [0.5, 0.5, 0.2, 0.9];
    let gts = [gt(&[0.52, 0.48], &[true], 0.04), gt(&[0.25, 0.85], &[true], 0.09)];
    let kappas = [0.1];
    let w = LossWeights::default();
    let cost = matching_cost(&scores, &kpts, &gts, &w, &kappas).unwrap();
    assert_eq!(cost.len(), 4);

    let focal = |p: f64| {
        0.25 * (1.0 - p).powi(2) * (-p.ln()) - 0.75 * p * p * (-(1.0 - p).ln())
    };
    let entry = |p: f64, px: f64, py: f64, gx: f64, gy: f64, area: f64| {
        let l1 = (px - gx).abs() + (py - gy).abs();
        let d2 = (px - gx).powi(2) + (py - gy).powi(2);
        let sim = (-d2 / (2.0 * area * 0.01)).exp();
        2.0 * focal(p) + 5.0 * l1 + 2.0 * (1.0 - sim)
    };
    let expect = [
        entry(0.8, 0.5, 0.5, 0.52, 0.48, 0.04),
        entry(0.8, 0.5, 0.5, 0.25, 0.85, 0.09),
        entry(0.3, 0.2, 0.9, 0.52, 0.48, 0.04),
        entry(0.3, 0.2, 0.9, 0.25, 0.85, 0.09),
    ];
    for (a, b) in cost.iter().zip(expect) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
    // near-perfect prediction with a high score should take the diagonal
    let m = hungarian(&cost, 2, 2).unwrap();
    assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
}

#[test]
fn perfect_prediction_minimizes_its_row() {
    let scores = [0.999, 0.5];
    let g0 = [0.4, 0.4, 0.6, 0.6];
    let kpts = [0.4, 0.4, 0.6, 0.6, 0.1, 0.1, 0.2, 0.2];
    let gts = [gt(&g0, &[true, true], 0.05), gt(&[0.8, 0.8, 0.9, 0.9], &[true, true], 0.05)];
    let cost = matching_cost(&scores, &kpts, &gts, &LossWeights::default(), &[0.1, 0.1]).unwrap();
    assert!(cost[0] < cost[1]);
}

#[test]
fn hungarian_identity_matrix() {
    let cost = [0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0];
    let m = hungarian(&cost, 3, 3).unwrap();
    assert_eq!(m.pairs, vec![(0, 0), (1, 1), (2, 2)]);
    assert_eq!(m.total_cost, 0.0);
}

#[test]
fn hungarian_matches_brute_force() {
    let mut st = 0xC0FFEEu64;
    for case in 0..300 {
        let n = 2 + (splitmix(&mut st) * 6.0) as usize;
        let m = 2 + (splitmix(&mut st) * 6.0) as usize;
        let cost: Vec<f64> = (0..n * m).map(|_| splitmix(&mut st) * 10.0 - 2.0).collect();
        let sol = hungarian(&cost, n, m).unwrap();
        assert_eq!(sol.pairs.len(), n.min(m), "case {case}");
        let mut rows: Vec<usize> = sol.pairs.iter().map(|p| p.0).collect();
        let mut cols: Vec<usize> = sol.pairs.iter().map(|p| p.1).collect();
        rows.dedup();
        cols.sort_unstable();
        cols.dedup();
        assert_eq!(rows.len(), sol.pairs.len(), "unique prediction indices");
        assert_eq!(cols.len(), sol.pairs.len(), "unique gt indices");
        let direct: f64 = sol.pairs.iter().map(|&(i, j)| cost[i * m + j]).sum();
        assert!((direct - sol.total_cost).abs() < 1e-9);
        let best = brute_force_min(&cost, n, m);
        assert!((sol.total_cost - best).abs() < 1e-9, "case {case}: {} vs {}", sol.total_cost, best);
    }
}

#[test]
fn hungarian_rectangular_3x2() {
    // rows: [5,9], [1,3], [8,2] — optimum picks row1→col0 (1) + row2→col1 (2)
    let cost = [5.0, 9.0, 1.0, 3.0, 8.0, 2.0];
    let m = hungarian(&cost, 3, 2).unwrap();
    assert_eq!(m.pairs, vec![(1, 0), (2, 1)]);
    assert!((m.total_cost - 3.0).abs() < 1e-12);
    assert!((brute_force_min(&cost, 3, 2) - 3.0).abs() < 1e-12);
}

#[test]
fn hungarian_rejects_nan() {
    let cost = [0.0, f64::NAN, 1.0, 2.0];
    let err = hungarian(&cost, 2, 2).unwrap_err();
    assert!(err.to_string().contains("NaN"));
}

#[test]
fn perfect_predictions_zero_keypoint_terms() {
    let k = 2;
    let g = [
        gt(&[0.3, 0.3, 0.7, 0.7], &[true, true], 0.05),
        gt(&[0.6, 0.2, 0.1, 0.8], &[true, true], 0.05),
    ];
    let mut tape = Tape::new();
    let logits = tape.leaf(Tensor::new(vec![3], vec![8.0, 8.0, -8.0]).unwrap());
    let mut kdata = vec![0.0; 3 * 2 * k];
    kdata[..4].copy_from_slice(&g[0].keypoints);
    kdata[4..8].copy_from_slice(&g[1].keypoints);
    kdata[8..].copy_from_slice(&[0.9, 0.9, 0.9, 0.9]);
    let kpts = tape.leaf(Tensor::new(vec![3, 2 * k], kdata).unwrap());
    let sets = [PoseSet { score_logits: logits, keypoints: kpts }];
    let out = compute_losses(&mut tape, &sets, &g, &LossWeights::default(), &[0.1, 0.1]).unwrap();
    assert_eq!(out.final_match, vec![(0, 0), (1, 1)]);
    assert!(out.l1.abs() < 1e-12, "l1 {}", out.l1);
    assert!(out.oks.abs() < 1e-12, "oks {}", out.oks);
    assert!(out.cls > 0.0);
}

#[test]
fn empty_ground_truth_classification_only() {
    let mut tape = Tape::new();
    let logits = tape.leaf(Tensor::new(vec![2], vec![0.5, -1.0]).unwrap());
    let kpts = tape.leaf(seeded_uniform(vec![2, 4], 0.0, 1.0, 5));
    let sets = [PoseSet { score_logits: logits, keypoints: kpts }];
    let out = compute_losses(&mut tape, &sets, &[], &LossWeights::default(), &[0.1, 0.1]).unwrap();
    assert!(out.final_match.is_empty());
    assert_eq!(out.l1, 0.0);
    assert_eq!(out.oks, 0.0);
    assert!(out.cls > 0.0);
    let total = tape.scalar_value(out.total).unwrap();
    assert!((total - 2.0 * out.cls).abs() < 1e-12);
}

#[test]
fn deep_supervision_sums_layers() {
    let g = [gt(&[0.5, 0.5], &[true], 0.05)];
    let mut tape = Tape::new();
    let l1 = tape.leaf(Tensor::new(vec![1], vec![1.0]).unwrap());
    let k1 = tape.leaf(Tensor::new(vec![1, 2], vec![0.4, 0.4]).unwrap());
    let l2 = tape.leaf(Tensor::new(vec![1], vec![2.0]).unwrap());
    let k2 = tape.leaf(Tensor::new(vec![1, 2], vec![0.45, 0.5]).unwrap());
    let one = [PoseSet { score_logits: l1, keypoints: k1 }];
    let two = [
        PoseSet { score_logits: l1, keypoints: k1 },
        PoseSet { score_logits: l2, keypoints: k2 },
    ];
    let w = LossWeights::default();
    let a = compute_losses(&mut tape, &one, &g, &w, &[0.1]).unwrap();
    let ta = tape.scalar_value(a.total).unwrap();
    let b = compute_losses(&mut tape, &two, &g, &w, &[0.1]).unwrap();
    let tb = tape.scalar_value(b.total).unwrap();
    assert!(tb > ta, "two layers accumulate more loss");
}

#[test]
fn loss_gradient_matches_fd_with_stable_matching() {
    // predictions sit near distinct ground truths so the assignment cannot
    // flip inside the probe step; the finer step keeps the sharply curved
    // OKS exponential within truncation tolerance
    let g = [
        gt(&[0.25, 0.25, 0.35, 0.3], &[true, true], 0.1),
        gt(&[0.7, 0.75, 0.8, 0.7], &[true, true], 0.1),
    ];
    let kappas = [0.15, 0.15];
    let w = LossWeights::default();
    let logits = Tensor::new(vec![2], vec![0.6, -0.4]).unwrap();
    let kpts = Tensor::new(vec![2, 4], vec![0.27, 0.24, 0.36, 0.33, 0.68, 0.77, 0.79, 0.68]).unwrap();
    let err = central_diff_check(CheckOpts { step: 1e-4 }, &[logits, kpts], |tape, vars| {
        let sets = [PoseSet { score_logits: vars[0], keypoints: vars[1] }];
        Ok(compute_losses(tape, &sets, &g, &w, &kappas)?.total)
    })
    .unwrap();
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn weights_validation() {
    let mut w = LossWeights::default();
    w.w_l1 = -1.0;
    assert!(w.validate().is_err());
    let mut w = LossWeights::default();
    w.c_cls = 0.0;
    w.c_l1 = 0.0;
    w.c_oks = 0.0;
    assert!(w.validate().is_err());
}
