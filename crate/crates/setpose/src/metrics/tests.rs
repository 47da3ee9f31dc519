use super::*;

fn gt(coords: &[f64], area: f64) -> GroundTruthPose<f64> {
    GroundTruthPose::new(coords.to_vec(), vec![true; coords.len() / 2], area).unwrap()
}

fn pred(score: f64, coords: &[f64]) -> PosePrediction {
    PosePrediction { score, keypoints: coords.to_vec() }
}

fn single_threshold(t: f64) -> EvalConfig {
    EvalConfig { oks_thresholds: vec![t], ..EvalConfig::default() }
}

fn splitmix(state: &mut u64) -> f64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Fully independent evaluator for tiny cases: own OKS, greedy matching, and
/// O(n²) envelope integration.
fn naive_ap(items: &[ImageEval], threshold: f64, kappa: f64) -> f64 {
    let naive_oks = |p: &[f64], g: &GroundTruthPose<f64>| -> f64 {
        let k = g.visibility.len();
        let mut s = 0.0;
        let mut v = 0;
        for i in 0..k {
            if g.visibility[i] {
                v += 1;
                let d2 = (p[2 * i] - g.keypoints[2 * i]).powi(2) + (p[2 * i + 1] - g.keypoints[2 * i + 1]).powi(2);
                s += (-d2 / (2.0 * g.area * kappa * kappa)).exp();
            }
        }
        s / v as f64
    };
    let mut flat: Vec<(f64, usize, usize)> = Vec::new();
    for (ii, item) in items.iter().enumerate() {
        for (pi, p) in item.preds.iter().enumerate() {
            flat.push((p.score, ii, pi));
        }
    }
    flat.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let total_gt: usize = items.iter().map(|it| it.gts.len()).sum();
    if total_gt == 0 {
        return 0.0;
    }
    let mut claimed: Vec<Vec<bool>> = items.iter().map(|it| vec![false; it.gts.len()]).collect();
    let mut tp_flags = Vec::new();
    for &(_, ii, pi) in &flat {
        let mut best_gi = usize::MAX;
        let mut best = -1.0;
        for gi in 0..items[ii].gts.len() {
            if claimed[ii][gi] {
                continue;
            }
            let s = naive_oks(&items[ii].preds[pi].keypoints, &items[ii].gts[gi]);
            if s > best {
                best = s;
                best_gi = gi;
            }
        }
        if best_gi != usize::MAX && best >= threshold {
            claimed[ii][best_gi] = true;
            tp_flags.push(true);
        } else {
            tp_flags.push(false);
        }
    }
    let n = tp_flags.len();
    let mut ap = 0.0;
    let mut tps = 0;
    for i in 0..n {
        if tp_flags[i] {
            tps += 1;
        }
    }
    let _ = tps;
    let precision_at = |rank: usize| {
        let tp = tp_flags[..=rank].iter().filter(|&&t| t).count();
        tp as f64 / (rank + 1) as f64
    };
    for i in 0..n {
        if tp_flags[i] {
            let mut env: f64 = 0.0;
            for j in i..n {
                env = env.max(precision_at(j));
            }
            ap += env / total_gt as f64;
        }
    }
    ap
}

#[test]
fn perfect_detector_scores_one() {
    let g1 = [0.2, 0.2, 0.4, 0.4, 0.6, 0.3];
    let g2 = [0.7, 0.7, 0.8, 0.8, 0.5, 0.6];
    let items = vec![
        ImageEval {
            preds: vec![pred(1.0, &g1), pred(0.9, &g2)],
            gts: vec![gt(&g1, 0.05), gt(&g2, 0.05)],
        },
        ImageEval { preds: vec![pred(0.95, &g1)], gts: vec![gt(&g1, 0.04)] },
    ];
    let r = evaluate_ap(&items, &EvalConfig::default()).unwrap();
    assert_eq!(r.ap, 1.0);
    assert_eq!(r.ap50, 1.0);
    assert_eq!(r.ap75, 1.0);
}

#[test]
fn no_predictions_zero_ap() {
    let items = vec![ImageEval { preds: vec![], gts: vec![gt(&[0.5, 0.5], 0.05)] }];
    let r = evaluate_ap(&items, &EvalConfig::default()).unwrap();
    assert_eq!(r.ap, 0.0);
    assert_eq!(r.ap50, 0.0);
}

#[test]
fn no_images_is_contract_error() {
    assert!(evaluate_ap(&[], &EvalConfig::default()).is_err());
}

#[test]
fn hand_traced_half_ap() {
    // 1 image, 2 GTs; first pred nails gt0 (OKS 1), second misses everything
    // (OKS ≈ 0). PR: (r=0.5, p=1.0), then (r=0.5, p=0.5).
    // Envelope area = 1.0 · 0.5 = 0.5 exactly.
    let g0 = [0.2, 0.2];
    let g1 = [0.8, 0.8];
    let items = vec![ImageEval {
        preds: vec![pred(0.9, &g0), pred(0.8, &[0.45, 0.55])],
        gts: vec![gt(&g0, 0.01), gt(&g1, 0.01)],
    }];
    let r = evaluate_ap(&items, &EvalConfig::default()).unwrap();
    assert!((r.ap50 - 0.5).abs() < 1e-6, "ap50 {}", r.ap50);
    assert!((r.ap75 - 0.5).abs() < 1e-6);
    assert!((r.ap - 0.5).abs() < 1e-6);
}

#[test]
fn ap_nonincreasing_in_threshold() {
    let mut st = 7u64;
    for _ in 0..50 {
        let mut items = Vec::new();
        for _ in 0..3 {
            let n_gt = 1 + (splitmix(&mut st) * 3.0) as usize;
            let gts: Vec<_> = (0..n_gt)
                .map(|_| gt(&[splitmix(&mut st), splitmix(&mut st)], 0.02 + 0.05 * splitmix(&mut st)))
                .collect();
            let n_pred = (splitmix(&mut st) * 4.0) as usize;
            let preds: Vec<_> = (0..n_pred)
                .map(|_| {
                    let src = &gts[(splitmix(&mut st) * n_gt as f64) as usize % n_gt];
                    let dx = 0.1 * (splitmix(&mut st) - 0.5);
                    pred(
                        splitmix(&mut st),
                        &[src.keypoints[0] + dx, src.keypoints[1] + 0.1 * (splitmix(&mut st) - 0.5)],
                    )
                })
                .collect();
            items.push(ImageEval { preds, gts });
        }
        let mut prev = f64::INFINITY;
        for t in [0.5, 0.6, 0.7, 0.8, 0.9] {
            let r = evaluate_ap(&items, &single_threshold(t)).unwrap();
            assert!(r.ap <= prev + 1e-12, "t {t}: {} > {}", r.ap, prev);
            prev = r.ap;
        }
    }
}

#[test]
fn score_rank_only_dependence() {
    let items = vec![ImageEval {
        preds: vec![pred(0.9, &[0.2, 0.2]), pred(0.4, &[0.82, 0.78]), pred(0.2, &[0.5, 0.5])],
        gts: vec![gt(&[0.2, 0.2], 0.02), gt(&[0.8, 0.8], 0.02)],
    }];
    let base = evaluate_ap(&items, &EvalConfig::default()).unwrap();
    // strictly monotone transform of scores
    let transformed: Vec<ImageEval> = items
        .iter()
        .map(|it| ImageEval {
            preds: it.preds.iter().map(|p| pred(0.1 + 0.5 * p.score.powi(3), &p.keypoints)).collect(),
            gts: it.gts.clone(),
        })
        .collect();
    let moved = evaluate_ap(&transformed, &EvalConfig::default()).unwrap();
    assert_eq!(base, moved);
}

#[test]
fn matches_naive_oracle_on_small_cases() {
    let mut st = 99u64;
    let kappa = 0.1;
    for case in 0..300 {
        let n_images = 1 + (splitmix(&mut st) * 2.0) as usize;
        let mut items = Vec::new();
        for _ in 0..n_images {
            let n_gt = (splitmix(&mut st) * 4.0) as usize; // 0..=3
            let gts: Vec<_> = (0..n_gt)
                .map(|_| {
                    gt(
                        &[splitmix(&mut st), splitmix(&mut st), splitmix(&mut st), splitmix(&mut st)],
                        0.01 + 0.08 * splitmix(&mut st),
                    )
                })
                .collect();
            let n_pred = (splitmix(&mut st) * 4.0) as usize;
            let preds: Vec<_> = (0..n_pred)
                .map(|_| {
                    let mut coords = [0.0; 4];
                    if !gts.is_empty() && splitmix(&mut st) > 0.3 {
                        let src = &gts[(splitmix(&mut st) * n_gt as f64) as usize % n_gt];
                        for (c, g) in coords.iter_mut().zip(&src.keypoints) {
                            *c = g + 0.08 * (splitmix(&mut st) - 0.5);
                        }
                    } else {
                        for c in &mut coords {
                            *c = splitmix(&mut st);
                        }
                    }
                    pred(splitmix(&mut st), &coords)
                })
                .collect();
            items.push(ImageEval { preds, gts });
        }
        if items.iter().all(|it| it.gts.is_empty()) {
            continue;
        }
        for t in [0.5, 0.75, 0.9] {
            let fast = evaluate_ap(&items, &single_threshold(t)).unwrap().ap;
            let slow = naive_ap(&items, t, kappa);
            assert!((fast - slow).abs() < 1e-12, "case {case} t {t}: {fast} vs {slow}");
        }
    }
}

#[test]
fn detection_cap_truncates_low_scores() {
    let g0 = [0.3, 0.3];
    let mut items = vec![ImageEval {
        preds: vec![pred(0.9, &g0), pred(0.5, &[0.9, 0.9]), pred(0.4, &[0.7, 0.1])],
        gts: vec![gt(&g0, 0.02)],
    }];
    let mut cfg = EvalConfig::default();
    cfg.max_detections = 1;
    let capped = evaluate_ap(&items, &cfg).unwrap();
    items[0].preds.truncate(1);
    let manual = evaluate_ap(&items, &EvalConfig::default()).unwrap();
    assert_eq!(capped, manual);
    assert_eq!(capped.ap, 1.0);
}

#[test]
fn duplicate_rate_none_when_one_per_gt() {
    let g0 = [0.2, 0.2];
    let g1 = [0.8, 0.8];
    let items = vec![ImageEval {
        preds: vec![pred(0.9, &g0), pred(0.8, &g1)],
        gts: vec![gt(&g0, 0.02), gt(&g1, 0.02)],
    }];
    assert_eq!(duplicate_rate(&items, &EvalConfig::default()).unwrap(), 0.0);
}

#[test]
fn duplicate_rate_half_for_double_claim() {
    let g0 = [0.5, 0.5];
    let items = vec![ImageEval {
        preds: vec![pred(0.9, &g0), pred(0.8, &[0.51, 0.5])],
        gts: vec![gt(&g0, 0.02)],
    }];
    let r = duplicate_rate(&items, &EvalConfig::default()).unwrap();
    assert!((r - 0.5).abs() < 1e-12, "{r}");
}

#[test]
fn duplicate_rate_mixed_hand_enumeration() {
    // p0 (0.9) claims g0; p1 (0.8) lands on g0 again → duplicate;
    // p2 (0.7) claims g1; p3 (0.6) below score threshold → ignored;
    // p4 (0.75) far from both GTs (best OKS < 0.5) → counted, not duplicate.
    // duplicates/considered = 1/4.
    let g0 = [0.2, 0.2];
    let g1 = [0.8, 0.8];
    let items = vec![ImageEval {
        preds: vec![
            pred(0.9, &g0),
            pred(0.8, &[0.21, 0.2]),
            pred(0.7, &g1),
            pred(0.3, &g0),
            pred(0.75, &[0.5, 0.55]),
        ],
        gts: vec![gt(&g0, 0.01), gt(&g1, 0.01)],
    }];
    let r = duplicate_rate(&items, &EvalConfig::default()).unwrap();
    assert!((r - 0.25).abs() < 1e-12, "{r}");
}

#[test]
fn duplicate_rate_empty_inputs() {
    let items = vec![ImageEval { preds: vec![], gts: vec![] }];
    assert_eq!(duplicate_rate(&items, &EvalConfig::default()).unwrap(), 0.0);
}

#[test]
fn config_validation() {
    let mut c = EvalConfig::default();
    c.oks_thresholds = vec![0.5, 0.5];
    assert!(c.validate().is_err());
    let mut c = EvalConfig::default();
    c.oks_thresholds = vec![0.0, 0.5];
    assert!(c.validate().is_err());
    let mut c = EvalConfig::default();
    c.kappa = 0.0;
    assert!(c.validate().is_err());
    assert!(EvalConfig::default().validate().is_ok());
}
