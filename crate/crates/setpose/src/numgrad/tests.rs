use std::sync::Arc;

use super::gradcheck::{central_diff_check, rel_err, seeded_uniform, CheckOpts};
use super::{AttnPattern, OksTargets, ParamStore, Tape, Tensor};
use crate::error::Error;

fn t2(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
    }
}

// ── independent oracles ───────────────────────────────────────────────────

/// Triple-loop matrix product, written without reference to the op kernels.
fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// Plain exp/normalize along the last axis, no max subtraction.
fn softmax_oracle(x: &[f64]) -> Vec<f64> {
    let z: f64 = x.iter().map(|v| v.exp()).sum();
    x.iter().map(|v| v.exp() / z).collect()
}

/// Direct four-texel bilinear formula on a channels-last map.
fn bilinear_oracle(feat: &[f64], h: usize, w: usize, c: usize, x: f64, y: f64) -> Vec<f64> {
    let px = (x * (w - 1) as f64).clamp(0.0, (w - 1) as f64);
    let py = (y * (h - 1) as f64).clamp(0.0, (h - 1) as f64);
    let x0 = (px.floor() as usize).min(w.saturating_sub(2));
    let y0 = (py.floor() as usize).min(h.saturating_sub(2));
    let (fx, fy) = (px - x0 as f64, py - y0 as f64);
    (0..c)
        .map(|ch| {
            let f = |yy: usize, xx: usize| feat[(yy * w + xx) * c + ch];
            f(y0, x0) * (1.0 - fx) * (1.0 - fy)
                + f(y0, x0 + 1) * fx * (1.0 - fy)
                + f(y0 + 1, x0) * (1.0 - fx) * fy
                + f(y0 + 1, x0 + 1) * fx * fy
        })
        .collect()
}

/// Reference multi-head attention with an explicit allowed-pair predicate.
fn attention_oracle(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    m: usize,
    n: usize,
    d: usize,
    heads: usize,
    allowed: impl Fn(usize, usize) -> bool,
) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; m * d];
    for h in 0..heads {
        for r in 0..m {
            let mut weights = vec![0.0; n];
            let mut z = 0.0;
            let mut mx = f64::NEG_INFINITY;
            for c in 0..n {
                if !allowed(r, c) {
                    continue;
                }
                let mut dot = 0.0;
                for u in 0..dh {
                    dot += q[r * d + h * dh + u] * k[c * d + h * dh + u];
                }
                mx = mx.max(dot * scale);
            }
            for c in 0..n {
                if !allowed(r, c) {
                    continue;
                }
                let mut dot = 0.0;
                for u in 0..dh {
                    dot += q[r * d + h * dh + u] * k[c * d + h * dh + u];
                }
                weights[c] = (dot * scale - mx).exp();
                z += weights[c];
            }
            for c in 0..n {
                if weights[c] == 0.0 {
                    continue;
                }
                let w = weights[c] / z;
                for u in 0..dh {
                    out[r * d + h * dh + u] += w * v[c * d + h * dh + u];
                }
            }
        }
    }
    out
}

// ── value oracles per op ──────────────────────────────────────────────────

#[test]
fn matmul_identity() {
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.constant(t2(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let i2 = tape.constant(t2(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let c = tape.matmul(a, i2).unwrap();
    assert_eq!(tape.data(c), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_known_and_random_vs_oracle() {
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.constant(t2(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(t2(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.data(c), &[19.0, 22.0, 43.0, 50.0]);

    for case in 0..20 {
        let (m, k, n) = (1 + case % 4, 1 + (case / 2) % 5, 1 + (case / 3) % 4);
        let at = seeded_uniform::<f64>(vec![m, k], -1.0, 1.0, 100 + case as u64);
        let bt = seeded_uniform::<f64>(vec![k, n], -1.0, 1.0, 200 + case as u64);
        let want = matmul_oracle(at.data(), bt.data(), m, k, n);
        let mut tape: Tape<f64> = Tape::new();
        let av = tape.constant(at);
        let bv = tape.constant(bt);
        let cv = tape.matmul(av, bv).unwrap();
        assert_close(tape.data(cv), &want, 1e-12);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![4, 2]));
    match tape.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn softmax_symmetry_and_forced_values() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(t2(&[3], &[0.0, 0.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert_close(tape.data(y), &[1.0 / 3.0; 3], 1e-12);

    let x = tape.constant(t2(&[2], &[0.0, 2.0f64.ln()]));
    let y = tape.softmax(x, 0).unwrap();
    assert_close(tape.data(y), &[1.0 / 3.0, 2.0 / 3.0], 1e-12);
}

#[test]
fn softmax_matches_exp_normalize_oracle() {
    let xt = seeded_uniform::<f64>(vec![5], -2.0, 2.0, 7);
    let want = softmax_oracle(xt.data());
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(xt);
    let y = tape.softmax(x, 0).unwrap();
    assert_close(tape.data(y), &want, 1e-6);
}

#[test]
fn softmax_rows_sum_to_one_any_axis() {
    for axis in 0..3 {
        let xt = seeded_uniform::<f64>(vec![3, 4, 2], -5.0, 5.0, 11 + axis as u64);
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(xt);
        let y = tape.softmax(x, axis).unwrap();
        let shape = tape.shape(y).to_vec();
        let data = tape.data(y);
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..len).map(|j| data[o * len * inner + j * inner + i]).sum();
                assert!((s - 1.0).abs() < 1e-5, "axis {axis} slice sums to {s}");
            }
        }
    }
}

#[test]
fn layer_norm_examples() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(t2(&[4], &[3.0, 3.0, 3.0, 3.0]));
    let g = tape.constant(t2(&[4], &[1.0; 4]));
    let b = tape.constant(t2(&[4], &[0.0; 4]));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    assert_close(tape.data(y), &[0.0; 4], 1e-9);

    let x = tape.constant(t2(&[2], &[1.0, -1.0]));
    let g = tape.constant(t2(&[2], &[1.0, 1.0]));
    let b = tape.constant(t2(&[2], &[0.0, 0.0]));
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    assert_close(tape.data(y), &[1.0, -1.0], 1e-6);
}

#[test]
fn linear_examples() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(t2(&[2], &[5.0, -2.0]));
    let w = tape.constant(t2(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(t2(&[2], &[0.0, 0.0]));
    let y = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.data(y), &[5.0, -2.0]);

    let x = tape.constant(t2(&[2], &[1.0, 1.0]));
    let w = tape.constant(t2(&[2, 2], &[1.0, 0.0, 0.0, 2.0]));
    let b = tape.constant(t2(&[2], &[1.0, 1.0]));
    let y = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.data(y), &[2.0, 3.0]);
}

#[test]
fn bilinear_sample_examples() {
    // Exactly at a grid point.
    let feat = t2(&[2, 3, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let mut tape: Tape<f64> = Tape::new();
    let f = tape.constant(feat.clone());
    let p = tape.constant(t2(&[2], &[0.5, 0.0])); // x = middle column, y = top row
    let y = tape.bilinear_sample(f, p).unwrap();
    assert_close(tape.data(y), &[2.0], 1e-12);

    // Center of a 2x2 map = mean of the four texels.
    let feat = t2(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
    let f = tape.constant(feat);
    let p = tape.constant(t2(&[2], &[0.5, 0.5]));
    let y = tape.bilinear_sample(f, p).unwrap();
    assert_close(tape.data(y), &[2.5], 1e-12);

    // Arbitrary point on a random 4x4 2-channel map vs the direct formula.
    let feat = seeded_uniform::<f64>(vec![4, 4, 2], -1.0, 1.0, 42);
    let want = bilinear_oracle(feat.data(), 4, 4, 2, 0.37, 0.81);
    let f = tape.constant(feat);
    let p = tape.constant(t2(&[2], &[0.37, 0.81]));
    let y = tape.bilinear_sample(f, p).unwrap();
    assert_close(tape.data(y), &want, 1e-6);

    // Out-of-range points clamp to the border.
    let feat = t2(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
    let f = tape.constant(feat);
    let p = tape.constant(t2(&[2], &[-3.0, 2.0]));
    let y = tape.bilinear_sample(f, p).unwrap();
    assert_close(tape.data(y), &[3.0], 1e-12);
}

#[test]
fn backward_square_sum_gives_two_x() {
    let mut tape: Tape<f64> = Tape::new();
    let xt = seeded_uniform::<f64>(vec![5], -1.0, 1.0, 3);
    let x = tape.leaf(xt.clone());
    let sq = tape.mul(x, x).unwrap();
    let y = tape.sum(sq).unwrap();
    tape.backward(y).unwrap();
    let want: Vec<f64> = xt.data().iter().map(|v| 2.0 * v).collect();
    assert_close(tape.grad(x).unwrap(), &want, 1e-12);
}

#[test]
fn backward_accumulates_without_reset_and_skips_constants() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf(t2(&[2], &[1.0, 2.0]));
    let c = tape.constant(t2(&[2], &[5.0, 5.0]));
    let s = tape.add(x, c).unwrap();
    let y = tape.sum(s).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    assert!(tape.grad(c).is_none(), "constant must not get a grad buffer");
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0], "second backward accumulates");
    tape.zero_grad();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf(t2(&[2], &[1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(Error::Contract { .. })));
}

#[test]
fn shared_subexpression_gradient_matches_path_enumeration() {
    // Scalar DAG with shared nodes: every edge carries a local derivative;
    // dy/dx must equal the sum over all x→y paths of the product of edge
    // derivatives. Enumerate paths explicitly as the oracle.
    #[derive(Clone)]
    enum NodeOp {
        Input,
        Add(usize, usize),
        Mul(usize, usize),
        Scale(usize, f64),
    }

    for seed in 0..30u64 {
        let mut ops: Vec<NodeOp> = vec![NodeOp::Input];
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        let n_nodes = 4 + (next() % 5) as usize; // ≤ 8 nodes
        for i in 1..n_nodes {
            let a = (next() as usize) % i;
            let b = (next() as usize) % i;
            let op = match next() % 3 {
                0 => NodeOp::Add(a, b),
                1 => NodeOp::Mul(a, b),
                _ => NodeOp::Scale(a, ((next() % 7) as f64 - 3.0) / 2.0),
            };
            ops.push(op);
        }

        // Forward values.
        let x0 = 0.7 + (seed as f64) * 0.01;
        let mut vals = vec![0.0; n_nodes];
        vals[0] = x0;
        for i in 1..n_nodes {
            vals[i] = match ops[i] {
                NodeOp::Input => unreachable!(),
                NodeOp::Add(a, b) => vals[a] + vals[b],
                NodeOp::Mul(a, b) => vals[a] * vals[b],
                NodeOp::Scale(a, c) => vals[a] * c,
            };
        }

        // Oracle: enumerate all paths from node 0 to the last node.
        fn paths(ops: &[NodeOp], vals: &[f64], from: usize, to: usize) -> f64 {
            if from == to {
                return 1.0;
            }
            let mut total = 0.0;
            for (i, op) in ops.iter().enumerate().skip(from + 1).take(to - from) {
                let partials: Vec<(usize, f64)> = match *op {
                    NodeOp::Input => vec![],
                    NodeOp::Add(a, b) => vec![(a, 1.0), (b, 1.0)],
                    NodeOp::Mul(a, b) => vec![(a, vals[b]), (b, vals[a])],
                    NodeOp::Scale(a, c) => vec![(a, c)],
                };
                for (parent, partial) in partials {
                    if parent == from {
                        total += partial * paths(ops, vals, i, to);
                    }
                }
            }
            total
        }
        let want = paths(&ops, &vals, 0, n_nodes - 1);

        // Tape version.
        let mut tape: Tape<f64> = Tape::new();
        let mut vars = vec![tape.leaf(Tensor::scalar(x0))];
        for op in ops.iter().skip(1) {
            let v = match *op {
                NodeOp::Input => unreachable!(),
                NodeOp::Add(a, b) => tape.add(vars[a], vars[b]).unwrap(),
                NodeOp::Mul(a, b) => tape.mul(vars[a], vars[b]).unwrap(),
                NodeOp::Scale(a, c) => tape.scale(vars[a], c).unwrap(),
            };
            vars.push(v);
        }
        let y = *vars.last().unwrap();
        tape.backward(y).unwrap();
        let got = tape.grad(vars[0]).unwrap()[0];
        assert!(
            rel_err(got, want) < 1e-10,
            "seed {seed}: backprop {got} vs path enumeration {want}"
        );
    }
}

#[test]
fn sdpa_matches_attention_oracle_for_all_patterns() {
    let (m, d, heads) = (6, 8, 2);
    let qt = seeded_uniform::<f64>(vec![m, d], -1.0, 1.0, 1);
    let kt = seeded_uniform::<f64>(vec![m, d], -1.0, 1.0, 2);
    let vt = seeded_uniform::<f64>(vec![m, d], -1.0, 1.0, 3);

    // Dense.
    let mut tape: Tape<f64> = Tape::new();
    let (q, k, v) = (tape.constant(qt.clone()), tape.constant(kt.clone()), tape.constant(vt.clone()));
    let out = tape.sdpa(q, k, v, heads, Arc::new(AttnPattern::full(m, m))).unwrap();
    let want = attention_oracle(qt.data(), kt.data(), vt.data(), m, m, d, heads, |_, _| true);
    assert_close(tape.data(out), &want, 1e-9);

    // Disjoint groups {0,1,2} {3,4,5}.
    let pat = AttnPattern::from_groups(m, &[vec![0, 1, 2], vec![3, 4, 5]]).unwrap();
    let out = tape.sdpa(q, k, v, heads, Arc::new(pat)).unwrap();
    let want = attention_oracle(qt.data(), kt.data(), vt.data(), m, m, d, heads, |a, b| (a < 3) == (b < 3));
    assert_close(tape.data(out), &want, 1e-9);

    // Arbitrary mask: parity-compatible pairs plus the diagonal.
    let allow = |a: usize, b: usize| a == b || (a + b) % 2 == 0;
    let rows: Vec<Vec<u32>> = (0..m)
        .map(|a| (0..m).filter(|&b| allow(a, b)).map(|b| b as u32).collect())
        .collect();
    let pat = AttnPattern::from_allowed(m, m, rows).unwrap();
    let out = tape.sdpa(q, k, v, heads, Arc::new(pat)).unwrap();
    let want = attention_oracle(qt.data(), kt.data(), vt.data(), m, m, d, heads, allow);
    assert_close(tape.data(out), &want, 1e-9);
}

#[test]
fn attn_pattern_rejects_empty_rows_and_counts_entries() {
    assert!(AttnPattern::from_allowed(2, 2, vec![vec![0], vec![]]).is_err());
    let pat = AttnPattern::from_allowed(2, 3, vec![vec![0, 2], vec![1]]).unwrap();
    assert_eq!(pat.entries(), 3);
    assert_eq!(AttnPattern::full(4, 5).entries(), 20);
    assert!(AttnPattern::from_groups(3, &[vec![0, 1]]).is_err(), "uncovered row");
    assert!(AttnPattern::from_groups(3, &[vec![0, 1], vec![1, 2]]).is_err(), "overlap");
}

#[test]
fn msda_matches_manual_weighted_sampling() {
    let levels = [(3usize, 4usize), (2usize, 2usize)];
    let p_total = 3 * 4 + 2 * 2;
    let (d, heads, pts, q_count) = (6, 2, 2, 3);
    let nl = levels.len();
    let vals = seeded_uniform::<f64>(vec![p_total, d], -1.0, 1.0, 21);
    let pos = seeded_uniform::<f64>(vec![q_count, heads * nl * pts * 2], 0.05, 0.95, 22);
    let wts = seeded_uniform::<f64>(vec![q_count, heads * nl * pts], 0.1, 1.0, 23);

    let dh = d / heads;
    let mut want = vec![0.0; q_count * d];
    for q in 0..q_count {
        for h in 0..heads {
            for l in 0..nl {
                let (lh, lw) = levels[l];
                let base: usize = levels[..l].iter().map(|&(a, b)| a * b).sum();
                for s in 0..pts {
                    let idx = ((q * heads + h) * nl + l) * pts + s;
                    let w = wts.data()[idx];
                    let level_rows = lh * lw;
                    let level: Vec<f64> = (0..level_rows * dh)
                        .map(|i| {
                            let row = i / dh;
                            let col = h * dh + i % dh;
                            vals.data()[(base + row) * d + col]
                        })
                        .collect();
                    let sample = bilinear_oracle(&level, lh, lw, dh, pos.data()[2 * idx], pos.data()[2 * idx + 1]);
                    for u in 0..dh {
                        want[q * d + h * dh + u] += w * sample[u];
                    }
                }
            }
        }
    }

    let mut tape: Tape<f64> = Tape::new();
    let v = tape.constant(vals);
    let p = tape.constant(pos);
    let w = tape.constant(wts);
    let out = tape.msda(v, p, w, &levels, heads).unwrap();
    assert_close(tape.data(out), &want, 1e-9);
}

#[test]
fn conv2d_matches_direct_loops() {
    let (h, w, ci, co, kh, kw) = (5, 4, 2, 3, 3, 3);
    let xt = seeded_uniform::<f64>(vec![h, w, ci], -1.0, 1.0, 31);
    let wt = seeded_uniform::<f64>(vec![kh, kw, ci, co], -1.0, 1.0, 32);
    let bt = seeded_uniform::<f64>(vec![co], -1.0, 1.0, 33);
    for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut want = vec![0.0; oh * ow * co];
        for oy in 0..oh {
            for ox in 0..ow {
                for c_out in 0..co {
                    let mut acc = bt.data()[c_out];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for c_in in 0..ci {
                                acc += xt.data()[(iy as usize * w + ix as usize) * ci + c_in]
                                    * wt.data()[((ky * kw + kx) * ci + c_in) * co + c_out];
                            }
                        }
                    }
                    want[(oy * ow + ox) * co + c_out] = acc;
                }
            }
        }
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(xt.clone());
        let wv = tape.constant(wt.clone());
        let b = tape.constant(bt.clone());
        let y = tape.conv2d(x, wv, b, stride, pad).unwrap();
        assert_eq!(tape.shape(y), &[oh, ow, co]);
        assert_close(tape.data(y), &want, 1e-9);
    }
}

#[test]
fn focal_bce_matches_naive_formula() {
    let (alpha, gamma) = (0.25, 2.0);
    let xt = seeded_uniform::<f64>(vec![7], -2.0, 2.0, 41);
    let targets = [1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0];
    let mut want = 0.0;
    for (&x, &t) in xt.data().iter().zip(&targets) {
        let p = 1.0 / (1.0 + (-x).exp());
        want += if t > 0.5 {
            -alpha * (1.0 - p).powi(2) * p.ln()
        } else {
            -(1.0 - alpha) * p.powi(2) * (1.0 - p).ln()
        };
    }
    want /= 3.0;
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(xt);
    let y = tape.focal_bce_loss(x, &targets, alpha, gamma, 3.0).unwrap();
    assert!((tape.data(y)[0] - want).abs() < 1e-9);
}

#[test]
fn oks_loss_matches_naive_formula() {
    let m = 2;
    let k = 3;
    let pred = seeded_uniform::<f64>(vec![m, k, 2], 0.2, 0.8, 51);
    let gt = seeded_uniform::<f64>(vec![m, k, 2], 0.2, 0.8, 52);
    let vis = vec![true, true, false, true, true, true];
    let area = vec![0.04, 0.09];
    let kappas = vec![0.1, 0.15, 0.2];
    let mut want = 0.0;
    for i in 0..m {
        let mut sim = 0.0;
        let mut nv = 0.0;
        for j in 0..k {
            if !vis[i * k + j] {
                continue;
            }
            let dx = pred.data()[(i * k + j) * 2] - gt.data()[(i * k + j) * 2];
            let dy = pred.data()[(i * k + j) * 2 + 1] - gt.data()[(i * k + j) * 2 + 1];
            sim += (-(dx * dx + dy * dy) / (2.0 * area[i] * kappas[j] * kappas[j])).exp();
            nv += 1.0;
        }
        want += 1.0 - sim / nv;
    }
    want /= m as f64;
    let mut tape: Tape<f64> = Tape::new();
    let p = tape.constant(pred);
    let tgt = OksTargets { gt: gt.data().to_vec(), vis, area, kappas };
    let y = tape.oks_loss(p, tgt).unwrap();
    assert!((tape.data(y)[0] - want).abs() < 1e-12);
}

#[test]
fn gather_concat_slice_round_trip() {
    let mut tape: Tape<f64> = Tape::new();
    let xt = seeded_uniform::<f64>(vec![5, 3], -1.0, 1.0, 61);
    let x = tape.constant(xt.clone());
    let top = tape.slice_rows(x, 0, 2).unwrap();
    let rest = tape.slice_rows(x, 2, 3).unwrap();
    let back = tape.concat_rows(&[top, rest]).unwrap();
    assert_eq!(tape.data(back), xt.data());
    let picked = tape.gather_rows(x, &[4, 0, 4]).unwrap();
    assert_eq!(&tape.data(picked)[..3], &xt.data()[12..15]);
    assert_eq!(&tape.data(picked)[3..6], &xt.data()[0..3]);
}

#[test]
fn param_binding_is_cached_and_grads_accumulate_across_uses() {
    let mut store: ParamStore<f64> = ParamStore::new();
    let w = store.add("w", t2(&[2], &[0.5, -0.25])).unwrap();
    let mut tape: Tape<f64> = Tape::new();
    let v1 = tape.param(&store, w);
    let v2 = tape.param(&store, w);
    assert_eq!(v1, v2, "same parameter binds to one node");
    // y = sum(w ⊙ w) through two *separate* uses of the bound node.
    let prod = tape.mul(v1, v2).unwrap();
    let y = tape.sum(prod).unwrap();
    tape.backward(y).unwrap();
    assert_close(tape.param_grad(w).unwrap(), &[1.0, -0.5], 1e-12);
}

#[test]
fn inference_tape_rejects_backward() {
    let mut tape: Tape<f64> = Tape::inference();
    let x = tape.leaf(Tensor::scalar(2.0));
    let y = tape.mul(x, x).unwrap();
    assert!(tape.backward(y).is_err());
}

// ── finite-difference sweeps (small; the acceptance suite runs 100 cases) ──

#[test]
fn gradients_elementwise_and_reductions() {
    let opts = CheckOpts::default();
    for seed in 0..5 {
        let a = seeded_uniform::<f64>(vec![3, 2], -1.0, 1.0, 70 + seed);
        let b = seeded_uniform::<f64>(vec![3, 2], -1.0, 1.0, 80 + seed);
        let err = central_diff_check(opts, &[a.clone(), b.clone()], |t, v| {
            let s = t.add(v[0], v[1])?;
            let m = t.mul(s, v[0])?;
            let d = t.sub(m, v[1])?;
            let sc = t.scale(d, 0.7)?;
            let sg = t.sigmoid(sc)?;
            t.mean(sg)
        })
        .unwrap();
        assert!(err < 1e-4, "elementwise chain err {err}");

        // ReLU away from the kink.
        let shifted = Tensor::new(
            vec![3, 2],
            a.data().iter().map(|v| v + if *v >= 0.0 { 0.5 } else { -0.5 }).collect(),
        )
        .unwrap();
        let err = central_diff_check(opts, &[shifted], |t, v| {
            let r = t.relu(v[0])?;
            t.sum(r)
        })
        .unwrap();
        assert!(err < 1e-4, "relu err {err}");
    }
}

#[test]
fn gradients_matmul_linear_layernorm_softmax() {
    let opts = CheckOpts::default();
    for seed in 0..5 {
        let a = seeded_uniform::<f64>(vec![3, 4], -1.0, 1.0, 90 + seed);
        let b = seeded_uniform::<f64>(vec![4, 2], -1.0, 1.0, 95 + seed);
        let err = central_diff_check(opts, &[a, b], |t, v| {
            let c = t.matmul(v[0], v[1])?;
            t.sum(c)
        })
        .unwrap();
        assert!(err < 1e-4, "matmul err {err}");

        let x = seeded_uniform::<f64>(vec![2, 3], -1.0, 1.0, 100 + seed);
        let g = seeded_uniform::<f64>(vec![3], 0.5, 1.5, 105 + seed);
        let be = seeded_uniform::<f64>(vec![3], -0.5, 0.5, 110 + seed);
        let err = central_diff_check(opts, &[x, g, be], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let s = t.softmax(y, 1)?;
            let w = t.mul(s, s)?;
            t.sum(w)
        })
        .unwrap();
        assert!(err < 1e-4, "layer_norm+softmax err {err}");
    }
}

#[test]
fn gradients_sdpa_msda_conv_losses() {
    let opts = CheckOpts::default();
    let m = 4;
    let d = 4;
    let q = seeded_uniform::<f64>(vec![m, d], -1.0, 1.0, 120);
    let k = seeded_uniform::<f64>(vec![m, d], -1.0, 1.0, 121);
    let v = seeded_uniform::<f64>(vec![m, d], -1.0, 1.0, 122);
    let pat = Arc::new(AttnPattern::from_groups(m, &[vec![0, 1], vec![2, 3]]).unwrap());
    let err = central_diff_check(opts, &[q, k, v], |t, vars| {
        let o = t.sdpa(vars[0], vars[1], vars[2], 2, pat.clone())?;
        let sq = t.mul(o, o)?;
        t.sum(sq)
    })
    .unwrap();
    assert!(err < 1e-4, "sdpa err {err}");

    let levels = [(3usize, 3usize)];
    let vals = seeded_uniform::<f64>(vec![9, 4], -1.0, 1.0, 130);
    let pos = seeded_uniform::<f64>(vec![2, 2 * 1 * 2 * 2], 0.15, 0.85, 131);
    let wts = seeded_uniform::<f64>(vec![2, 2 * 1 * 2], 0.2, 0.8, 132);
    let err = central_diff_check(opts, &[vals, pos, wts], |t, vars| {
        let o = t.msda(vars[0], vars[1], vars[2], &levels, 2)?;
        let sq = t.mul(o, o)?;
        t.sum(sq)
    })
    .unwrap();
    assert!(err < 1e-4, "msda err {err}");

    let x = seeded_uniform::<f64>(vec![4, 4, 2], -1.0, 1.0, 140);
    let w = seeded_uniform::<f64>(vec![3, 3, 2, 2], -1.0, 1.0, 141);
    let b = seeded_uniform::<f64>(vec![2], -0.5, 0.5, 142);
    let err = central_diff_check(opts, &[x, w, b], |t, vars| {
        let y = t.conv2d(vars[0], vars[1], vars[2], 2, 1)?;
        let sq = t.mul(y, y)?;
        t.sum(sq)
    })
    .unwrap();
    assert!(err < 1e-4, "conv2d err {err}");

    let logits = seeded_uniform::<f64>(vec![6], -2.0, 2.0, 150);
    let targets = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
    let err = central_diff_check(opts, &[logits], |t, vars| {
        t.focal_bce_loss(vars[0], &targets, 0.25, 2.0, 2.0)
    })
    .unwrap();
    assert!(err < 1e-4, "focal err {err}");

    let pred = seeded_uniform::<f64>(vec![2, 2, 2], 0.3, 0.7, 160);
    let tgt = OksTargets {
        gt: seeded_uniform::<f64>(vec![8], 0.25, 0.75, 161).into_data(),
        vis: vec![true, true, true, false],
        area: vec![0.05, 0.08],
        kappas: vec![0.1, 0.12],
    };
    let err = central_diff_check(opts, &[pred], |t, vars| t.oks_loss(vars[0], tgt.clone())).unwrap();
    assert!(err < 1e-4, "oks err {err}");

    // Targets displaced well past the finite-difference step so |p − t| has
    // no kink inside the probe interval.
    let p = seeded_uniform::<f64>(vec![5], -1.0, 1.0, 170);
    let target: Vec<f64> = p
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v + if i % 2 == 0 { 0.1 } else { -0.1 })
        .collect();
    let weight = [0.5, 1.0, 0.25, 2.0, 1.5];
    let err = central_diff_check(opts, &[p], |t, vars| {
        t.weighted_l1_loss(vars[0], &target, &weight)
    })
    .unwrap();
    assert!(err < 1e-4, "weighted l1 err {err}");
}

#[test]
fn gradients_bilinear_gather_concat_transpose() {
    let opts = CheckOpts::default();
    let feat = seeded_uniform::<f64>(vec![3, 4, 2], -1.0, 1.0, 180);
    let pos = t2(&[2], &[0.43, 0.57]);
    let err = central_diff_check(opts, &[feat, pos], |t, v| {
        let s = t.bilinear_sample(v[0], v[1])?;
        let sq = t.mul(s, s)?;
        t.sum(sq)
    })
    .unwrap();
    assert!(err < 1e-4, "bilinear err {err}");

    let x = seeded_uniform::<f64>(vec![4, 3], -1.0, 1.0, 190);
    let err = central_diff_check(opts, &[x], |t, v| {
        let g = t.gather_rows(v[0], &[0, 2, 2, 3])?;
        let tr = t.transpose2d(g)?;
        let a = t.slice_rows(tr, 0, 2)?;
        let b = t.slice_rows(tr, 1, 2)?;
        let cat = t.concat_rows(&[a, b])?;
        let sq = t.mul(cat, cat)?;
        t.mean(sq)
    })
    .unwrap();
    assert!(err < 1e-4, "gather/concat err {err}");
}
