//! Operation set for the tape: forward builders plus the reverse rules.
//!
//! Attention, deformable sampling, convolution, and the loss reductions are
//! single fused nodes rather than compositions — the training loop runs on one
//! core and a short tape is what keeps it affordable.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::{numel, Scalar, Tape, Var};

/// Which key/value columns each attention row may attend to. `allowed: None`
/// means dense attention; otherwise one non-empty, in-range index list per row.
#[derive(Clone, Debug)]
pub struct AttnPattern {
    rows: usize,
    cols: usize,
    allowed: Option<Vec<Vec<u32>>>,
}

impl AttnPattern {
    pub fn full(rows: usize, cols: usize) -> Self {
        AttnPattern { rows, cols, allowed: None }
    }

    /// Explicit per-row allowed lists (row-wise attention mask).
    pub fn from_allowed(rows: usize, cols: usize, allowed: Vec<Vec<u32>>) -> Result<Self> {
        if allowed.len() != rows {
            return Err(Error::contract(
                "attn_pattern",
                format!("{} rows of allowed indices for {} attention rows", allowed.len(), rows),
            ));
        }
        for (r, cs) in allowed.iter().enumerate() {
            if cs.is_empty() {
                return Err(Error::contract("attn_pattern", format!("row {r} attends to nothing")));
            }
            if cs.iter().any(|&c| c as usize >= cols) {
                return Err(Error::contract("attn_pattern", format!("row {r} has out-of-range column")));
            }
        }
        Ok(AttnPattern { rows, cols, allowed: Some(allowed) })
    }

    /// Square self-attention restricted to disjoint groups covering all rows.
    pub fn from_groups(r: usize, groups: &[Vec<usize>]) -> Result<Self> {
        let mut owner = vec![usize::MAX; r];
        for (g, members) in groups.iter().enumerate() {
            for &m in members {
                if m >= r {
                    return Err(Error::contract("attn_pattern", format!("group {g} member {m} out of range {r}")));
                }
                if owner[m] != usize::MAX {
                    return Err(Error::contract("attn_pattern", format!("row {m} in two groups")));
                }
                owner[m] = g;
            }
        }
        if let Some(miss) = owner.iter().position(|&o| o == usize::MAX) {
            return Err(Error::contract("attn_pattern", format!("row {miss} not covered by any group")));
        }
        let as_u32: Vec<Vec<u32>> = groups.iter().map(|g| g.iter().map(|&m| m as u32).collect()).collect();
        let allowed = (0..r).map(|row| as_u32[owner[row]].clone()).collect();
        Ok(AttnPattern { rows: r, cols: r, allowed: Some(allowed) })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_full(&self) -> bool {
        self.allowed.is_none()
    }

    /// Number of attention-map entries actually materialized per head.
    pub fn entries(&self) -> usize {
        match &self.allowed {
            None => self.rows * self.cols,
            Some(rows) => rows.iter().map(|r| r.len()).sum(),
        }
    }

    fn row(&self, r: usize) -> Option<&[u32]> {
        self.allowed.as_ref().map(|a| a[r].as_slice())
    }
}

/// Ground-truth side of the fused OKS loss: M instances of K keypoints.
#[derive(Clone, Debug)]
pub struct OksTargets<S> {
    /// M·K·2 normalized coordinates.
    pub gt: Vec<S>,
    /// M·K visibility flags; only visible keypoints enter the similarity.
    pub vis: Vec<bool>,
    /// M normalized areas (> 0).
    pub area: Vec<S>,
    /// K per-keypoint falloff constants.
    pub kappas: Vec<S>,
}

#[derive(Clone)]
pub(crate) enum Op<S> {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Sigmoid(Var),
    Matmul(Var, Var),
    AddBias(Var, Var),
    Reshape(Var),
    Transpose2d(Var),
    GatherRows { x: Var, idx: Arc<Vec<u32>> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, aux: Arc<Vec<S>> },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    BilinearSample { feat: Var, pos: Var },
    Sdpa { q: Var, k: Var, v: Var, heads: usize, pat: Arc<AttnPattern>, attn: Arc<Vec<S>> },
    Msda { values: Var, pos: Var, wts: Var, levels: Arc<Vec<(usize, usize)>>, heads: usize },
    FocalBce { logits: Var, targets: Arc<Vec<S>>, alpha: S, gamma: S, norm: S },
    WeightedL1 { pred: Var, target: Arc<Vec<S>>, weight: Arc<Vec<S>> },
    OksLoss { pred: Var, tgt: Arc<OksTargets<S>> },
}

pub(crate) fn stable_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn softplus<S: Scalar>(z: S) -> S {
    let hi = S::from_f64(30.0);
    if z > hi {
        z
    } else if z < -hi {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

// ── forward builders ──────────────────────────────────────────────────────

impl<S: Scalar> Tape<S> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.is_tracked(v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data: Vec<S> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x + *y).collect();
        let t = self.tracked_any(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), data, t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data: Vec<S> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x - *y).collect();
        let t = self.tracked_any(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), data, t, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data: Vec<S> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x * *y).collect();
        let t = self.tracked_any(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), data, t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let data: Vec<S> = self.data(a).iter().map(|x| *x * c).collect();
        let t = self.is_tracked(a);
        Ok(self.push(self.shape(a).to_vec(), data, t, Op::Scale(a, c)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data: Vec<S> = self.data(a).iter().map(|x| x.max(S::zero())).collect();
        let t = self.is_tracked(a);
        Ok(self.push(self.shape(a).to_vec(), data, t, Op::Relu(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let data: Vec<S> = self.data(a).iter().map(|x| stable_sigmoid(*x)).collect();
        let t = self.is_tracked(a);
        Ok(self.push(self.shape(a).to_vec(), data, t, Op::Sigmoid(a)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_nn(self.data(a), self.data(b), m, k, n);
        let t = self.tracked_any(&[a, b]);
        Ok(self.push(vec![m, n], data, t, Op::Matmul(a, b)))
    }

    /// Broadcast-add a vector over the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let d = *sx.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != d || d == 0 {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let bd = self.data(b);
        let data: Vec<S> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| *v + bd[i % d])
            .collect();
        let t = self.tracked_any(&[x, b]);
        Ok(self.push(sx.to_vec(), data, t, Op::AddBias(x, b)))
    }

    /// Affine map over the last axis: reshapes to 2-D, multiplies, adds bias.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w);
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(Error::shape("linear", &sx, sw));
        }
        let (din, dout) = (sw[0], sw[1]);
        let rows = numel(&sx) / din;
        let x2 = self.reshape(x, vec![rows, din])?;
        let y = self.matmul(x2, w)?;
        let y = self.add_bias(y, b)?;
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = dout;
        self.reshape(y, out_shape)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.numel(x) {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        let data = self.data(x).to_vec();
        let t = self.is_tracked(x);
        Ok(self.push(shape, data, t, Op::Reshape(x)))
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("transpose2d", s, &[]));
        }
        let (m, n) = (s[0], s[1]);
        let xd = self.data(x);
        let mut data = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = xd[i * n + j];
            }
        }
        let t = self.is_tracked(x);
        Ok(self.push(vec![n, m], data, t, Op::Transpose2d(x)))
    }

    /// Select rows (leading-axis slices) by index; indices may repeat, and the
    /// reverse rule scatter-adds.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(Error::shape("gather_rows", s, &[]));
        }
        let rows = s[0];
        let rest = numel(&s[1..]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::contract("gather_rows", format!("index {bad} out of {rows} rows")));
        }
        let xd = self.data(x);
        let mut data = Vec::with_capacity(idx.len() * rest);
        for &i in idx {
            data.extend_from_slice(&xd[i * rest..(i + 1) * rest]);
        }
        let mut shape = s.to_vec();
        shape[0] = idx.len();
        let t = self.is_tracked(x);
        let idx32 = Arc::new(idx.iter().map(|&i| i as u32).collect::<Vec<u32>>());
        Ok(self.push(shape, data, t, Op::GatherRows { x, idx: idx32 }))
    }

    /// Stack along the leading axis; trailing extents must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows", "no parts"));
        }
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), s));
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * numel(&tail));
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let t = self.tracked_any(parts);
        Ok(self.push(shape, data, t, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() || start + len > s[0] {
            return Err(Error::contract(
                "slice_rows",
                format!("rows {start}..{} of shape {:?}", start + len, s),
            ));
        }
        let rest = numel(&s[1..]);
        let data = self.data(x)[start * rest..(start + len) * rest].to_vec();
        let mut shape = s.to_vec();
        shape[0] = len;
        let t = self.is_tracked(x);
        Ok(self.push(shape, data, t, Op::SliceRows { x, start }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: S = self.data(x).iter().copied().sum();
        let t = self.is_tracked(x);
        Ok(self.push(vec![1], vec![s], t, Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.numel(x);
        if n == 0 {
            return Err(Error::contract("mean", "empty tensor"));
        }
        let s: S = self.data(x).iter().copied().sum();
        let t = self.is_tracked(x);
        Ok(self.push(vec![1], vec![s / S::from_usize(n)], t, Op::Mean(x)))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::contract("softmax", format!("axis {axis} of shape {s:?}")));
        }
        let (outer, len, inner) = axis_strides(&s, axis);
        let xd = self.data(x);
        let mut data = vec![S::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = S::neg_infinity();
                for j in 0..len {
                    mx = mx.max(xd[base + j * inner]);
                }
                let mut z = S::zero();
                for j in 0..len {
                    let e = (xd[base + j * inner] - mx).exp();
                    data[base + j * inner] = e;
                    z += e;
                }
                for j in 0..len {
                    data[base + j * inner] /= z;
                }
            }
        }
        let t = self.is_tracked(x);
        Ok(self.push(s, data, t, Op::Softmax { x, axis }))
    }

    /// Normalize each length-`d` slice to zero mean / unit variance, then
    /// apply the elementwise affine (gamma, beta).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap_or(&0);
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &s, self.shape(gamma)));
        }
        let rows = numel(&s) / d;
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut data = vec![S::zero(); xd.len()];
        let mut aux = Vec::with_capacity(if self.is_recording() { 2 * rows } else { 0 });
        let inv_d = S::one() / S::from_usize(d);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mu: S = row.iter().copied().sum::<S>() * inv_d;
            let var: S = row.iter().map(|v| (*v - mu) * (*v - mu)).sum::<S>() * inv_d;
            let rstd = S::one() / (var + eps).sqrt();
            for j in 0..d {
                data[r * d + j] = (row[j] - mu) * rstd * gd[j] + bd[j];
            }
            if self.is_recording() {
                aux.push(mu);
                aux.push(rstd);
            }
        }
        let t = self.tracked_any(&[x, gamma, beta]);
        Ok(self.push(s, data, t, Op::LayerNorm { x, gamma, beta, aux: Arc::new(aux) }))
    }

    /// 2-D convolution over channels-last images: x[h,w,ci], w[kh,kw,ci,co].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 4 || sx[2] != sw[2] {
            return Err(Error::shape("conv2d", sx, sw));
        }
        let (h, wd, ci) = (sx[0], sx[1], sx[2]);
        let (kh, kw, co) = (sw[0], sw[1], sw[3]);
        if self.shape(b) != [co] {
            return Err(Error::shape("conv2d", self.shape(b), &[co]));
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::contract("conv2d", format!("kernel {kh}x{kw} too large for {h}x{wd} pad {pad}")));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let data = conv2d_forward(self.data(x), self.data(w), self.data(b), h, wd, ci, kh, kw, co, stride, pad, oh, ow);
        let t = self.tracked_any(&[x, w, b]);
        Ok(self.push(vec![oh, ow, co], data, t, Op::Conv2d { x, w, b, stride, pad }))
    }

    /// Interpolate a channels-last map at one normalized point `pos = [x, y]`;
    /// out-of-range points clamp to the border (zero positional gradient there).
    pub fn bilinear_sample(&mut self, feat: Var, pos: Var) -> Result<Var> {
        let s = self.shape(feat);
        if s.len() != 3 || self.numel(pos) != 2 {
            return Err(Error::shape("bilinear_sample", s, self.shape(pos)));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        if h == 0 || w == 0 {
            return Err(Error::contract("bilinear_sample", "empty feature map"));
        }
        let pd = self.data(pos);
        let (px, py) = (pd[0], pd[1]);
        let fd = self.data(feat);
        let mut out = vec![S::zero(); c];
        bilinear_accum(fd, h, w, c, 0, c, px, py, S::one(), &mut out);
        let t = self.tracked_any(&[feat, pos]);
        Ok(self.push(vec![c], out, t, Op::BilinearSample { feat, pos }))
    }

    /// Scaled dot-product attention with multiple heads over a sparsity
    /// pattern. Covers dense, masked, and block-grouped self-attention with
    /// one node; attention weights are kept for the reverse pass only while
    /// recording.
    pub fn sdpa(&mut self, q: Var, k: Var, v: Var, heads: usize, pat: Arc<AttnPattern>) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk != sv {
            return Err(Error::shape("sdpa", sq, sk));
        }
        let (m, d) = (sq[0], sq[1]);
        let n = sk[0];
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract("sdpa", format!("dim {d} not divisible by {heads} heads")));
        }
        if pat.rows() != m || pat.cols() != n {
            return Err(Error::contract(
                "sdpa",
                format!("pattern {}x{} vs tensors {m}x{n}", pat.rows(), pat.cols()),
            ));
        }
        let record = self.is_recording();
        let (out, attn) = sdpa_forward(self.data(q), self.data(k), self.data(v), m, n, d, heads, &pat, record);
        let t = self.tracked_any(&[q, k, v]);
        Ok(self.push(vec![m, d], out, t, Op::Sdpa { q, k, v, heads, pat, attn: Arc::new(attn) }))
    }

    /// Multi-scale deformable sampling: for each query and head, a weighted
    /// sum of bilinear samples from each level at the given normalized
    /// positions. `values` is the value-projected flattened memory, levels
    /// stacked in order; `wts` must already be normalized (softmax upstream).
    pub fn msda(
        &mut self,
        values: Var,
        pos: Var,
        wts: Var,
        levels: &[(usize, usize)],
        heads: usize,
    ) -> Result<Var> {
        let sv = self.shape(values);
        if sv.len() != 2 {
            return Err(Error::shape("msda", sv, &[]));
        }
        let (p_total, d) = (sv[0], sv[1]);
        let expect_p: usize = levels.iter().map(|&(h, w)| h * w).sum();
        if p_total != expect_p {
            return Err(Error::contract("msda", format!("{p_total} value rows vs {expect_p} level positions")));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract("msda", format!("dim {d} not divisible by {heads} heads")));
        }
        let samples = self.numel(wts);
        let q_count = if samples == 0 { 0 } else { self.shape(wts)[0] };
        let l = levels.len();
        if q_count == 0 || samples % q_count != 0 {
            return Err(Error::contract("msda", "weight tensor must be [q, heads*levels*points]"));
        }
        let per_q = samples / q_count;
        if per_q % (heads * l) != 0 {
            return Err(Error::contract("msda", format!("{per_q} samples/query not divisible by heads*levels")));
        }
        if self.numel(pos) != 2 * samples {
            return Err(Error::shape("msda", self.shape(pos), self.shape(wts)));
        }
        let levels = Arc::new(levels.to_vec());
        let out = msda_forward(
            self.data(values),
            self.data(pos),
            self.data(wts),
            &levels,
            heads,
            d,
            q_count,
            per_q / (heads * l),
        );
        let t = self.tracked_any(&[values, pos, wts]);
        Ok(self.push(vec![q_count, d], out, t, Op::Msda { values, pos, wts, levels, heads }))
    }

    /// Sigmoid focal loss summed over logits and divided by `norm`.
    pub fn focal_bce_loss(&mut self, logits: Var, targets: &[S], alpha: S, gamma: S, norm: S) -> Result<Var> {
        if targets.len() != self.numel(logits) {
            return Err(Error::contract(
                "focal_bce",
                format!("{} targets for {} logits", targets.len(), self.numel(logits)),
            ));
        }
        if norm <= S::zero() {
            return Err(Error::contract("focal_bce", "normalizer must be positive"));
        }
        let mut total = S::zero();
        for (&x, &t) in self.data(logits).iter().zip(targets) {
            let p = stable_sigmoid(x);
            let pos = alpha * (S::one() - p).powf(gamma) * softplus(-x);
            let neg = (S::one() - alpha) * p.powf(gamma) * softplus(x);
            total += t * pos + (S::one() - t) * neg;
        }
        total /= norm;
        let tr = self.is_tracked(logits);
        let op = Op::FocalBce { logits, targets: Arc::new(targets.to_vec()), alpha, gamma, norm };
        Ok(self.push(vec![1], vec![total], tr, op))
    }

    /// Σ weightᵢ·|predᵢ − targetᵢ| as one scalar node.
    pub fn weighted_l1_loss(&mut self, pred: Var, target: &[S], weight: &[S]) -> Result<Var> {
        let n = self.numel(pred);
        if target.len() != n || weight.len() != n {
            return Err(Error::contract(
                "weighted_l1",
                format!("{} targets / {} weights for {} predictions", target.len(), weight.len(), n),
            ));
        }
        let mut total = S::zero();
        for ((&p, &t), &w) in self.data(pred).iter().zip(target).zip(weight) {
            total += w * (p - t).abs();
        }
        let tr = self.is_tracked(pred);
        let op = Op::WeightedL1 { pred, target: Arc::new(target.to_vec()), weight: Arc::new(weight.to_vec()) };
        Ok(self.push(vec![1], vec![total], tr, op))
    }

    /// Mean over instances of (1 − OKS), differentiable w.r.t. predictions.
    /// `pred` holds M·K·2 coordinates matching `tgt`.
    pub fn oks_loss(&mut self, pred: Var, tgt: OksTargets<S>) -> Result<Var> {
        let m = tgt.area.len();
        let k = tgt.kappas.len();
        if m == 0 {
            return Err(Error::contract("oks_loss", "no target instances"));
        }
        if tgt.gt.len() != m * k * 2 || tgt.vis.len() != m * k || self.numel(pred) != m * k * 2 {
            return Err(Error::contract("oks_loss", format!("inconsistent extents for M={m}, K={k}")));
        }
        if tgt.area.iter().any(|a| *a <= S::zero()) {
            return Err(Error::contract("oks_loss", "instance area must be positive"));
        }
        let tgt = Arc::new(tgt);
        let (loss, _) = oks_loss_forward(self.data(pred), &tgt);
        let tr = self.is_tracked(pred);
        Ok(self.push(vec![1], vec![loss], tr, Op::OksLoss { pred, tgt }))
    }
}

// ── raw kernels shared by forward and reverse ─────────────────────────────

fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// C[m,n] = A[m,k] · B[k,n]
fn matmul_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ
fn matmul_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// C[k,n] = A[m,k]ᵀ · B[m,n]
fn matmul_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward<S: Scalar>(
    x: &[S],
    w: &[S],
    b: &[S],
    h: usize,
    wd: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let mut out = vec![S::zero(); oh * ow * co];
    for oy in 0..oh {
        for ox in 0..ow {
            let orow = &mut out[(oy * ow + ox) * co..(oy * ow + ox + 1) * co];
            orow.copy_from_slice(b);
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix as usize >= wd {
                        continue;
                    }
                    let xrow = &x[((iy as usize) * wd + ix as usize) * ci..];
                    let wrow = &w[((ky * kw + kx) * ci) * co..];
                    for c_in in 0..ci {
                        let xv = xrow[c_in];
                        if xv == S::zero() {
                            continue;
                        }
                        let wslice = &wrow[c_in * co..(c_in + 1) * co];
                        for c_out in 0..co {
                            orow[c_out] += xv * wslice[c_out];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Add `weight` × the bilinear sample at normalized (px, py) over channel
/// columns [col, col+cw) of a channels-last map into `out`.
#[allow(clippy::too_many_arguments)]
fn bilinear_accum<S: Scalar>(
    feat: &[S],
    h: usize,
    w: usize,
    row_stride: usize,
    col: usize,
    cw: usize,
    px: S,
    py: S,
    weight: S,
    out: &mut [S],
) {
    let (x0, x1, fx) = interp_coords(px, w);
    let (y0, y1, fy) = interp_coords(py, h);
    let one = S::one();
    let w00 = (one - fx) * (one - fy) * weight;
    let w01 = fx * (one - fy) * weight;
    let w10 = (one - fx) * fy * weight;
    let w11 = fx * fy * weight;
    let r00 = &feat[(y0 * w + x0) * row_stride + col..];
    let r01 = &feat[(y0 * w + x1) * row_stride + col..];
    let r10 = &feat[(y1 * w + x0) * row_stride + col..];
    let r11 = &feat[(y1 * w + x1) * row_stride + col..];
    for c in 0..cw {
        out[c] += w00 * r00[c] + w01 * r01[c] + w10 * r10[c] + w11 * r11[c];
    }
}

/// Map a normalized coordinate to clamped pixel space: returns the two
/// neighbor indices and the fractional weight toward the upper one.
fn interp_coords<S: Scalar>(p: S, extent: usize) -> (usize, usize, S) {
    let ext = S::from_usize(extent - 1);
    let px = (p * ext).max(S::zero()).min(ext);
    let mut x0 = px.floor().to_f64() as usize;
    if extent >= 2 && x0 > extent - 2 {
        x0 = extent - 2;
    }
    if extent == 1 {
        return (0, 0, S::zero());
    }
    let fx = px - S::from_usize(x0);
    (x0, x0 + 1, fx)
}

/// True when the unclamped pixel coordinate lies strictly inside the clamp
/// range, i.e. the positional gradient survives.
fn interp_active<S: Scalar>(p: S, extent: usize) -> bool {
    if extent < 2 {
        return false;
    }
    let ext = S::from_usize(extent - 1);
    let px = p * ext;
    px > S::zero() && px < ext
}

#[allow(clippy::too_many_arguments)]
fn sdpa_forward<S: Scalar>(
    qd: &[S],
    kd: &[S],
    vd: &[S],
    m: usize,
    n: usize,
    d: usize,
    heads: usize,
    pat: &AttnPattern,
    record: bool,
) -> (Vec<S>, Vec<S>) {
    let dh = d / heads;
    let scale = S::one() / S::from_usize(dh).sqrt();
    let total = pat.entries();
    let mut attn = if record { vec![S::zero(); heads * total] } else { Vec::new() };
    let mut out = vec![S::zero(); m * d];
    let mut logits = vec![S::zero(); n];
    let mut entry_base = 0usize;
    for r in 0..m {
        let row_cols = pat.row(r);
        let count = row_cols.map_or(n, |c| c.len());
        for hd_i in 0..heads {
            let cb = hd_i * dh;
            let qrow = &qd[r * d + cb..r * d + cb + dh];
            let mut mx = S::neg_infinity();
            for j in 0..count {
                let c = row_cols.map_or(j, |cs| cs[j] as usize);
                let krow = &kd[c * d + cb..c * d + cb + dh];
                let mut acc = S::zero();
                for u in 0..dh {
                    acc += qrow[u] * krow[u];
                }
                let l = acc * scale;
                logits[j] = l;
                mx = mx.max(l);
            }
            let mut z = S::zero();
            for l in logits[..count].iter_mut() {
                *l = (*l - mx).exp();
                z += *l;
            }
            let orow = &mut out[r * d + cb..r * d + cb + dh];
            for j in 0..count {
                let c = row_cols.map_or(j, |cs| cs[j] as usize);
                let wgt = logits[j] / z;
                if record {
                    attn[hd_i * total + entry_base + j] = wgt;
                }
                let vrow = &vd[c * d + cb..c * d + cb + dh];
                for u in 0..dh {
                    orow[u] += wgt * vrow[u];
                }
            }
        }
        entry_base += count;
    }
    (out, attn)
}

#[allow(clippy::too_many_arguments)]
fn msda_forward<S: Scalar>(
    vals: &[S],
    pos: &[S],
    wts: &[S],
    levels: &[(usize, usize)],
    heads: usize,
    d: usize,
    q_count: usize,
    pts: usize,
) -> Vec<S> {
    let dh = d / heads;
    let nl = levels.len();
    let mut bases = Vec::with_capacity(nl);
    let mut acc = 0usize;
    for &(lh, lw) in levels {
        bases.push(acc);
        acc += lh * lw;
    }
    let mut out = vec![S::zero(); q_count * d];
    let mut block = vec![S::zero(); dh];
    for q in 0..q_count {
        for hd_i in 0..heads {
            let cb = hd_i * dh;
            block.iter_mut().for_each(|v| *v = S::zero());
            for (l, &(lh, lw)) in levels.iter().enumerate() {
                let base = bases[l];
                for s in 0..pts {
                    let idx = ((q * heads + hd_i) * nl + l) * pts + s;
                    let wgt = wts[idx];
                    let px = pos[2 * idx];
                    let py = pos[2 * idx + 1];
                    bilinear_accum(&vals[base * d..], lh, lw, d, cb, dh, px, py, wgt, &mut block);
                }
            }
            out[q * d + cb..q * d + cb + dh].copy_from_slice(&block);
        }
    }
    out
}

/// Returns (mean over instances of 1 − OKS, per-coordinate dL/dpred scaled by
/// 1; the caller multiplies by upstream gradient).
fn oks_loss_forward<S: Scalar>(pred: &[S], tgt: &OksTargets<S>) -> (S, Vec<S>) {
    let m = tgt.area.len();
    let k = tgt.kappas.len();
    let inv_m = S::one() / S::from_usize(m);
    let mut loss = S::zero();
    let mut grad = vec![S::zero(); pred.len()];
    let two = S::from_f64(2.0);
    for i in 0..m {
        let vis_count = (0..k).filter(|&j| tgt.vis[i * k + j]).count();
        if vis_count == 0 {
            loss += S::one();
            continue;
        }
        let inv_v = S::one() / S::from_usize(vis_count);
        let mut sim = S::zero();
        for j in 0..k {
            if !tgt.vis[i * k + j] {
                continue;
            }
            let base = (i * k + j) * 2;
            let dx = pred[base] - tgt.gt[base];
            let dy = pred[base + 1] - tgt.gt[base + 1];
            let denom = two * tgt.area[i] * tgt.kappas[j] * tgt.kappas[j];
            let e = (-(dx * dx + dy * dy) / denom).exp();
            sim += e;
            // d(1-oks)/dp = e·(p−g)·2/(denom·V); folded 1/M at the end
            let coef = e * two / (denom * S::from_usize(vis_count));
            grad[base] = coef * dx * inv_m;
            grad[base + 1] = coef * dy * inv_m;
        }
        loss += S::one() - sim * inv_v;
    }
    (loss * inv_m, grad)
}

// ── reverse rules ─────────────────────────────────────────────────────────

impl<S: Scalar> Tape<S> {
    pub(crate) fn backprop_node(&mut self, i: usize) -> Result<()> {
        let op = self.nodes[i].op.clone();
        let g = match self.nodes[i].grad.take() {
            Some(g) => g,
            None => return Ok(()),
        };
        let me = Var(i as u32);
        match &op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.accum(*a, &g);
                self.accum(*b, &g);
            }
            Op::Sub(a, b) => {
                self.accum(*a, &g);
                if self.is_tracked(*b) {
                    let neg: Vec<S> = g.iter().map(|v| -*v).collect();
                    self.accum(*b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.is_tracked(*a) {
                    let da: Vec<S> = g.iter().zip(self.data(*b)).map(|(gv, bv)| *gv * *bv).collect();
                    self.accum(*a, &da);
                }
                if self.is_tracked(*b) {
                    let db: Vec<S> = g.iter().zip(self.data(*a)).map(|(gv, av)| *gv * *av).collect();
                    self.accum(*b, &db);
                }
            }
            Op::Scale(a, c) => {
                if self.is_tracked(*a) {
                    let da: Vec<S> = g.iter().map(|v| *v * *c).collect();
                    self.accum(*a, &da);
                }
            }
            Op::Relu(a) => {
                if self.is_tracked(*a) {
                    let da: Vec<S> = g
                        .iter()
                        .zip(self.data(*a))
                        .map(|(gv, av)| if *av > S::zero() { *gv } else { S::zero() })
                        .collect();
                    self.accum(*a, &da);
                }
            }
            Op::Sigmoid(a) => {
                if self.is_tracked(*a) {
                    let da: Vec<S> = g
                        .iter()
                        .zip(self.data(me))
                        .map(|(gv, yv)| *gv * *yv * (S::one() - *yv))
                        .collect();
                    self.accum(*a, &da);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.is_tracked(*a) {
                    let da = matmul_nt(&g, self.data(*b), m, n, k);
                    self.accum(*a, &da);
                }
                if self.is_tracked(*b) {
                    let db = matmul_tn(self.data(*a), &g, m, k, n);
                    self.accum(*b, &db);
                }
            }
            Op::AddBias(x, b) => {
                self.accum(*x, &g);
                if self.is_tracked(*b) {
                    let d = self.numel(*b);
                    let mut db = vec![S::zero(); d];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % d] += *gv;
                    }
                    self.accum(*b, &db);
                }
            }
            Op::Reshape(a) => {
                self.accum(*a, &g);
            }
            Op::Transpose2d(a) => {
                if self.is_tracked(*a) {
                    let (n, m) = (self.shape(me)[0], self.shape(me)[1]);
                    let mut da = vec![S::zero(); m * n];
                    for i in 0..n {
                        for j in 0..m {
                            da[j * n + i] = g[i * m + j];
                        }
                    }
                    self.accum(*a, &da);
                }
            }
            Op::GatherRows { x, idx } => {
                if self.is_tracked(*x) {
                    let rest = self.numel(*x) / self.shape(*x)[0];
                    let mut dx = vec![S::zero(); self.numel(*x)];
                    for (o, &src) in idx.iter().enumerate() {
                        let dst = &mut dx[src as usize * rest..(src as usize + 1) * rest];
                        let grow = &g[o * rest..(o + 1) * rest];
                        for (d, gv) in dst.iter_mut().zip(grow) {
                            *d += *gv;
                        }
                    }
                    self.accum(*x, &dx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0usize;
                for &p in parts {
                    let len = self.numel(p);
                    if self.is_tracked(p) {
                        let slice = g[offset..offset + len].to_vec();
                        self.accum(p, &slice);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                if self.is_tracked(*x) {
                    let rest = self.numel(*x) / self.shape(*x)[0];
                    let mut dx = vec![S::zero(); self.numel(*x)];
                    dx[start * rest..start * rest + g.len()].copy_from_slice(&g);
                    self.accum(*x, &dx);
                }
            }
            Op::Sum(a) => {
                if self.is_tracked(*a) {
                    let da = vec![g[0]; self.numel(*a)];
                    self.accum(*a, &da);
                }
            }
            Op::Mean(a) => {
                if self.is_tracked(*a) {
                    let n = self.numel(*a);
                    let da = vec![g[0] / S::from_usize(n); n];
                    self.accum(*a, &da);
                }
            }
            Op::Softmax { x, axis } => {
                if self.is_tracked(*x) {
                    let shape = self.shape(me).to_vec();
                    let (outer, len, inner) = axis_strides(&shape, *axis);
                    let y = self.data(me);
                    let mut dx = vec![S::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = S::zero();
                            for j in 0..len {
                                let at = base + j * inner;
                                dot += y[at] * g[at];
                            }
                            for j in 0..len {
                                let at = base + j * inner;
                                dx[at] = y[at] * (g[at] - dot);
                            }
                        }
                    }
                    self.accum(*x, &dx);
                }
            }
            Op::LayerNorm { x, gamma, beta, aux } => {
                let d = *self.shape(me).last().unwrap();
                let rows = self.numel(me) / d;
                let xd = self.data(*x);
                let gd = self.data(*gamma);
                let inv_d = S::one() / S::from_usize(d);
                let mut dx = vec![S::zero(); xd.len()];
                let mut dgamma = vec![S::zero(); d];
                let mut dbeta = vec![S::zero(); d];
                for r in 0..rows {
                    let mu = aux[2 * r];
                    let rstd = aux[2 * r + 1];
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    for j in 0..d {
                        let at = r * d + j;
                        let xh = (xd[at] - mu) * rstd;
                        let dxh = g[at] * gd[j];
                        dgamma[j] += g[at] * xh;
                        dbeta[j] += g[at];
                        m1 += dxh;
                        m2 += dxh * xh;
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    for j in 0..d {
                        let at = r * d + j;
                        let xh = (xd[at] - mu) * rstd;
                        dx[at] = rstd * (g[at] * gd[j] - m1 - xh * m2);
                    }
                }
                if self.is_tracked(*x) {
                    self.accum(*x, &dx);
                }
                if self.is_tracked(*gamma) {
                    self.accum(*gamma, &dgamma);
                }
                if self.is_tracked(*beta) {
                    self.accum(*beta, &dbeta);
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let sx = self.shape(*x).to_vec();
                let sw = self.shape(*w).to_vec();
                let so = self.shape(me).to_vec();
                let (h, wd, ci) = (sx[0], sx[1], sx[2]);
                let (kh, kw, co) = (sw[0], sw[1], sw[3]);
                let (oh, ow) = (so[0], so[1]);
                let want_x = self.is_tracked(*x);
                let want_w = self.is_tracked(*w);
                let want_b = self.is_tracked(*b);
                let mut dx = if want_x { vec![S::zero(); h * wd * ci] } else { Vec::new() };
                let mut dw = if want_w { vec![S::zero(); kh * kw * ci * co] } else { Vec::new() };
                let mut db = if want_b { vec![S::zero(); co] } else { Vec::new() };
                let xd = self.data(*x);
                let wdta = self.data(*w);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let grow = &g[(oy * ow + ox) * co..(oy * ow + ox + 1) * co];
                        if want_b {
                            for c_out in 0..co {
                                db[c_out] += grow[c_out];
                            }
                        }
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - *pad as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - *pad as isize;
                                if ix < 0 || ix as usize >= wd {
                                    continue;
                                }
                                let xbase = ((iy as usize) * wd + ix as usize) * ci;
                                let wbase = (ky * kw + kx) * ci * co;
                                for c_in in 0..ci {
                                    let mut acc = S::zero();
                                    let wslice = &wdta[wbase + c_in * co..wbase + (c_in + 1) * co];
                                    for c_out in 0..co {
                                        acc += wslice[c_out] * grow[c_out];
                                    }
                                    if want_x {
                                        dx[xbase + c_in] += acc;
                                    }
                                    if want_w {
                                        let xv = xd[xbase + c_in];
                                        let wgrad = &mut dw[wbase + c_in * co..wbase + (c_in + 1) * co];
                                        for c_out in 0..co {
                                            wgrad[c_out] += xv * grow[c_out];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if want_x {
                    self.accum(*x, &dx);
                }
                if want_w {
                    self.accum(*w, &dw);
                }
                if want_b {
                    self.accum(*b, &db);
                }
            }
            Op::BilinearSample { feat, pos } => {
                let s = self.shape(*feat).to_vec();
                let (h, w, c) = (s[0], s[1], s[2]);
                let pd = self.data(*pos);
                let (px, py) = (pd[0], pd[1]);
                let fd = self.data(*feat);
                let (x0, x1, fx) = interp_coords(px, w);
                let (y0, y1, fy) = interp_coords(py, h);
                let one = S::one();
                let want_feat = self.is_tracked(*feat);
                let want_pos = self.is_tracked(*pos);
                let mut dfeat = if want_feat { vec![S::zero(); h * w * c] } else { Vec::new() };
                let mut dpx = S::zero();
                let mut dpy = S::zero();
                for ch in 0..c {
                    let gv = g[ch];
                    if want_feat {
                        dfeat[(y0 * w + x0) * c + ch] += (one - fx) * (one - fy) * gv;
                        dfeat[(y0 * w + x1) * c + ch] += fx * (one - fy) * gv;
                        dfeat[(y1 * w + x0) * c + ch] += (one - fx) * fy * gv;
                        dfeat[(y1 * w + x1) * c + ch] += fx * fy * gv;
                    }
                    if want_pos {
                        let f00 = fd[(y0 * w + x0) * c + ch];
                        let f01 = fd[(y0 * w + x1) * c + ch];
                        let f10 = fd[(y1 * w + x0) * c + ch];
                        let f11 = fd[(y1 * w + x1) * c + ch];
                        dpx += gv * ((one - fy) * (f01 - f00) + fy * (f11 - f10));
                        dpy += gv * ((one - fx) * (f10 - f00) + fx * (f11 - f01));
                    }
                }
                if want_feat {
                    self.accum(*feat, &dfeat);
                }
                if want_pos {
                    let sx = if interp_active(px, w) { S::from_usize(w - 1) } else { S::zero() };
                    let sy = if interp_active(py, h) { S::from_usize(h - 1) } else { S::zero() };
                    self.accum(*pos, &[dpx * sx, dpy * sy]);
                }
            }
            Op::Sdpa { q, k, v, heads, pat, attn } => {
                let d = self.shape(*q)[1];
                let m = self.shape(*q)[0];
                let n = self.shape(*k)[0];
                let dh = d / heads;
                let scale = S::one() / S::from_usize(dh).sqrt();
                let total = pat.entries();
                let want_q = self.is_tracked(*q);
                let want_k = self.is_tracked(*k);
                let want_v = self.is_tracked(*v);
                let mut dq = if want_q { vec![S::zero(); m * d] } else { Vec::new() };
                let mut dk = if want_k { vec![S::zero(); n * d] } else { Vec::new() };
                let mut dv = if want_v { vec![S::zero(); n * d] } else { Vec::new() };
                let qd = self.data(*q);
                let kd = self.data(*k);
                let vd = self.data(*v);
                let mut dlogit = vec![S::zero(); n];
                let mut entry_base = 0usize;
                for r in 0..m {
                    let row_cols = pat.row(r);
                    let count = row_cols.map_or(n, |cs| cs.len());
                    for hd_i in 0..*heads {
                        let cb = hd_i * dh;
                        let grow = &g[r * d + cb..r * d + cb + dh];
                        let wrow = &attn[hd_i * total + entry_base..hd_i * total + entry_base + count];
                        // dA then softmax backward within the row
                        let mut dot = S::zero();
                        for j in 0..count {
                            let c = row_cols.map_or(j, |cs| cs[j] as usize);
                            let vrow = &vd[c * d + cb..c * d + cb + dh];
                            let mut da = S::zero();
                            for u in 0..dh {
                                da += grow[u] * vrow[u];
                            }
                            dlogit[j] = da;
                            dot += wrow[j] * da;
                        }
                        for j in 0..count {
                            dlogit[j] = wrow[j] * (dlogit[j] - dot);
                        }
                        for j in 0..count {
                            let c = row_cols.map_or(j, |cs| cs[j] as usize);
                            let dl = dlogit[j] * scale;
                            if want_q {
                                let krow = &kd[c * d + cb..c * d + cb + dh];
                                let dqrow = &mut dq[r * d + cb..r * d + cb + dh];
                                for u in 0..dh {
                                    dqrow[u] += dl * krow[u];
                                }
                            }
                            if want_k {
                                let qrow = &qd[r * d + cb..r * d + cb + dh];
                                let dkrow = &mut dk[c * d + cb..c * d + cb + dh];
                                for u in 0..dh {
                                    dkrow[u] += dl * qrow[u];
                                }
                            }
                            if want_v {
                                let dvrow = &mut dv[c * d + cb..c * d + cb + dh];
                                for u in 0..dh {
                                    dvrow[u] += wrow[j] * grow[u];
                                }
                            }
                        }
                    }
                    entry_base += count;
                }
                if want_q {
                    self.accum(*q, &dq);
                }
                if want_k {
                    self.accum(*k, &dk);
                }
                if want_v {
                    self.accum(*v, &dv);
                }
            }
            Op::Msda { values, pos, wts, levels, heads } => {
                let d = self.shape(*values)[1];
                let dh = d / heads;
                let nl = levels.len();
                let samples = self.numel(*wts);
                let q_count = self.shape(*wts)[0];
                let pts = samples / q_count / (heads * nl);
                let want_vals = self.is_tracked(*values);
                let want_pos = self.is_tracked(*pos);
                let want_wts = self.is_tracked(*wts);
                let mut dvals = if want_vals { vec![S::zero(); self.numel(*values)] } else { Vec::new() };
                let mut dpos = if want_pos { vec![S::zero(); 2 * samples] } else { Vec::new() };
                let mut dwts = if want_wts { vec![S::zero(); samples] } else { Vec::new() };
                let vald = self.data(*values);
                let posd = self.data(*pos);
                let wtsd = self.data(*wts);
                let mut bases = Vec::with_capacity(nl);
                let mut acc = 0usize;
                for &(lh, lw) in levels.iter() {
                    bases.push(acc);
                    acc += lh * lw;
                }
                let one = S::one();
                for qi in 0..q_count {
                    for hd_i in 0..*heads {
                        let cb = hd_i * dh;
                        let grow = &g[qi * d + cb..qi * d + cb + dh];
                        for (l, &(lh, lw)) in levels.iter().enumerate() {
                            let base = bases[l];
                            for s in 0..pts {
                                let idx = ((qi * heads + hd_i) * nl + l) * pts + s;
                                let wgt = wtsd[idx];
                                let px = posd[2 * idx];
                                let py = posd[2 * idx + 1];
                                let (x0, x1, fx) = interp_coords(px, lw);
                                let (y0, y1, fy) = interp_coords(py, lh);
                                let r00 = (base + y0 * lw + x0) * d + cb;
                                let r01 = (base + y0 * lw + x1) * d + cb;
                                let r10 = (base + y1 * lw + x0) * d + cb;
                                let r11 = (base + y1 * lw + x1) * d + cb;
                                let w00 = (one - fx) * (one - fy);
                                let w01 = fx * (one - fy);
                                let w10 = (one - fx) * fy;
                                let w11 = fx * fy;
                                let mut dw_acc = S::zero();
                                let mut dpx = S::zero();
                                let mut dpy = S::zero();
                                for u in 0..dh {
                                    let gv = grow[u];
                                    let f00 = vald[r00 + u];
                                    let f01 = vald[r01 + u];
                                    let f10 = vald[r10 + u];
                                    let f11 = vald[r11 + u];
                                    let sample = w00 * f00 + w01 * f01 + w10 * f10 + w11 * f11;
                                    dw_acc += gv * sample;
                                    if want_vals {
                                        let gw = gv * wgt;
                                        dvals[r00 + u] += w00 * gw;
                                        dvals[r01 + u] += w01 * gw;
                                        dvals[r10 + u] += w10 * gw;
                                        dvals[r11 + u] += w11 * gw;
                                    }
                                    if want_pos {
                                        dpx += gv * ((one - fy) * (f01 - f00) + fy * (f11 - f10));
                                        dpy += gv * ((one - fx) * (f10 - f00) + fx * (f11 - f01));
                                    }
                                }
                                if want_wts {
                                    dwts[idx] += dw_acc;
                                }
                                if want_pos {
                                    let sx = if interp_active(px, lw) { S::from_usize(lw - 1) } else { S::zero() };
                                    let sy = if interp_active(py, lh) { S::from_usize(lh - 1) } else { S::zero() };
                                    dpos[2 * idx] += dpx * wgt * sx;
                                    dpos[2 * idx + 1] += dpy * wgt * sy;
                                }
                            }
                        }
                    }
                }
                if want_vals {
                    self.accum(*values, &dvals);
                }
                if want_pos {
                    self.accum(*pos, &dpos);
                }
                if want_wts {
                    self.accum(*wts, &dwts);
                }
            }
            Op::FocalBce { logits, targets, alpha, gamma, norm } => {
                if self.is_tracked(*logits) {
                    let gscale = g[0] / *norm;
                    let one = S::one();
                    let dx: Vec<S> = self
                        .data(*logits)
                        .iter()
                        .zip(targets.iter())
                        .map(|(&x, &t)| {
                            let p = stable_sigmoid(x);
                            let sp_neg = softplus(-x); // −ln p
                            let sp_pos = softplus(x); // −ln(1−p)
                            let dpos = *alpha * (one - p).powf(*gamma) * (-(*gamma) * p * sp_neg - (one - p));
                            let dneg = (one - *alpha) * p.powf(*gamma) * (p + *gamma * (one - p) * sp_pos);
                            (t * dpos + (one - t) * dneg) * gscale
                        })
                        .collect();
                    self.accum(*logits, &dx);
                }
            }
            Op::WeightedL1 { pred, target, weight } => {
                if self.is_tracked(*pred) {
                    let gv = g[0];
                    let dx: Vec<S> = self
                        .data(*pred)
                        .iter()
                        .zip(target.iter())
                        .zip(weight.iter())
                        .map(|((&p, &t), &w)| {
                            let diff = p - t;
                            if diff > S::zero() {
                                w * gv
                            } else if diff < S::zero() {
                                -w * gv
                            } else {
                                S::zero()
                            }
                        })
                        .collect();
                    self.accum(*pred, &dx);
                }
            }
            Op::OksLoss { pred, tgt } => {
                if self.is_tracked(*pred) {
                    let (_, mut grad) = oks_loss_forward(self.data(*pred), tgt);
                    for gv in grad.iter_mut() {
                        *gv *= g[0];
                    }
                    self.accum(*pred, &grad);
                }
            }
        }
        self.nodes[i].grad = Some(g);
        Ok(())
    }
}
