//! Decoder self-attention variants and deformable cross-attention.
//!
//! Queries come in N groups of K+1 (K keypoint queries plus one instance
//! query per person). The grouped variant runs attention twice — first within
//! each person's K+1 queries, then across people among queries of the same
//! type — instead of one dense pass over all N·(K+1) queries. The masked
//! variant reproduces the same connectivity with one dense masked pass, and
//! `standard` is the unmasked baseline.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::{AttnPattern, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// How the N·(K+1) decoder queries are ordered: query q = i·(K+1) + t for
/// instance i and type t, with t = K the instance query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueryLayout {
    n_instances: usize,
    n_keypoints: usize,
}

impl QueryLayout {
    pub fn new(n_instances: usize, n_keypoints: usize) -> Result<Self> {
        if n_instances == 0 || n_keypoints == 0 {
            return Err(Error::contract("query_layout", "need N ≥ 1 and K ≥ 1"));
        }
        Ok(QueryLayout { n_instances, n_keypoints })
    }

    pub fn n_instances(&self) -> usize {
        self.n_instances
    }

    pub fn n_keypoints(&self) -> usize {
        self.n_keypoints
    }

    /// Query types per instance: K keypoints + 1 instance query.
    pub fn types(&self) -> usize {
        self.n_keypoints + 1
    }

    pub fn total(&self) -> usize {
        self.n_instances * self.types()
    }

    /// The type index of the instance query.
    pub fn instance_type(&self) -> usize {
        self.n_keypoints
    }

    pub fn flatten(&self, instance: usize, ty: usize) -> usize {
        debug_assert!(instance < self.n_instances && ty < self.types());
        instance * self.types() + ty
    }

    pub fn unflatten(&self, q: usize) -> (usize, usize) {
        debug_assert!(q < self.total());
        (q / self.types(), q % self.types())
    }

    /// One group per instance: its K+1 consecutive queries.
    pub fn instance_groups(&self) -> Vec<Vec<usize>> {
        (0..self.n_instances)
            .map(|i| (0..self.types()).map(|t| self.flatten(i, t)).collect())
            .collect()
    }

    /// One group per query type: the N queries of that type.
    pub fn type_groups(&self) -> Vec<Vec<usize>> {
        (0..self.types())
            .map(|t| (0..self.n_instances).map(|i| self.flatten(i, t)).collect())
            .collect()
    }
}

/// Boolean attention mask (row-major R×R): (a,b) allowed iff a and b share an
/// instance or share a type.
pub fn build_group_mask(layout: QueryLayout) -> Vec<bool> {
    let r = layout.total();
    let mut mask = vec![false; r * r];
    for a in 0..r {
        let (ia, ta) = layout.unflatten(a);
        for b in 0..r {
            let (ib, tb) = layout.unflatten(b);
            mask[a * r + b] = ia == ib || ta == tb;
        }
    }
    mask
}

/// The group mask as a sparsity pattern for fused attention.
pub fn group_mask_pattern(layout: QueryLayout) -> AttnPattern {
    let r = layout.total();
    let mask = build_group_mask(layout);
    let rows: Vec<Vec<u32>> = (0..r)
        .map(|a| (0..r).filter(|&b| mask[a * r + b]).map(|b| b as u32).collect())
        .collect();
    AttnPattern::from_allowed(r, r, rows).expect("diagonal keeps every row non-empty")
}

// ── parameters ────────────────────────────────────────────────────────────

/// Uniform Xavier/Glorot initialization for a [fan_in × fan_out] weight.
pub(crate) fn xavier<S: Scalar>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<S> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(vec![fan_in, fan_out], |_| S::from_f64(rng.random_range(-a..a)))
}

pub struct AttentionParams {
    pub heads: usize,
    pub model_dim: usize,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttentionParams {
    pub fn create<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        model_dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(Error::Config(format!("model dim {model_dim} not divisible by {heads} heads")));
        }
        let wq = store.add(format!("{prefix}.wq"), xavier(rng, model_dim, model_dim))?;
        let bq = store.add(format!("{prefix}.bq"), Tensor::zeros(vec![model_dim]))?;
        let wk = store.add(format!("{prefix}.wk"), xavier(rng, model_dim, model_dim))?;
        let bk = store.add(format!("{prefix}.bk"), Tensor::zeros(vec![model_dim]))?;
        let wv = store.add(format!("{prefix}.wv"), xavier(rng, model_dim, model_dim))?;
        let bv = store.add(format!("{prefix}.bv"), Tensor::zeros(vec![model_dim]))?;
        let wo = store.add(format!("{prefix}.wo"), xavier(rng, model_dim, model_dim))?;
        let bo = store.add(format!("{prefix}.bo"), Tensor::zeros(vec![model_dim]))?;
        Ok(AttentionParams { heads, model_dim, wq, bq, wk, bk, wv, bv, wo, bo })
    }
}

pub struct LnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LnParams {
    pub fn create<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, dim: usize) -> Result<Self> {
        Ok(LnParams {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(vec![dim], S::one()))?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(vec![dim]))?,
        })
    }
}

pub(crate) fn layer_norm_with<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    x: Var,
    ln: &LnParams,
) -> Result<Var> {
    let gamma = tape.param(store, ln.gamma);
    let beta = tape.param(store, ln.beta);
    tape.layer_norm(x, gamma, beta, S::from_f64(LN_EPS))
}

/// Multi-scale deformable attention: offset / weight heads over query
/// content, value projection over memory, output projection.
pub struct DeformableParams {
    pub heads: usize,
    pub model_dim: usize,
    pub n_levels: usize,
    pub n_points: usize,
    pub value_w: ParamId,
    pub value_b: ParamId,
    pub offset_w: ParamId,
    pub offset_b: ParamId,
    pub weight_w: ParamId,
    pub weight_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl DeformableParams {
    pub fn create<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        model_dim: usize,
        heads: usize,
        n_levels: usize,
        n_points: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(Error::Config(format!("model dim {model_dim} not divisible by {heads} heads")));
        }
        if n_levels == 0 || n_points == 0 {
            return Err(Error::Config("deformable attention needs ≥1 level and ≥1 point".into()));
        }
        let samples = heads * n_levels * n_points;
        let value_w = store.add(format!("{prefix}.value_w"), xavier(rng, model_dim, model_dim))?;
        let value_b = store.add(format!("{prefix}.value_b"), Tensor::zeros(vec![model_dim]))?;
        // Offset head starts as a fixed ring of sampling points around the
        // reference (weights zero, bias a spread pattern) so early training
        // sees stable, well-separated samples.
        let offset_w = store.add(format!("{prefix}.offset_w"), Tensor::zeros(vec![model_dim, samples * 2]))?;
        let mut bias = vec![S::zero(); samples * 2];
        for h in 0..heads {
            let angle = 2.0 * std::f64::consts::PI * (h as f64) / (heads as f64);
            for l in 0..n_levels {
                for p in 0..n_points {
                    let idx = (h * n_levels + l) * n_points + p;
                    let radius = (p + 1) as f64;
                    bias[2 * idx] = S::from_f64(angle.cos() * radius);
                    bias[2 * idx + 1] = S::from_f64(angle.sin() * radius);
                }
            }
        }
        let offset_b = store.add(format!("{prefix}.offset_b"), Tensor::new(vec![samples * 2], bias)?)?;
        let weight_w = store.add(format!("{prefix}.weight_w"), Tensor::zeros(vec![model_dim, samples]))?;
        let weight_b = store.add(format!("{prefix}.weight_b"), Tensor::zeros(vec![samples]))?;
        let out_w = store.add(format!("{prefix}.out_w"), xavier(rng, model_dim, model_dim))?;
        let out_b = store.add(format!("{prefix}.out_b"), Tensor::zeros(vec![model_dim]))?;
        Ok(DeformableParams {
            heads,
            model_dim,
            n_levels,
            n_points,
            value_w,
            value_b,
            offset_w,
            offset_b,
            weight_w,
            weight_b,
            out_w,
            out_b,
        })
    }
}

// ── multi-head attention ──────────────────────────────────────────────────

fn mha_with_pattern<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    p: &AttentionParams,
    pat: Arc<AttnPattern>,
) -> Result<Var> {
    let wq = tape.param(store, p.wq);
    let bq = tape.param(store, p.bq);
    let wk = tape.param(store, p.wk);
    let bk = tape.param(store, p.bk);
    let wv = tape.param(store, p.wv);
    let bv = tape.param(store, p.bv);
    let wo = tape.param(store, p.wo);
    let bo = tape.param(store, p.bo);
    let q = tape.linear(q_in, wq, bq)?;
    let k = tape.linear(k_in, wk, bk)?;
    let v = tape.linear(v_in, wv, bv)?;
    let o = tape.sdpa(q, k, v, p.heads, pat)?;
    tape.linear(o, wo, bo)
}

/// Scaled dot-product multi-head attention with an optional boolean mask
/// (row-major m×n, true = allowed). Masked entries get exactly zero weight;
/// a row with nothing allowed is a contract error.
pub fn multi_head_attention<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    q: Var,
    k: Var,
    v: Var,
    p: &AttentionParams,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let (m, n) = (tape.shape(q)[0], tape.shape(k)[0]);
    let pat = match mask {
        None => AttnPattern::full(m, n),
        Some(mask) => {
            if mask.len() != m * n {
                return Err(Error::contract(
                    "multi_head_attention",
                    format!("mask has {} entries for {m}x{n}", mask.len()),
                ));
            }
            let rows: Vec<Vec<u32>> = (0..m)
                .map(|a| (0..n).filter(|&b| mask[a * n + b]).map(|b| b as u32).collect())
                .collect();
            if let Some(bad) = rows.iter().position(|r| r.is_empty()) {
                return Err(Error::contract(
                    "multi_head_attention",
                    format!("mask row {bad} allows no entries (degenerate attention)"),
                ));
            }
            AttnPattern::from_allowed(m, n, rows)?
        }
    };
    mha_with_pattern(tape, store, q, k, v, p, Arc::new(pat))
}

fn grouped_attention<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    x: Var,
    groups: &[Vec<usize>],
    p: &AttentionParams,
    pos: Option<Var>,
) -> Result<Var> {
    let r = tape.shape(x)[0];
    let pat = Arc::new(AttnPattern::from_groups(r, groups)?);
    let z = match pos {
        Some(pe) => tape.add(x, pe)?,
        None => x,
    };
    mha_with_pattern(tape, store, z, z, x, p, pat)
}

fn expect_query_shape<S: Scalar>(tape: &Tape<S>, x: Var, layout: QueryLayout) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 3 || s[0] != layout.n_instances || s[1] != layout.types() {
        return Err(Error::shape(
            "group_attention",
            s,
            &[layout.n_instances, layout.types(), 0],
        ));
    }
    Ok(())
}

/// N independent self-attentions over each instance's K+1 queries (shared
/// parameters, no information flow across instances). Input and output are
/// [N, K+1, D]; `pos` (optional, flattened [N(K+1), D]) is added to Q and K.
pub fn within_instance_attention<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    queries: Var,
    layout: QueryLayout,
    p: &AttentionParams,
    pos: Option<Var>,
) -> Result<Var> {
    expect_query_shape(tape, queries, layout)?;
    let d = tape.shape(queries)[2];
    let flat = tape.reshape(queries, vec![layout.total(), d])?;
    let out = grouped_attention(tape, store, flat, &layout.instance_groups(), p, pos)?;
    tape.reshape(out, vec![layout.n_instances, layout.types(), d])
}

/// K+1 independent self-attentions, one per query type, each over the N
/// instances' queries of that type.
pub fn across_instance_attention<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    queries: Var,
    layout: QueryLayout,
    p: &AttentionParams,
    pos: Option<Var>,
) -> Result<Var> {
    expect_query_shape(tape, queries, layout)?;
    let d = tape.shape(queries)[2];
    let flat = tape.reshape(queries, vec![layout.total(), d])?;
    let out = grouped_attention(tape, store, flat, &layout.type_groups(), p, pos)?;
    tape.reshape(out, vec![layout.n_instances, layout.types(), d])
}

/// Decoder self-attention variant. `group_*` runs the two grouped sublayers,
/// `masked_standard` one dense pass with the group mask, `standard` one
/// unmasked pass; the rest drop the named sublayer or restrict the across
/// sublayer to one query type subset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelfAttnMode {
    #[default]
    GroupUnshared,
    GroupShared,
    MaskedStandard,
    Standard,
    WithinOnly,
    AcrossOnly,
    AcrossInstOnly,
    AcrossKptOnly,
}

impl SelfAttnMode {
    pub const ALL: [SelfAttnMode; 8] = [
        SelfAttnMode::GroupUnshared,
        SelfAttnMode::GroupShared,
        SelfAttnMode::MaskedStandard,
        SelfAttnMode::Standard,
        SelfAttnMode::WithinOnly,
        SelfAttnMode::AcrossOnly,
        SelfAttnMode::AcrossInstOnly,
        SelfAttnMode::AcrossKptOnly,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SelfAttnMode::GroupUnshared => "group_unshared",
            SelfAttnMode::GroupShared => "group_shared",
            SelfAttnMode::MaskedStandard => "masked_standard",
            SelfAttnMode::Standard => "standard",
            SelfAttnMode::WithinOnly => "within_only",
            SelfAttnMode::AcrossOnly => "across_only",
            SelfAttnMode::AcrossInstOnly => "across_inst_only",
            SelfAttnMode::AcrossKptOnly => "across_kpt_only",
        }
    }
}

impl std::str::FromStr for SelfAttnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SelfAttnMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown self-attention mode {s:?}")))
    }
}

/// Both parameter sets (and their norms) of the self-attention block. Subset
/// modes that skip a sublayer simply leave its parameters unused.
pub struct GroupAttnParams {
    pub within: AttentionParams,
    pub across: AttentionParams,
    pub ln_within: LnParams,
    pub ln_across: LnParams,
}

impl GroupAttnParams {
    pub fn create<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        model_dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(GroupAttnParams {
            within: AttentionParams::create(store, &format!("{prefix}.within"), model_dim, heads, rng)?,
            across: AttentionParams::create(store, &format!("{prefix}.across"), model_dim, heads, rng)?,
            ln_within: LnParams::create(store, &format!("{prefix}.ln_within"), model_dim)?,
            ln_across: LnParams::create(store, &format!("{prefix}.ln_across"), model_dim)?,
        })
    }
}

fn residual_norm_sublayer<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    x: Var,
    groups: Option<&[Vec<usize>]>,
    pat_override: Option<Arc<AttnPattern>>,
    p: &AttentionParams,
    ln: &LnParams,
    pos: Option<Var>,
) -> Result<Var> {
    let att = match pat_override {
        Some(pat) => {
            let z = match pos {
                Some(pe) => tape.add(x, pe)?,
                None => x,
            };
            mha_with_pattern(tape, store, z, z, x, p, pat)?
        }
        None => grouped_attention(tape, store, x, groups.expect("groups or pattern"), p, pos)?,
    };
    let res = tape.add(x, att)?;
    layer_norm_with(tape, store, res, ln)
}

/// Across-instance sublayer restricted to the query types in `subset`; other
/// rows pass through untouched (no residual, no norm).
fn across_subset_sublayer<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    x: Var,
    layout: QueryLayout,
    subset: &[usize],
    p: &AttentionParams,
    ln: &LnParams,
    pos: Option<Var>,
) -> Result<Var> {
    let r = layout.total();
    let mut sub_of = vec![usize::MAX; r];
    let mut rows = Vec::new();
    for q in 0..r {
        let (_, t) = layout.unflatten(q);
        if subset.contains(&t) {
            sub_of[q] = rows.len();
            rows.push(q);
        }
    }
    let x_sub = tape.gather_rows(x, &rows)?;
    let pos_sub = match pos {
        Some(pe) => Some(tape.gather_rows(pe, &rows)?),
        None => None,
    };
    let groups: Vec<Vec<usize>> = subset
        .iter()
        .map(|&t| (0..layout.n_instances()).map(|i| sub_of[layout.flatten(i, t)]).collect())
        .collect();
    let y_sub = residual_norm_sublayer(tape, store, x_sub, Some(&groups), None, p, ln, pos_sub)?;
    // Merge: updated rows from y_sub, everything else from x.
    let cat = tape.concat_rows(&[y_sub, x])?;
    let idx: Vec<usize> = (0..r)
        .map(|q| if sub_of[q] != usize::MAX { sub_of[q] } else { rows.len() + q })
        .collect();
    tape.gather_rows(cat, &idx)
}

/// Union-of-groups connectivity as a sparsity pattern: (a,b) allowed iff a
/// and b share a within-group or share an across-group.
fn union_pattern(r: usize, within: &[Vec<usize>], across: &[Vec<usize>]) -> Result<AttnPattern> {
    let mut wid = vec![usize::MAX; r];
    let mut aid = vec![usize::MAX; r];
    for (g, members) in within.iter().enumerate() {
        for &m in members {
            wid[m] = g;
        }
    }
    for (g, members) in across.iter().enumerate() {
        for &m in members {
            aid[m] = g;
        }
    }
    let rows: Vec<Vec<u32>> = (0..r)
        .map(|a| {
            (0..r)
                .filter(|&b| {
                    (wid[a] != usize::MAX && wid[a] == wid[b]) || (aid[a] != usize::MAX && aid[a] == aid[b])
                })
                .map(|b| b as u32)
                .collect()
        })
        .collect();
    AttnPattern::from_allowed(r, r, rows)
}

/// Flattened-input core of [`group_self_attention`]: x is [R, D] with the
/// grouping given explicitly. Subset modes need a [`QueryLayout`] and are
/// rejected here.
pub fn group_self_attention_flat<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    x: Var,
    within_groups: &[Vec<usize>],
    across_groups: &[Vec<usize>],
    params: &GroupAttnParams,
    mode: SelfAttnMode,
    pos: Option<Var>,
) -> Result<Var> {
    let r = tape.shape(x)[0];
    match mode {
        SelfAttnMode::GroupUnshared => {
            let h = residual_norm_sublayer(tape, store, x, Some(within_groups), None, &params.within, &params.ln_within, pos)?;
            residual_norm_sublayer(tape, store, h, Some(across_groups), None, &params.across, &params.ln_across, pos)
        }
        SelfAttnMode::GroupShared => {
            let h = residual_norm_sublayer(tape, store, x, Some(within_groups), None, &params.within, &params.ln_within, pos)?;
            residual_norm_sublayer(tape, store, h, Some(across_groups), None, &params.within, &params.ln_within, pos)
        }
        SelfAttnMode::MaskedStandard => {
            let pat = Arc::new(union_pattern(r, within_groups, across_groups)?);
            residual_norm_sublayer(tape, store, x, None, Some(pat), &params.within, &params.ln_within, pos)
        }
        SelfAttnMode::Standard => {
            let pat = Arc::new(AttnPattern::full(r, r));
            residual_norm_sublayer(tape, store, x, None, Some(pat), &params.within, &params.ln_within, pos)
        }
        SelfAttnMode::WithinOnly => {
            residual_norm_sublayer(tape, store, x, Some(within_groups), None, &params.within, &params.ln_within, pos)
        }
        SelfAttnMode::AcrossOnly => {
            residual_norm_sublayer(tape, store, x, Some(across_groups), None, &params.across, &params.ln_across, pos)
        }
        SelfAttnMode::AcrossInstOnly | SelfAttnMode::AcrossKptOnly => Err(Error::contract(
            "group_self_attention",
            "type-subset modes need the layout-based entry point",
        )),
    }
}

/// The decoder self-attention block in the configured mode over [N, K+1, D]
/// queries. Every attention sublayer is followed by residual add + layer
/// norm; `pos` (flattened [N(K+1), D]) is added to queries and keys only.
#[allow(clippy::too_many_arguments)]
pub fn group_self_attention<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    queries: Var,
    layout: QueryLayout,
    params: &GroupAttnParams,
    mode: SelfAttnMode,
    pos: Option<Var>,
) -> Result<Var> {
    expect_query_shape(tape, queries, layout)?;
    let d = tape.shape(queries)[2];
    let x = tape.reshape(queries, vec![layout.total(), d])?;
    let out = match mode {
        SelfAttnMode::AcrossInstOnly | SelfAttnMode::AcrossKptOnly => {
            let h = residual_norm_sublayer(
                tape,
                store,
                x,
                Some(&layout.instance_groups()),
                None,
                &params.within,
                &params.ln_within,
                pos,
            )?;
            let subset: Vec<usize> = match mode {
                SelfAttnMode::AcrossInstOnly => vec![layout.instance_type()],
                _ => (0..layout.n_keypoints()).collect(),
            };
            across_subset_sublayer(tape, store, h, layout, &subset, &params.across, &params.ln_across, pos)?
        }
        _ => group_self_attention_flat(
            tape,
            store,
            x,
            &layout.instance_groups(),
            &layout.type_groups(),
            params,
            mode,
            pos,
        )?,
    };
    tape.reshape(out, vec![layout.n_instances, layout.types(), d])
}

/// Deformable cross-attention for queries at the given reference points
/// (normalized, one per query, detached). Offsets and weights come from
/// query content (+pos); each level is sampled bilinearly at
/// ref + offset/extent; the per-head softmax-weighted sum is projected out.
#[allow(clippy::too_many_arguments)]
pub fn deformable_cross_attention<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    queries: Var,
    ref_points: &[S],
    memory: Var,
    levels: &[(usize, usize)],
    p: &DeformableParams,
    pos: Option<Var>,
) -> Result<Var> {
    let r = tape.shape(queries)[0];
    if ref_points.len() != r * 2 {
        return Err(Error::contract(
            "deformable_cross_attention",
            format!("{} reference coordinates for {r} queries", ref_points.len()),
        ));
    }
    if levels.len() != p.n_levels {
        return Err(Error::contract(
            "deformable_cross_attention",
            format!("{} levels vs {} configured", levels.len(), p.n_levels),
        ));
    }
    let samples = p.heads * p.n_levels * p.n_points;
    let content = match pos {
        Some(pe) => tape.add(queries, pe)?,
        None => queries,
    };

    let offset_w = tape.param(store, p.offset_w);
    let offset_b = tape.param(store, p.offset_b);
    let offsets = tape.linear(content, offset_w, offset_b)?; // [R, samples·2]

    let weight_w = tape.param(store, p.weight_w);
    let weight_b = tape.param(store, p.weight_b);
    let wl = tape.linear(content, weight_w, weight_b)?; // [R, samples]
    let wl = tape.reshape(wl, vec![r * p.heads, p.n_levels * p.n_points])?;
    let wl = tape.softmax(wl, 1)?;
    let weights = tape.reshape(wl, vec![r, samples])?;

    // offsets are in cells of each level: scale by 1/extent, then add the
    // broadcast reference point.
    let mut scale = vec![S::zero(); r * samples * 2];
    let mut refs = vec![S::zero(); r * samples * 2];
    for q in 0..r {
        for h in 0..p.heads {
            for l in 0..p.n_levels {
                let (lh, lw) = levels[l];
                for s in 0..p.n_points {
                    let idx = (((q * p.heads + h) * p.n_levels + l) * p.n_points + s) * 2;
                    scale[idx] = S::one() / S::from_usize(lw);
                    scale[idx + 1] = S::one() / S::from_usize(lh);
                    refs[idx] = ref_points[q * 2];
                    refs[idx + 1] = ref_points[q * 2 + 1];
                }
            }
        }
    }
    let scale = tape.constant(Tensor::new(vec![r, samples * 2], scale)?);
    let refs = tape.constant(Tensor::new(vec![r, samples * 2], refs)?);
    let scaled = tape.mul(offsets, scale)?;
    let positions = tape.add(scaled, refs)?;

    let value_w = tape.param(store, p.value_w);
    let value_b = tape.param(store, p.value_b);
    let value = tape.linear(memory, value_w, value_b)?;

    let sampled = tape.msda(value, positions, weights, levels, p.heads)?;
    let out_w = tape.param(store, p.out_w);
    let out_b = tape.param(store, p.out_b);
    tape.linear(sampled, out_w, out_b)
}
