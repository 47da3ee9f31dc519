//! The full network: strided conv backbone, deformable encoder over the
//! flattened multi-level memory, dense per-position proposals, query
//! construction, and a decoder whose self-attention runs in the configured
//! mode over N·(K+1) queries with iterative keypoint refinement.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    deformable_cross_attention, group_self_attention, group_self_attention_flat, layer_norm_with,
    xavier, DeformableParams, GroupAttnParams, LnParams, QueryLayout, SelfAttnMode,
};
use crate::error::{Error, Result};
use crate::matching::PoseSet;
use crate::metrics::PosePrediction;
use crate::numgrad::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Classification bias prior: start every logit near σ⁻¹(0.01) so the focal
/// loss sees mostly-background scores from step one.
const CLS_PRIOR: f64 = 0.01;

/// Initial keypoint ring radius in pre-sigmoid units (≈ 0.09 of the image
/// near the centre, matching a typical figure's keypoint spread).
const RING_RADIUS: f64 = 0.35;

/// How the decoder queries are organized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueryDesign {
    /// K keypoint queries plus one instance query per candidate pose.
    #[default]
    InstAndKpt,
    /// Keypoint queries only; pose scores come from the averaged keypoint
    /// features.
    OnlyKpt,
    /// One instance query per pose regressing all K keypoints at once.
    OnlyInst,
}

impl QueryDesign {
    pub const ALL: [QueryDesign; 3] = [QueryDesign::InstAndKpt, QueryDesign::OnlyKpt, QueryDesign::OnlyInst];

    pub fn as_str(&self) -> &'static str {
        match self {
            QueryDesign::InstAndKpt => "inst_and_kpt",
            QueryDesign::OnlyKpt => "only_kpt",
            QueryDesign::OnlyInst => "only_inst",
        }
    }
}

impl std::str::FromStr for QueryDesign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        QueryDesign::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown query design {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_instances: usize,
    pub n_keypoints: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Backbone output strides, one feature level per entry.
    pub strides: Vec<usize>,
    /// Sampling points per head and level in deformable attention.
    pub sample_points: usize,
    pub self_attn: SelfAttnMode,
    pub query_design: QueryDesign,
    /// Add sinusoidal encodings of the current reference points to Q/K of
    /// decoder self-attention and to the deformable offset/weight heads.
    pub query_pos_encoding: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_instances: 20,
            n_keypoints: 5,
            model_dim: 16,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 2,
            strides: vec![8, 16],
            sample_points: 2,
            self_attn: SelfAttnMode::default(),
            query_design: QueryDesign::default(),
            query_pos_encoding: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_instances == 0 || self.n_keypoints == 0 {
            return Err(Error::Config("n_instances and n_keypoints must be ≥ 1".into()));
        }
        if self.model_dim == 0 || self.model_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of 4 (split across x/y sin/cos encodings)",
                self.model_dim
            )));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.decoder_layers == 0 {
            return Err(Error::Config("decoder_layers must be ≥ 1".into()));
        }
        if self.strides.is_empty() {
            return Err(Error::Config("at least one feature level required".into()));
        }
        for w in self.strides.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config(format!("strides must be strictly increasing, got {:?}", self.strides)));
            }
        }
        for &s in &self.strides {
            if s < 2 || !s.is_power_of_two() {
                return Err(Error::Config(format!(
                    "stride {s} unsupported: the backbone halves resolution per block, so strides must be powers of two ≥ 2"
                )));
            }
        }
        if self.sample_points == 0 {
            return Err(Error::Config("sample_points must be ≥ 1".into()));
        }
        let subset = matches!(self.self_attn, SelfAttnMode::AcrossInstOnly | SelfAttnMode::AcrossKptOnly);
        if subset && self.query_design != QueryDesign::InstAndKpt {
            return Err(Error::Config(format!(
                "self_attn mode {:?} needs the instance+keypoint query design",
                self.self_attn
            )));
        }
        Ok(())
    }

    pub fn n_levels(&self) -> usize {
        self.strides.len()
    }

    pub fn layout(&self) -> Result<QueryLayout> {
        QueryLayout::new(self.n_instances, self.n_keypoints)
    }

    /// Rows in the flattened decoder query tensor.
    pub fn n_queries(&self) -> usize {
        match self.query_design {
            QueryDesign::InstAndKpt => self.n_instances * (self.n_keypoints + 1),
            QueryDesign::OnlyKpt => self.n_instances * self.n_keypoints,
            QueryDesign::OnlyInst => self.n_instances,
        }
    }
}

struct ConvBlock {
    w: ParamId,
    b: ParamId,
}

struct LevelTap {
    /// Which backbone block output this level projects from.
    chain_index: usize,
    w: ParamId,
    b: ParamId,
    ln: LnParams,
}

/// Two-layer perceptron with ReLU in between.
struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Mlp {
    fn create<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        zero_out: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w2 = if zero_out {
            Tensor::zeros(vec![d_hidden, d_out])
        } else {
            xavier(rng, d_hidden, d_out)
        };
        Ok(Mlp {
            w1: store.add(format!("{prefix}.w1"), xavier(rng, d_in, d_hidden))?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(vec![d_hidden]))?,
            w2: store.add(format!("{prefix}.w2"), w2)?,
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(vec![d_out]))?,
        })
    }

    fn apply<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let h = linear_p(tape, store, x, self.w1, self.b1)?;
        let h = tape.relu(h)?;
        linear_p(tape, store, h, self.w2, self.b2)
    }
}

struct EncoderLayer {
    attn: DeformableParams,
    ln_attn: LnParams,
    ffn: Mlp,
    ln_ffn: LnParams,
}

struct DecoderLayer {
    self_attn: GroupAttnParams,
    cross: DeformableParams,
    ln_cross: LnParams,
    ffn: Mlp,
    ln_ffn: LnParams,
    refine: Mlp,
    cls_w: ParamId,
    cls_b: ParamId,
}

/// Parameter handles for the whole network. The values live in a
/// [`ParamStore`]; this struct only knows the wiring.
pub struct Model {
    config: ModelConfig,
    chain: Vec<ConvBlock>,
    taps: Vec<LevelTap>,
    level_embed: ParamId,
    encoder: Vec<EncoderLayer>,
    score_head: Mlp,
    pose_head: Mlp,
    kpt_embed: ParamId,
    inst_embed: ParamId,
    decoder: Vec<DecoderLayer>,
}

/// Encoder output: the refined flattened memory plus the per-position
/// geometry needed by deformable sampling and query construction.
#[derive(Debug)]
pub struct EncoderMemory<S> {
    /// Refined features, all levels stacked: [P, D].
    pub memory: Var,
    /// Per-level views of `memory`, each [hₗ, wₗ, D].
    pub level_maps: Vec<Var>,
    /// (height, width) per level.
    pub levels: Vec<(usize, usize)>,
    /// Normalized (x, y) cell centers, P·2 values.
    pub coords: Arc<Vec<S>>,
    /// Level index per memory row.
    pub level_of: Vec<usize>,
    /// Positional encoding (sinusoid of coords + level embedding): [P, D].
    pub pos: Var,
}

/// Per-position instance proposals from the shared dense heads.
pub struct DenseProposals {
    /// Raw classification logits, [P, 1].
    pub score_logits: Var,
    /// Sigmoid scores, [P].
    pub scores: Var,
    /// Per-position poses as anchor-relative refinements, [P, 2K].
    pub poses: Var,
}

/// Initial decoder queries built from the selected proposals.
pub struct QueryBundle<S> {
    pub n: usize,
    pub k: usize,
    /// [N·K, D] keypoint query contents (absent in the instance-only design).
    pub kpt_content: Option<Var>,
    /// [N, D] instance query contents (absent in the keypoint-only design).
    pub inst_content: Option<Var>,
    /// Detached initial keypoint positions, N·K·2 normalized values.
    pub kpt_positions: Vec<S>,
}

impl<S: Scalar> QueryBundle<S> {
    /// Instance reference points: the mean of each pose's K keypoints.
    pub fn inst_refs(&self) -> Vec<S> {
        mean_refs(&self.kpt_positions, self.n, self.k)
    }
}

fn mean_refs<S: Scalar>(kpt_refs: &[S], n: usize, k: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(n * 2);
    let inv = S::one() / S::from_usize(k);
    for i in 0..n {
        let mut mx = S::zero();
        let mut my = S::zero();
        for t in 0..k {
            mx += kpt_refs[(i * k + t) * 2];
            my += kpt_refs[(i * k + t) * 2 + 1];
        }
        out.push(mx * inv);
        out.push(my * inv);
    }
    out
}

/// One pose set per supervision point: the dense-proposal stage plus every
/// decoder layer, in forward order.
pub struct ModelOutput {
    pub proposals: PoseSet,
    pub layers: Vec<PoseSet>,
}

impl ModelOutput {
    /// All sets that receive the matching loss, proposal stage first.
    pub fn supervised_sets(&self) -> Vec<PoseSet> {
        let mut v = Vec::with_capacity(self.layers.len() + 1);
        v.push(self.proposals.clone());
        v.extend(self.layers.iter().cloned());
        v
    }

    /// The last decoder layer's output — what evaluation reads.
    pub fn final_set(&self) -> &PoseSet {
        self.layers.last().expect("decoder_layers ≥ 1")
    }
}

fn linear_p<S: Scalar>(tape: &mut Tape<S>, store: &ParamStore<S>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let wv = tape.param(store, w);
    let bv = tape.param(store, b);
    tape.linear(x, wv, bv)
}

fn conv_init<S: Scalar>(rng: &mut impl Rng, kh: usize, kw: usize, cin: usize, cout: usize) -> Tensor<S> {
    let flat: Tensor<S> = xavier(rng, kh * kw * cin, cout);
    Tensor::new(vec![kh, kw, cin, cout], flat.into_data()).expect("conv kernel element count")
}

fn logit_clamped<S: Scalar>(p: S) -> S {
    let eps = S::from_f64(1e-6);
    let p = p.max(eps).min(S::one() - eps);
    (p / (S::one() - p)).ln()
}

/// Interleaved sin/cos features of normalized points: x fills the first
/// D/2 channels, y the second, each at geometrically spaced frequencies.
pub fn sine_embed<S: Scalar>(points: &[S], dim: usize) -> Vec<S> {
    assert!(dim % 4 == 0, "sine embedding needs dim divisible by 4");
    let half = dim / 2;
    let n = points.len() / 2;
    let tau = std::f64::consts::TAU;
    let mut out = Vec::with_capacity(n * dim);
    for p in 0..n {
        for c in 0..2 {
            let v = points[p * 2 + c].to_f64() * tau;
            for j in 0..half {
                let t = 10000f64.powf(2.0 * (j / 2) as f64 / half as f64);
                let arg = v / t;
                out.push(S::from_f64(if j % 2 == 0 { arg.sin() } else { arg.cos() }));
            }
        }
    }
    out
}

/// Indices of the `n` best scores, ties broken toward the lower index.
pub fn select_top_n<S: Scalar>(scores: &[S], n: usize) -> Result<Vec<usize>> {
    if scores.len() < n {
        return Err(Error::Config(format!(
            "cannot select {n} proposals from {} positions; shrink n_instances or the strides",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].to_f64().total_cmp(&scores[a].to_f64()).then(a.cmp(&b)));
    idx.truncate(n);
    Ok(idx)
}

impl Model {
    /// Create every parameter in `store` (deterministically from
    /// `config.seed`) and return the wiring.
    pub fn new<S: Scalar>(config: &ModelConfig, store: &mut ParamStore<S>) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.model_dim;
        let k = config.n_keypoints;
        let max_stride = *config.strides.last().expect("validated non-empty");
        let chain_len = max_stride.trailing_zeros() as usize;

        let width = |i: usize| ((d / 4) << i).min(d).max(1);
        let mut chain = Vec::with_capacity(chain_len);
        let mut cin = 1;
        for i in 0..chain_len {
            let cout = width(i);
            chain.push(ConvBlock {
                w: store.add(format!("backbone.{i}.w"), conv_init(&mut rng, 3, 3, cin, cout))?,
                b: store.add(format!("backbone.{i}.b"), Tensor::zeros(vec![cout]))?,
            });
            cin = cout;
        }

        let mut taps = Vec::with_capacity(config.strides.len());
        for (l, &s) in config.strides.iter().enumerate() {
            let chain_index = s.trailing_zeros() as usize - 1;
            let c = width(chain_index);
            taps.push(LevelTap {
                chain_index,
                w: store.add(format!("level.{l}.w"), conv_init(&mut rng, 1, 1, c, d))?,
                b: store.add(format!("level.{l}.b"), Tensor::zeros(vec![d]))?,
                ln: LnParams::create(store, &format!("level.{l}.ln"), d)?,
            });
        }
        let level_embed = store.add("level_embed", xavier(&mut rng, config.n_levels(), d))?;

        let mut encoder = Vec::with_capacity(config.encoder_layers);
        for l in 0..config.encoder_layers {
            encoder.push(EncoderLayer {
                attn: DeformableParams::create(
                    store,
                    &format!("encoder.{l}.attn"),
                    d,
                    config.heads,
                    config.n_levels(),
                    config.sample_points,
                    &mut rng,
                )?,
                ln_attn: LnParams::create(store, &format!("encoder.{l}.ln_attn"), d)?,
                ffn: Mlp::create(store, &format!("encoder.{l}.ffn"), d, 2 * d, d, false, &mut rng)?,
                ln_ffn: LnParams::create(store, &format!("encoder.{l}.ln_ffn"), d)?,
            });
        }

        let score_head = Mlp::create(store, "dense.score", d, d, 1, false, &mut rng)?;
        let bias = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
        store.get_mut(score_head.b2).data_mut()[0] = S::from_f64(bias);
        let pose_head = Mlp::create(store, "dense.pose", d, d, 2 * k, true, &mut rng)?;
        // Spread the K initial keypoints in a ring around the anchor instead
        // of stacking them on top of it: a collapsed start is a strong local
        // optimum when figure orientation is uniform, because the expected
        // position of every keypoint given only the centre is the centre.
        {
            let b = store.get_mut(pose_head.b2).data_mut();
            for j in 0..k {
                let theta = std::f64::consts::TAU * j as f64 / k as f64;
                b[2 * j] = S::from_f64(RING_RADIUS * theta.cos());
                b[2 * j + 1] = S::from_f64(RING_RADIUS * theta.sin());
            }
        }

        let kpt_embed = store.add("kpt_embed", xavier(&mut rng, k, d))?;
        let inst_embed = store.add("inst_embed", xavier(&mut rng, 1, d))?;

        let refine_out = match config.query_design {
            QueryDesign::OnlyInst => 2 * k,
            _ => 2,
        };
        let mut decoder = Vec::with_capacity(config.decoder_layers);
        for l in 0..config.decoder_layers {
            let self_attn = GroupAttnParams::create(store, &format!("decoder.{l}.self"), d, config.heads, &mut rng)?;
            let cross = DeformableParams::create(
                store,
                &format!("decoder.{l}.cross"),
                d,
                config.heads,
                config.n_levels(),
                config.sample_points,
                &mut rng,
            )?;
            let ln_cross = LnParams::create(store, &format!("decoder.{l}.ln_cross"), d)?;
            let ffn = Mlp::create(store, &format!("decoder.{l}.ffn"), d, 2 * d, d, false, &mut rng)?;
            let ln_ffn = LnParams::create(store, &format!("decoder.{l}.ln_ffn"), d)?;
            let refine = Mlp::create(store, &format!("decoder.{l}.refine"), d, d, refine_out, true, &mut rng)?;
            let cls_w = store.add(format!("decoder.{l}.cls_w"), xavier(&mut rng, d, 1))?;
            let cls_b = store.add(format!("decoder.{l}.cls_b"), Tensor::full(vec![1], S::from_f64(bias)))?;
            decoder.push(DecoderLayer { self_attn, cross, ln_cross, ffn, ln_ffn, refine, cls_w, cls_b });
        }

        Ok(Model {
            config: config.clone(),
            chain,
            taps,
            level_embed,
            encoder,
            score_head,
            pose_head,
            kpt_embed,
            inst_embed,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Backbone + level projections + encoder refinement.
    pub fn encode_image<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        image: Var,
    ) -> Result<EncoderMemory<S>> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 3 || shape[2] != 1 {
            return Err(Error::shape("encode_image", &shape, &[0, 0, 1]));
        }
        let (h, w) = (shape[0], shape[1]);
        let max_stride = *self.config.strides.last().expect("validated");
        if h % max_stride != 0 || w % max_stride != 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} not divisible by the largest stride {max_stride}"
            )));
        }

        let mut x = image;
        let mut chain_out = Vec::with_capacity(self.chain.len());
        for block in &self.chain {
            x = {
                let wv = tape.param(store, block.w);
                let bv = tape.param(store, block.b);
                let c = tape.conv2d(x, wv, bv, 2, 1)?;
                tape.relu(c)?
            };
            chain_out.push(x);
        }

        let mut flats = Vec::with_capacity(self.taps.len());
        let mut levels = Vec::with_capacity(self.taps.len());
        for tap in &self.taps {
            let src = chain_out[tap.chain_index];
            let wv = tape.param(store, tap.w);
            let bv = tape.param(store, tap.b);
            let m = tape.conv2d(src, wv, bv, 1, 0)?;
            let s = tape.shape(m).to_vec();
            let flat = tape.reshape(m, vec![s[0] * s[1], s[2]])?;
            flats.push(layer_norm_with(tape, store, flat, &tap.ln)?);
            levels.push((s[0], s[1]));
        }
        let mut memory = tape.concat_rows(&flats)?;

        let p_total: usize = levels.iter().map(|&(h, w)| h * w).sum();
        let mut coords = Vec::with_capacity(p_total * 2);
        let mut level_of = Vec::with_capacity(p_total);
        for (l, &(lh, lw)) in levels.iter().enumerate() {
            for r in 0..lh {
                for c in 0..lw {
                    coords.push(S::from_f64((c as f64 + 0.5) / lw as f64));
                    coords.push(S::from_f64((r as f64 + 0.5) / lh as f64));
                    level_of.push(l);
                }
            }
        }
        let coords = Arc::new(coords);

        let sine = Tensor::new(vec![p_total, self.config.model_dim], sine_embed(&coords, self.config.model_dim))?;
        let sine = tape.constant(sine);
        let le = tape.param(store, self.level_embed);
        let le_rows = tape.gather_rows(le, &level_of)?;
        let pos = tape.add(sine, le_rows)?;

        for layer in &self.encoder {
            let attn = deformable_cross_attention(tape, store, memory, &coords, memory, &levels, &layer.attn, Some(pos))?;
            let h = tape.add(memory, attn)?;
            let h = layer_norm_with(tape, store, h, &layer.ln_attn)?;
            let f = layer.ffn.apply(tape, store, h)?;
            let f = tape.add(h, f)?;
            memory = layer_norm_with(tape, store, f, &layer.ln_ffn)?;
        }

        let mut level_maps = Vec::with_capacity(levels.len());
        let mut row = 0;
        for &(lh, lw) in &levels {
            let slab = tape.slice_rows(memory, row, lh * lw)?;
            level_maps.push(tape.reshape(slab, vec![lh, lw, self.config.model_dim])?);
            row += lh * lw;
        }

        Ok(EncoderMemory { memory, level_maps, levels, coords, level_of, pos })
    }

    /// Shared per-position heads: a score and an anchor-relative pose for
    /// every memory row.
    pub fn dense_proposals<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        mem: &EncoderMemory<S>,
    ) -> Result<DenseProposals> {
        let p = tape.shape(mem.memory)[0];
        let k = self.config.n_keypoints;

        let score_logits = self.score_head.apply(tape, store, mem.memory)?;
        let probs = tape.sigmoid(score_logits)?;
        let scores = tape.reshape(probs, vec![p])?;

        let delta = self.pose_head.apply(tape, store, mem.memory)?;
        let mut anchor = Vec::with_capacity(p * 2 * k);
        for pi in 0..p {
            let lx = logit_clamped(mem.coords[pi * 2]);
            let ly = logit_clamped(mem.coords[pi * 2 + 1]);
            for _ in 0..k {
                anchor.push(lx);
                anchor.push(ly);
            }
        }
        let anchor = tape.constant(Tensor::new(vec![p, 2 * k], anchor)?);
        let shifted = tape.add(delta, anchor)?;
        let poses = tape.sigmoid(shifted)?;

        Ok(DenseProposals { score_logits, scores, poses })
    }

    /// Build the initial queries from the selected proposal positions.
    pub fn construct_queries<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        mem: &EncoderMemory<S>,
        proposals: &DenseProposals,
        selection: &[usize],
    ) -> Result<QueryBundle<S>> {
        let n = self.config.n_instances;
        let k = self.config.n_keypoints;
        if selection.len() != n {
            return Err(Error::contract(
                "construct_queries",
                format!("{} selected positions for {n} instances", selection.len()),
            ));
        }

        let pose_data = tape.data(proposals.poses);
        let mut kpt_positions = Vec::with_capacity(n * k * 2);
        for &pi in selection {
            kpt_positions.extend_from_slice(&pose_data[pi * 2 * k..(pi + 1) * 2 * k]);
        }

        let kpt_content = match self.config.query_design {
            QueryDesign::OnlyInst => None,
            _ => {
                let feat = tape.gather_rows(mem.memory, selection)?;
                let rep: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(k)).collect();
                let feat_rep = tape.gather_rows(feat, &rep)?;
                let emb = tape.param(store, self.kpt_embed);
                let tile: Vec<usize> = (0..n).flat_map(|_| 0..k).collect();
                let emb_rep = tape.gather_rows(emb, &tile)?;
                Some(tape.add(feat_rep, emb_rep)?)
            }
        };

        let inst_content = match self.config.query_design {
            QueryDesign::OnlyKpt => None,
            _ => {
                let emb = tape.param(store, self.inst_embed);
                Some(tape.gather_rows(emb, &vec![0; n])?)
            }
        };

        Ok(QueryBundle { n, k, kpt_content, inst_content, kpt_positions })
    }

    /// Flatten the bundle into the decoder's row order.
    pub fn flatten_queries<S: Scalar>(&self, tape: &mut Tape<S>, bundle: &QueryBundle<S>) -> Result<Var> {
        let (n, k) = (bundle.n, bundle.k);
        match self.config.query_design {
            QueryDesign::InstAndKpt => {
                let kpt = bundle.kpt_content.expect("design has keypoint queries");
                let inst = bundle.inst_content.expect("design has instance queries");
                let stacked = tape.concat_rows(&[kpt, inst])?;
                let layout = QueryLayout::new(n, k)?;
                let mut perm = Vec::with_capacity(layout.total());
                for i in 0..n {
                    for t in 0..=k {
                        perm.push(if t < k { i * k + t } else { n * k + i });
                    }
                }
                tape.gather_rows(stacked, &perm)
            }
            QueryDesign::OnlyKpt => Ok(bundle.kpt_content.expect("design has keypoint queries")),
            QueryDesign::OnlyInst => Ok(bundle.inst_content.expect("design has instance queries")),
        }
    }

    /// Reference point per decoder query row, 2 values each.
    fn cross_refs<S: Scalar>(&self, kpt_refs: &[S]) -> Vec<S> {
        let n = self.config.n_instances;
        let k = self.config.n_keypoints;
        match self.config.query_design {
            QueryDesign::InstAndKpt => {
                let means = mean_refs(kpt_refs, n, k);
                let mut out = Vec::with_capacity(n * (k + 1) * 2);
                for i in 0..n {
                    out.extend_from_slice(&kpt_refs[i * k * 2..(i + 1) * k * 2]);
                    out.extend_from_slice(&means[i * 2..i * 2 + 2]);
                }
                out
            }
            QueryDesign::OnlyKpt => kpt_refs.to_vec(),
            QueryDesign::OnlyInst => mean_refs(kpt_refs, n, k),
        }
    }

    /// One decoder layer: self-attention in the configured mode, deformable
    /// cross-attention at the current reference points, FFN, and the
    /// per-layer heads. Returns the updated queries and this layer's poses.
    pub fn apply_decoder_layer<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        layer_index: usize,
        queries: Var,
        kpt_refs: &[S],
        memory: Var,
        levels: &[(usize, usize)],
    ) -> Result<(Var, PoseSet)> {
        let layer = &self.decoder[layer_index];
        let n = self.config.n_instances;
        let k = self.config.n_keypoints;
        let d = self.config.model_dim;
        let refs = self.cross_refs(kpt_refs);
        let pos = if self.config.query_pos_encoding {
            let t = Tensor::new(vec![refs.len() / 2, d], sine_embed(&refs, d))?;
            Some(tape.constant(t))
        } else {
            None
        };

        let x = match self.config.query_design {
            QueryDesign::InstAndKpt => {
                let layout = QueryLayout::new(n, k)?;
                let grid = tape.reshape(queries, vec![n, k + 1, d])?;
                let y = group_self_attention(tape, store, grid, layout, &layer.self_attn, self.config.self_attn, pos)?;
                tape.reshape(y, vec![layout.total(), d])?
            }
            QueryDesign::OnlyKpt => {
                let within: Vec<Vec<usize>> = (0..n).map(|i| (i * k..(i + 1) * k).collect()).collect();
                let across: Vec<Vec<usize>> = (0..k).map(|t| (0..n).map(|i| i * k + t).collect()).collect();
                group_self_attention_flat(tape, store, queries, &within, &across, &layer.self_attn, self.config.self_attn, pos)?
            }
            QueryDesign::OnlyInst => {
                let within: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
                let across: Vec<Vec<usize>> = vec![(0..n).collect()];
                group_self_attention_flat(tape, store, queries, &within, &across, &layer.self_attn, self.config.self_attn, pos)?
            }
        };

        let cross = deformable_cross_attention(tape, store, x, &refs, memory, levels, &layer.cross, pos)?;
        let h = tape.add(x, cross)?;
        let h = layer_norm_with(tape, store, h, &layer.ln_cross)?;
        let f = layer.ffn.apply(tape, store, h)?;
        let f = tape.add(h, f)?;
        let out = layer_norm_with(tape, store, f, &layer.ln_ffn)?;

        let (kpt_rows, cls_rows) = match self.config.query_design {
            QueryDesign::InstAndKpt => {
                let mut kpt_idx = Vec::with_capacity(n * k);
                let mut inst_idx = Vec::with_capacity(n);
                for i in 0..n {
                    for t in 0..k {
                        kpt_idx.push(i * (k + 1) + t);
                    }
                    inst_idx.push(i * (k + 1) + k);
                }
                (tape.gather_rows(out, &kpt_idx)?, tape.gather_rows(out, &inst_idx)?)
            }
            QueryDesign::OnlyKpt => {
                let avg = Tensor::from_fn(vec![n, n * k], |e| {
                    let (r, c) = (e / (n * k), e % (n * k));
                    if c / k == r {
                        S::one() / S::from_usize(k)
                    } else {
                        S::zero()
                    }
                });
                let avg = tape.constant(avg);
                (out, tape.matmul(avg, out)?)
            }
            QueryDesign::OnlyInst => (out, out),
        };

        let delta = layer.refine.apply(tape, store, kpt_rows)?;
        let base: Vec<S> = kpt_refs.iter().map(|&r| logit_clamped(r)).collect();
        let base_shape = tape.shape(delta).to_vec();
        let base = tape.constant(Tensor::new(base_shape, base)?);
        let shifted = tape.add(delta, base)?;
        let refined = tape.sigmoid(shifted)?;
        let keypoints = tape.reshape(refined, vec![n, 2 * k])?;

        let logits = linear_p(tape, store, cls_rows, layer.cls_w, layer.cls_b)?;
        let score_logits = tape.reshape(logits, vec![n])?;

        Ok((out, PoseSet { score_logits, keypoints }))
    }

    /// Full forward pass: one [`PoseSet`] per decoder layer plus the dense
    /// proposal stage for auxiliary supervision.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, image: Var) -> Result<ModelOutput> {
        let mem = self.encode_image(tape, store, image)?;
        let dense = self.dense_proposals(tape, store, &mem)?;
        let scores: Vec<S> = tape.data(dense.scores).to_vec();
        let selection = select_top_n(&scores, self.config.n_instances)?;

        let sel_logits = tape.gather_rows(dense.score_logits, &selection)?;
        let sel_logits = tape.reshape(sel_logits, vec![self.config.n_instances])?;
        let sel_poses = tape.gather_rows(dense.poses, &selection)?;
        let proposals = PoseSet { score_logits: sel_logits, keypoints: sel_poses };

        let bundle = self.construct_queries(tape, store, &mem, &dense, &selection)?;
        let mut kpt_refs = bundle.kpt_positions.clone();
        let mut queries = self.flatten_queries(tape, &bundle)?;

        let mut layers = Vec::with_capacity(self.config.decoder_layers);
        for l in 0..self.config.decoder_layers {
            let (q, set) = self.apply_decoder_layer(tape, store, l, queries, &kpt_refs, mem.memory, &mem.levels)?;
            queries = q;
            kpt_refs = tape.data(set.keypoints).to_vec();
            layers.push(set);
        }

        Ok(ModelOutput { proposals, layers })
    }
}

/// Decode a pose set into plain evaluator inputs (sigmoid scores, f64).
pub fn to_predictions<S: Scalar>(tape: &Tape<S>, set: &PoseSet) -> Vec<PosePrediction> {
    let logits = tape.data(set.score_logits);
    let kpts = tape.data(set.keypoints);
    let n = logits.len();
    let per = kpts.len() / n.max(1);
    (0..n)
        .map(|i| PosePrediction {
            score: 1.0 / (1.0 + (-logits[i].to_f64()).exp()),
            keypoints: kpts[i * per..(i + 1) * per].iter().map(|&v| Scalar::to_f64(v)).collect(),
        })
        .collect()
}
