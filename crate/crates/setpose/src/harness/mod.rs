//! Run configuration, optimizer, training loop, checkpoints, evaluation,
//! and the ablation driver behind the CLI.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::SelfAttnMode;
use crate::error::{Error, Result};
use crate::matching::{compute_losses, GroundTruthPose, LossWeights};
use crate::metrics::{duplicate_rate, evaluate_ap, EvalConfig, ImageEval};
use crate::model::{to_predictions, Model, ModelConfig, QueryDesign};
use crate::numgrad::{ParamStore, Tape, Tensor};
use crate::synthpose::{generate_dataset, load_dataset, DataConfig, Dataset, RenderedSample};

/// One flat key-value file drives a whole run. Unknown keys are rejected so
/// a typo'd setting can't silently fall back to its default; absent keys take
/// the desk-scale defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // model
    pub n_instances: usize,
    pub n_keypoints: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub strides: Vec<usize>,
    pub sample_points: usize,
    pub self_attn: SelfAttnMode,
    pub query_design: QueryDesign,
    pub query_pos_encoding: bool,
    // loss and matching
    pub w_cls: f64,
    pub w_l1: f64,
    pub w_oks: f64,
    pub c_cls: f64,
    pub c_l1: f64,
    pub c_oks: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub oks_kappa: f64,
    // data
    pub train_data: String,
    pub val_data: String,
    // optimizer and schedule
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub decay_epoch: usize,
    pub decay_factor: f64,
    // bookkeeping
    pub seed: u64,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let w = LossWeights::default();
        RunConfig {
            n_instances: m.n_instances,
            n_keypoints: m.n_keypoints,
            model_dim: m.model_dim,
            heads: m.heads,
            encoder_layers: m.encoder_layers,
            decoder_layers: m.decoder_layers,
            strides: m.strides,
            sample_points: m.sample_points,
            self_attn: m.self_attn,
            query_design: m.query_design,
            query_pos_encoding: m.query_pos_encoding,
            w_cls: w.w_cls,
            w_l1: w.w_l1,
            w_oks: w.w_oks,
            c_cls: w.c_cls,
            c_l1: w.c_l1,
            c_oks: w.c_oks,
            focal_alpha: w.focal_alpha,
            focal_gamma: w.focal_gamma,
            oks_kappa: 0.1,
            train_data: String::new(),
            val_data: String::new(),
            epochs: 40,
            batch_size: 8,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            decay_epoch: 30,
            decay_factor: 0.1,
            seed: 0,
            out_dir: "run_out".into(),
        }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_instances: self.n_instances,
            n_keypoints: self.n_keypoints,
            model_dim: self.model_dim,
            heads: self.heads,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            strides: self.strides.clone(),
            sample_points: self.sample_points,
            self_attn: self.self_attn,
            query_design: self.query_design,
            query_pos_encoding: self.query_pos_encoding,
            seed: self.seed,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            w_cls: self.w_cls,
            w_l1: self.w_l1,
            w_oks: self.w_oks,
            c_cls: self.c_cls,
            c_l1: self.c_l1,
            c_oks: self.c_oks,
            focal_alpha: self.focal_alpha,
            focal_gamma: self.focal_gamma,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            kappa: self.oks_kappa,
            ..EvalConfig::default()
        }
    }

    pub fn kappas(&self) -> Vec<f64> {
        vec![self.oks_kappa; self.n_keypoints]
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.loss_weights().validate()?;
        self.eval_config().validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be ≥ 1".into()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be ≥ 0".into()));
        }
        if self.decay_factor <= 0.0 || self.decay_factor > 1.0 {
            return Err(Error::Config(format!("decay_factor {} must be in (0, 1]", self.decay_factor)));
        }
        Ok(())
    }
}

/// Parse a run config file; every failure here is a configuration error
/// (exit code 2), including a missing file.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let config: RunConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

/// Flat config for `gen-data`: the scene parameters plus how many samples to
/// draw and from which seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub height: usize,
    pub width: usize,
    pub n_keypoints: usize,
    pub max_instances: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub margin: f64,
    pub p_occluded: f64,
    pub crowding: bool,
    pub count: usize,
    pub seed: u64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        let d = DataConfig::default();
        GenDataConfig {
            height: d.height,
            width: d.width,
            n_keypoints: d.n_keypoints,
            max_instances: d.max_instances,
            scale_min: d.scale_min,
            scale_max: d.scale_max,
            margin: d.margin,
            p_occluded: d.p_occluded,
            crowding: d.crowding,
            count: 2000,
            seed: 0,
        }
    }
}

impl GenDataConfig {
    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            height: self.height,
            width: self.width,
            n_keypoints: self.n_keypoints,
            max_instances: self.max_instances,
            scale_min: self.scale_min,
            scale_max: self.scale_max,
            margin: self.margin,
            p_occluded: self.p_occluded,
            crowding: self.crowding,
        }
    }
}

pub fn load_gen_config(path: &Path) -> Result<GenDataConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let config: GenDataConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    config.data_config().validate()?;
    Ok(config)
}

pub fn gen_data(config: &GenDataConfig, out: &Path) -> Result<()> {
    generate_dataset(&config.data_config(), config.count, config.seed, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with decoupled weight decay. Moments are tracked per parameter in
/// store order; the decay multiplies the raw parameter, not the gradient.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore<f64>, lr: f64, weight_decay: f64) -> Self {
        let m = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect::<Vec<_>>();
        let v = m.clone();
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn state(&self) -> (u64, &[Vec<f64>], &[Vec<f64>]) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore_state(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Data("optimizer state does not match the parameter set".into()));
        }
        for (a, b) in m.iter().zip(&self.m) {
            if a.len() != b.len() {
                return Err(Error::Data("optimizer moment length mismatch".into()));
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update over every parameter; `grads` must be aligned with the
    /// store's id order.
    pub fn step(&mut self, store: &mut ParamStore<f64>, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Contract {
                op: "adamw",
                msg: format!("{} gradient slots for {} parameters", grads.len(), self.m.len()),
            });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (pi, id) in store.ids().enumerate().collect::<Vec<_>>() {
            let g = &grads[pi];
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            let theta = store.get_mut(id).data_mut();
            if g.len() != theta.len() {
                return Err(Error::Contract {
                    op: "adamw",
                    msg: format!("gradient length {} vs parameter {}", g.len(), theta.len()),
                });
            }
            for i in 0..theta.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * theta[i]);
            }
        }
        Ok(())
    }
}

/// Base rate up to and including the decay epoch, decayed rate afterwards.
pub fn schedule_lr(config: &RunConfig, epoch: usize) -> f64 {
    if epoch <= config.decay_epoch {
        config.learning_rate
    } else {
        config.learning_rate * config.decay_factor
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

const CKPT_MAGIC: &[u8; 4] = b"SPCK";
const CKPT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    config: RunConfig,
    epoch: usize,
    opt_step: u64,
    tensors: Vec<TensorMeta>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub params: Vec<(String, Tensor<f64>)>,
    pub opt_step: u64,
    pub opt_m: Vec<Vec<f64>>,
    pub opt_v: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn from_state(config: RunConfig, epoch: usize, store: &ParamStore<f64>, opt: &AdamW) -> Checkpoint {
        let params = store
            .iter()
            .map(|(_, name, tensor)| (name.to_string(), tensor.clone()))
            .collect();
        let (opt_step, m, v) = opt.state();
        Checkpoint {
            config,
            epoch,
            params,
            opt_step,
            opt_m: m.to_vec(),
            opt_v: v.to_vec(),
        }
    }

    /// Rebuild the model and load every saved tensor and optimizer moment.
    pub fn restore(&self) -> Result<(Model, ParamStore<f64>, AdamW)> {
        let mut store = ParamStore::new();
        let model = Model::new(&self.config.model_config(), &mut store)?;
        if store.len() != self.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, model defines {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, tensor) in &self.params {
            let id = store
                .id_of(name)
                .ok_or_else(|| Error::Data(format!("checkpoint tensor {name:?} not in the model")))?;
            if store.get(id).shape() != tensor.shape() {
                return Err(Error::Data(format!("checkpoint tensor {name:?} has the wrong shape")));
            }
            *store.get_mut(id) = tensor.clone();
        }
        let mut opt = AdamW::new(&store, self.config.learning_rate, self.config.weight_decay);
        opt.restore_state(self.opt_step, self.opt_m.clone(), self.opt_v.clone())?;
        Ok((model, store, opt))
    }
}

fn push_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let header = CkptHeader {
        config: ckpt.config.clone(),
        epoch: ckpt.epoch,
        opt_step: ckpt.opt_step,
        tensors: ckpt
            .params
            .iter()
            .map(|(name, t)| TensorMeta { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut data = Vec::new();
    for (_, t) in &ckpt.params {
        push_f64s(&mut data, t.data());
    }
    for m in &ckpt.opt_m {
        push_f64s(&mut data, m);
    }
    for v in &ckpt.opt_v {
        push_f64s(&mut data, v);
    }
    let crc = crc32fast::hash(&data);

    let mut out = Vec::with_capacity(4 + 2 + 4 + header_json.len() + data.len() + 4);
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&data);
    out.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, out).map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let fail = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));

    if bytes.len() < 10 {
        return Err(fail("truncated checkpoint header"));
    }
    if &bytes[0..4] != CKPT_MAGIC {
        return Err(fail("not a checkpoint file (bad magic)"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CKPT_VERSION {
        return Err(fail(&format!("unsupported checkpoint version {version}")));
    }
    let json_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    if bytes.len() < 10 + json_len + 4 {
        return Err(fail("truncated checkpoint (header extends past the file)"));
    }
    let header: CkptHeader =
        serde_json::from_slice(&bytes[10..10 + json_len]).map_err(|e| fail(&format!("bad header: {e}")))?;

    let n_values: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    let data_len = n_values * 8 * 3;
    let data_start = 10 + json_len;
    if bytes.len() != data_start + data_len + 4 {
        return Err(fail("truncated or oversized checkpoint data section"));
    }
    let data = &bytes[data_start..data_start + data_len];
    let stored_crc = u32::from_le_bytes(bytes[data_start + data_len..].try_into().expect("4 bytes"));
    if crc32fast::hash(data) != stored_crc {
        return Err(fail("checkpoint checksum mismatch"));
    }

    let mut offset = 0usize;
    let mut read_block = |len: usize| -> Vec<f64> {
        let out = data[offset..offset + len * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += len * 8;
        out
    };
    let mut params = Vec::with_capacity(header.tensors.len());
    for meta in &header.tensors {
        let len = meta.shape.iter().product::<usize>();
        params.push((meta.name.clone(), Tensor::new(meta.shape.clone(), read_block(len))?));
    }
    let opt_m: Vec<Vec<f64>> = header
        .tensors
        .iter()
        .map(|t| read_block(t.shape.iter().product()))
        .collect();
    let opt_v: Vec<Vec<f64>> = header
        .tensors
        .iter()
        .map(|t| read_block(t.shape.iter().product()))
        .collect();

    Ok(Checkpoint {
        config: header.config,
        epoch: header.epoch,
        params,
        opt_step: header.opt_step,
        opt_m,
        opt_v,
    })
}

// ---------------------------------------------------------------------------
// Training

/// One JSONL record per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    pub duplicate_rate: f64,
    pub wall_seconds: f64,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub logs: Vec<EpochLog>,
    pub log_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

fn sample_to_inputs(sample: &RenderedSample) -> Result<(Tensor<f64>, Vec<GroundTruthPose<f64>>)> {
    let image = Tensor::new(
        vec![sample.height, sample.width, 1],
        sample.image.iter().map(|&v| v as f64).collect(),
    )?;
    let gts = sample
        .gts
        .iter()
        .map(|g| {
            GroundTruthPose::new(
                g.keypoints.iter().map(|&v| v as f64).collect(),
                g.visibility.clone(),
                g.area as f64,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((image, gts))
}

fn check_dataset_k(ds: &Dataset, k: usize, what: &str) -> Result<()> {
    let got = ds.manifest().config.n_keypoints;
    if got != k {
        return Err(Error::Config(format!(
            "{what} dataset has K={got} keypoints but the run config says K={k}"
        )));
    }
    Ok(())
}

/// Forward every sample of `ds` and score the final decoder layer.
pub fn evaluate_model(
    model: &Model,
    store: &ParamStore<f64>,
    ds: &Dataset,
    eval_cfg: &EvalConfig,
) -> Result<(crate::metrics::ApReport, f64)> {
    let mut items = Vec::with_capacity(ds.len());
    for sample in ds.iter() {
        let sample = sample?;
        let (image, gts) = sample_to_inputs(&sample)?;
        let mut tape = Tape::inference();
        let img = tape.constant(image);
        let out = model.forward(&mut tape, store, img)?;
        let preds = to_predictions(&tape, out.final_set());
        items.push(ImageEval { preds, gts });
    }
    let report = evaluate_ap(&items, eval_cfg)?;
    let dup = duplicate_rate(&items, eval_cfg)?;
    Ok((report, dup))
}

pub fn train(config: &RunConfig) -> Result<TrainOutput> {
    train_with(config, |_| {})
}

/// `train` with an observer called after every epoch, for progress displays.
pub fn train_with(config: &RunConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutput> {
    config.validate()?;
    let train_ds = load_dataset(Path::new(&config.train_data))?;
    let val_ds = load_dataset(Path::new(&config.val_data))?;
    check_dataset_k(&train_ds, config.n_keypoints, "train")?;
    check_dataset_k(&val_ds, config.n_keypoints, "validation")?;
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(Error::Data("training and validation datasets must be non-empty".into()));
    }

    let out_dir = Path::new(&config.out_dir);
    fs::create_dir_all(out_dir).map_err(|e| Error::Data(format!("creating {}: {e}", out_dir.display())))?;
    let manifest_path = out_dir.join("config.json");
    fs::write(&manifest_path, serde_json::to_vec_pretty(config)?)
        .map_err(|e| Error::Data(format!("writing {}: {e}", manifest_path.display())))?;

    let mut store = ParamStore::new();
    let model = Model::new(&config.model_config(), &mut store)?;
    let mut opt = AdamW::new(&store, config.learning_rate, config.weight_decay);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9E3779B9).wrapping_add(1));
    let weights = config.loss_weights();
    let kappas = config.kappas();
    let eval_cfg = config.eval_config();

    let log_path = out_dir.join("metrics.jsonl");
    let log_file = File::create(&log_path).map_err(|e| Error::Data(format!("creating {}: {e}", log_path.display())))?;
    let mut log_out = BufWriter::new(log_file);

    let param_sizes: Vec<usize> = store.ids().map(|id| store.get(id).numel()).collect();
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let mut logs = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let t0 = Instant::now();
        opt.lr = schedule_lr(config, epoch);
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut accum: Vec<Vec<f64>> = param_sizes.iter().map(|&n| vec![0.0; n]).collect();
            for &si in chunk {
                let sample = train_ds.get(si)?;
                let (image, gts) = sample_to_inputs(&sample)?;
                let mut tape = Tape::new();
                let img = tape.constant(image);
                let out = model.forward(&mut tape, &store, img)?;
                let sets = out.supervised_sets();
                for set in &sets {
                    let bad = tape
                        .data(set.score_logits)
                        .iter()
                        .chain(tape.data(set.keypoints))
                        .any(|v| !v.is_finite());
                    if bad {
                        return Err(Error::Numeric(format!(
                            "non-finite model output at epoch {epoch}, batch {bi}, sample {si}"
                        )));
                    }
                }
                let loss = compute_losses(&mut tape, &sets, &gts, &weights, &kappas)?;
                let value = tape.scalar_value(loss.total)?;
                if !value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at epoch {epoch}, batch {bi}, sample {si}: total {value} \
                         (cls {:.6}, l1 {:.6}, oks {:.6})",
                        loss.cls, loss.l1, loss.oks
                    )));
                }
                epoch_loss += value;
                seen += 1;
                tape.backward(loss.total)?;
                for (pi, id) in store.ids().enumerate() {
                    if let Some(g) = tape.param_grad(id) {
                        let a = &mut accum[pi];
                        for (x, &gv) in a.iter_mut().zip(g) {
                            *x += gv;
                        }
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            for a in &mut accum {
                for x in a.iter_mut() {
                    *x *= scale;
                }
            }
            opt.step(&mut store, &accum)?;
        }

        for (id, name, tensor) in store.iter() {
            let _ = id;
            if !tensor.is_finite() {
                return Err(Error::Numeric(format!("parameter {name} went non-finite at epoch {epoch}")));
            }
        }

        let (report, dup) = evaluate_model(&model, &store, &val_ds, &eval_cfg)?;
        let log = EpochLog {
            epoch,
            train_loss: epoch_loss / seen.max(1) as f64,
            ap: report.ap,
            ap50: report.ap50,
            ap75: report.ap75,
            duplicate_rate: dup,
            wall_seconds: t0.elapsed().as_secs_f64(),
        };
        writeln!(log_out, "{}", serde_json::to_string(&log)?)?;
        log_out.flush()?;
        on_epoch(&log);
        logs.push(log);
    }

    let checkpoint = Checkpoint::from_state(config.clone(), config.epochs, &store, &opt);
    let checkpoint_path = out_dir.join("final.ckpt");
    save_checkpoint(&checkpoint, &checkpoint_path)?;
    Ok(TrainOutput { checkpoint, logs, log_path, checkpoint_path })
}

/// Evaluation summary in the exact key spelling the logs use.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    pub duplicate_rate: f64,
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, data_path: &Path) -> Result<EvalMetrics> {
    let ds = load_dataset(data_path)?;
    check_dataset_k(&ds, ckpt.config.n_keypoints, "evaluation")?;
    let (model, store, _opt) = ckpt.restore()?;
    let (report, dup) = evaluate_model(&model, &store, &ds, &ckpt.config.eval_config())?;
    Ok(EvalMetrics { ap: report.ap, ap50: report.ap50, ap75: report.ap75, duplicate_rate: dup })
}

// ---------------------------------------------------------------------------
// Ablations

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSuite {
    SelfAttention,
    GroupComponents,
    QueryDesign,
    NInstances,
    AcrossSubsets,
    Sharing,
}

impl AblationSuite {
    pub const ALL: [AblationSuite; 6] = [
        AblationSuite::SelfAttention,
        AblationSuite::GroupComponents,
        AblationSuite::QueryDesign,
        AblationSuite::NInstances,
        AblationSuite::AcrossSubsets,
        AblationSuite::Sharing,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AblationSuite::SelfAttention => "self_attention",
            AblationSuite::GroupComponents => "group_components",
            AblationSuite::QueryDesign => "query_design",
            AblationSuite::NInstances => "n_instances",
            AblationSuite::AcrossSubsets => "across_subsets",
            AblationSuite::Sharing => "sharing",
        }
    }
}

impl std::str::FromStr for AblationSuite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationSuite::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation suite {s:?}")))
    }
}

/// The variant list of each suite, applied to a copy of the base config.
/// Every variant trains with the same data and seed; only the named switch
/// moves.
pub fn suite_variants(suite: AblationSuite, base: &RunConfig) -> Vec<(String, RunConfig)> {
    let with_mode = |name: &str, mode: SelfAttnMode| {
        let mut c = base.clone();
        c.self_attn = mode;
        (name.to_string(), c)
    };
    match suite {
        AblationSuite::SelfAttention => vec![
            with_mode("grouped", SelfAttnMode::GroupUnshared),
            with_mode("masked", SelfAttnMode::MaskedStandard),
            with_mode("standard", SelfAttnMode::Standard),
        ],
        AblationSuite::GroupComponents => vec![
            with_mode("both", SelfAttnMode::GroupUnshared),
            with_mode("within_only", SelfAttnMode::WithinOnly),
            with_mode("across_only", SelfAttnMode::AcrossOnly),
        ],
        AblationSuite::QueryDesign => QueryDesign::ALL
            .into_iter()
            .map(|q| {
                let mut c = base.clone();
                c.query_design = q;
                (q.as_str().to_string(), c)
            })
            .collect(),
        AblationSuite::NInstances => [base.n_instances / 2, base.n_instances, base.n_instances * 2]
            .into_iter()
            .map(|n| {
                let mut c = base.clone();
                c.n_instances = n.max(1);
                (format!("n={}", n.max(1)), c)
            })
            .collect(),
        AblationSuite::AcrossSubsets => vec![
            with_mode("across_full", SelfAttnMode::GroupUnshared),
            with_mode("across_inst_only", SelfAttnMode::AcrossInstOnly),
            with_mode("across_kpt_only", SelfAttnMode::AcrossKptOnly),
        ],
        AblationSuite::Sharing => vec![
            with_mode("unshared", SelfAttnMode::GroupUnshared),
            with_mode("shared", SelfAttnMode::GroupShared),
        ],
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    #[serde(rename = "AP")]
    pub ap: f64,
    /// First epoch whose validation AP reached (best final AP − 2 points);
    /// None if the variant never got there.
    pub epochs_to_threshold: Option<usize>,
    pub data_checksum: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub suite: AblationSuite,
    /// AP level the epochs_to_threshold column counts toward.
    pub threshold: f64,
    pub rows: Vec<AblationRow>,
}

pub fn run_ablation(suite: AblationSuite, base: &RunConfig) -> Result<AblationTable> {
    base.validate()?;
    let data_bytes =
        fs::read(&base.train_data).map_err(|e| Error::Data(format!("{}: {e}", base.train_data)))?;
    let checksum = crc32fast::hash(&data_bytes);

    let mut results = Vec::new();
    for (name, mut cfg) in suite_variants(suite, base) {
        cfg.out_dir = format!("{}/{}/{}", base.out_dir, suite.as_str(), name);
        let out = train(&cfg)?;
        results.push((name, out.logs));
    }

    let best = results
        .iter()
        .map(|(_, logs)| logs.last().map(|l| l.ap).unwrap_or(0.0))
        .fold(f64::NEG_INFINITY, f64::max);
    let threshold = best - 0.02;

    let mut rows: Vec<AblationRow> = results
        .into_iter()
        .map(|(variant, logs)| {
            let ap = logs.last().map(|l| l.ap).unwrap_or(0.0);
            let epochs_to_threshold = logs.iter().find(|l| l.ap >= threshold).map(|l| l.epoch);
            AblationRow { variant, ap, epochs_to_threshold, data_checksum: checksum }
        })
        .collect();
    rows.sort_by(|a, b| b.ap.total_cmp(&a.ap).then(a.variant.cmp(&b.variant)));

    let table = AblationTable { suite, threshold, rows };
    let out_dir = Path::new(&base.out_dir);
    fs::create_dir_all(out_dir).map_err(|e| Error::Data(format!("creating {}: {e}", out_dir.display())))?;
    let json_path = out_dir.join(format!("ablation_{}.json", suite.as_str()));
    fs::write(&json_path, serde_json::to_vec_pretty(&table)?)
        .map_err(|e| Error::Data(format!("writing {}: {e}", json_path.display())))?;
    let text_path = out_dir.join(format!("ablation_{}.txt", suite.as_str()));
    fs::write(&text_path, render_table(&table)).map_err(|e| Error::Data(format!("writing {}: {e}", text_path.display())))?;
    Ok(table)
}

pub fn render_table(table: &AblationTable) -> String {
    let name_w = table.rows.iter().map(|r| r.variant.len()).max().unwrap_or(7).max(7);
    let mut out = format!(
        "suite: {} (threshold AP {:.4})\n{:<name_w$}  {:>8}  {:>10}\n",
        table.suite.as_str(),
        table.threshold,
        "variant",
        "AP",
        "to_thresh"
    );
    for r in &table.rows {
        let reached = r
            .epochs_to_threshold
            .map(|e| e.to_string())
            .unwrap_or_else(|| "-".to_string());
        out.push_str(&format!("{:<name_w$}  {:>8.4}  {:>10}\n", r.variant, r.ap, reached));
    }
    out
}

/// Machine description recorded next to benchmark reports.
pub fn hardware_manifest() -> serde_json::Value {
    serde_json::json!({
        "arch": std::env::consts::ARCH,
        "os": std::env::consts::OS,
        "logical_cpus": std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    })
}
