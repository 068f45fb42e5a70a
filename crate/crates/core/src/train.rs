//! Teacher-forced training with Adam, checkpoints and gradient checking.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, GradCheckReport, Mat, ParamSet, Real, Tape};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::corpus::SplitCorpus;
use crate::ids::LexicalIdMap;
use crate::model::{dropout_seed, Dropout, FusionModel, ModelConfig, TrainBatch};
use crate::prompt::{build_prompt_bundle, ItemPrompts, PromptConfig};
use crate::vocab::{Vocabulary, EOS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    /// Examples per gradient-accumulation chunk. Chunks are reduced in a
    /// fixed order, so results do not depend on the worker count.
    pub micro_batch: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; zero disables clipping.
    pub clip_norm: f64,
    /// Training targets kept per user, newest first; zero keeps every prefix.
    pub examples_per_user: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            warmup_ratio: 0.05,
            batch_size: 128,
            micro_batch: 16,
            epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            examples_per_user: 0,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, c: &str| {
            Err(Error::Config {
                key: format!("train.{key}"),
                constraint: c.into(),
            })
        };
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err("lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return err("warmup_ratio", "must be in [0, 1)");
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be >= 1");
        }
        if self.micro_batch == 0 {
            return err("micro_batch", "must be >= 1");
        }
        if self.epochs == 0 {
            return err("epochs", "must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("beta1", "betas must be in [0, 1)");
        }
        if self.clip_norm < 0.0 {
            return err("clip_norm", "must be >= 0");
        }
        Ok(())
    }
}

/// Linear warmup to `peak` over the first `ceil(ratio * total)` steps, then
/// linear decay towards zero.
pub fn lr_at(step: usize, total: usize, ratio: f64, peak: f64) -> f64 {
    let warmup = (ratio * total as f64).ceil() as usize;
    if step < warmup {
        peak * (step + 1) as f64 / warmup as f64
    } else {
        let rest = total.saturating_sub(warmup).max(1);
        peak * (total.saturating_sub(step)) as f64 / rest as f64
    }
}

/// One training example: a user prompt, the items behind the item prompts
/// (bundle order) and the target identifier tokens ending in EOS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub user_prompt: Vec<u32>,
    pub items: Vec<usize>,
    pub target: Vec<u32>,
}

/// Examples plus the shared tokenized item prompts they point into.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainData {
    pub item_prompts: Vec<Vec<u32>>,
    pub examples: Vec<Example>,
}

impl TrainData {
    /// Next-item examples from training prefixes: `train[..t]` predicts
    /// `train[t]` for every `t >= 1`. Validation and test items never appear.
    pub fn from_split(
        split: &SplitCorpus,
        id_map: &LexicalIdMap,
        vocab: &Vocabulary,
        items: &ItemPrompts,
        config: &PromptConfig,
        per_user: usize,
    ) -> Result<Self> {
        let mut examples = Vec::new();
        for u in &split.users {
            let n = u.train.len();
            let first = if per_user == 0 { 1 } else { n.saturating_sub(per_user).max(1) };
            for t in first..n {
                let bundle = build_prompt_bundle(&u.train[..t], id_map, vocab, items, config)?;
                let mut target = id_map.id(u.train[t]).to_vec();
                target.push(EOS);
                examples.push(Example {
                    user_prompt: bundle.user_prompt,
                    items: bundle.items,
                    target,
                });
            }
        }
        Ok(TrainData {
            item_prompts: items.prompts.clone(),
            examples,
        })
    }

    pub fn batch(&self, picks: &[usize]) -> TrainBatch {
        let mut b = TrainBatch::default();
        for &i in picks {
            let ex = &self.examples[i];
            let prompts = std::iter::once(ex.user_prompt.as_slice())
                .chain(ex.items.iter().map(|&it| self.item_prompts[it].as_slice()));
            b.push(prompts, ex.target.clone());
        }
        b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn write_curve_csv<W: Write>(mut w: W, curve: &[CurvePoint]) -> std::io::Result<()> {
    writeln!(w, "step,loss,lr")?;
    for p in curve {
        writeln!(w, "{},{},{}", p.step, p.loss, p.lr)?;
    }
    Ok(())
}

/// Parameters plus Adam moments and the schedule position.
#[derive(Debug, Clone)]
pub struct TrainState<T: Real> {
    pub model: FusionModel<T>,
    pub m: Vec<Mat<T>>,
    pub v: Vec<Mat<T>>,
    pub step: usize,
    pub total_steps: usize,
    pub seed: u64,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: FusionModel<T>, seed: u64) -> Self {
        let m = model.params.zeros_like();
        let v = model.params.zeros_like();
        TrainState {
            model,
            m,
            v,
            step: 0,
            total_steps: 0,
            seed,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.model.params.tensors.iter().chain(&self.m).chain(&self.v).all(Mat::all_finite)
    }

    fn adam(&mut self, grads: &[Mat<T>], lr: f64, cfg: &TrainConfig) {
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
        let step_size = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(cfg.adam_eps);
        for (((p, g), m), v) in self.model.params.tensors.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + one_b1 * gi;
                v.data[i] = b2 * v.data[i] + one_b2 * gi * gi;
                let denom = (v.data[i] * inv_bc2).sqrt() + eps;
                p.data[i] -= step_size * m.data[i] / denom;
            }
        }
    }

    /// Serialize to the checkpoint layout: magic, version, JSON header and
    /// little-endian parameter, first-moment and second-moment arrays.
    pub fn to_bytes(&self) -> Vec<u8> {
        let ps = &self.model.params;
        let header = CheckpointHeader {
            dtype: T::DTYPE.to_string(),
            step: self.step,
            total_steps: self.total_steps,
            seed: self.seed,
            config: self.model.config.clone(),
            tensors: ps
                .names
                .iter()
                .zip(&ps.tensors)
                .map(|(n, t)| TensorInfo {
                    name: n.clone(),
                    rows: t.rows,
                    cols: t.cols,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 3 * ps.num_scalars() * T::BYTES);
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for set in [&ps.tensors, &self.m, &self.v] {
            for t in set.iter() {
                for &x in &t.data {
                    x.write_le(&mut out);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Artifact(format!("checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..4] != CKPT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CKPT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        if header.dtype != T::DTYPE {
            return Err(bad(&format!("dtype {} where {} was expected", header.dtype, T::DTYPE)));
        }
        let mut off = 16 + hlen;
        let mut read_set = |bytes: &[u8]| -> Result<Vec<Mat<T>>> {
            header
                .tensors
                .iter()
                .map(|ti| {
                    let n = ti.rows * ti.cols;
                    let raw = bytes.get(off..off + n * T::BYTES).ok_or_else(|| bad("truncated data"))?;
                    off += n * T::BYTES;
                    Ok(Mat::from_vec(ti.rows, ti.cols, raw.chunks_exact(T::BYTES).map(T::read_le).collect()))
                })
                .collect()
        };
        let params = read_set(bytes)?;
        let m = read_set(bytes)?;
        let v = read_set(bytes)?;
        if off != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let ps = ParamSet {
            names: header.tensors.iter().map(|t| t.name.clone()).collect(),
            tensors: params,
        };
        let model = FusionModel::from_params(header.config, ps)?;
        let state = TrainState {
            model,
            m,
            v,
            step: header.step,
            total_steps: header.total_steps,
            seed: header.seed,
        };
        if !state.all_finite() {
            return Err(bad("non-finite values"));
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

const CKPT_MAGIC: &[u8; 4] = b"LRCK";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    dtype: String,
    step: usize,
    total_steps: usize,
    seed: u64,
    config: ModelConfig,
    tensors: Vec<TensorInfo>,
}

/// Loss and gradients of one batch, reduced over micro-batches in order and
/// weighted by target-token counts.
pub fn batch_gradients<T: Real>(
    model: &FusionModel<T>,
    data: &TrainData,
    picks: &[usize],
    micro: usize,
    dropout: Option<(f64, u64, usize)>,
    exec: Exec,
) -> Result<(f64, Vec<Mat<T>>)> {
    let chunks: Vec<&[usize]> = picks.chunks(micro.max(1)).collect();
    let parts = exec.map_range(chunks.len(), |ci| -> Result<(usize, f64, Vec<Mat<T>>)> {
        let batch = data.batch(chunks[ci]);
        let mut drop = dropout.map(|(rate, seed, step)| Dropout::new(rate, dropout_seed(seed, step, ci)));
        let mut tape = Tape::new(&model.params);
        let loss = model.batch_loss(&mut tape, &batch, drop.as_mut())?;
        Ok((batch.num_target_tokens(), tape.scalar(loss).as_f64(), tape.backward(loss)))
    });
    let mut grads = model.params.zeros_like();
    let mut parts_ok = Vec::with_capacity(parts.len());
    for p in parts {
        parts_ok.push(p?);
    }
    let total: usize = parts_ok.iter().map(|p| p.0).sum();
    let mut loss = 0.0;
    for (n, l, g) in parts_ok {
        let w = n as f64 / total.max(1) as f64;
        loss += w * l;
        let wt = T::lit(w);
        for (acc, gi) in grads.iter_mut().zip(&g) {
            for (a, &b) in acc.data.iter_mut().zip(&gi.data) {
                *a += wt * b;
            }
        }
    }
    Ok((loss, grads))
}

fn grad_norm<T: Real>(grads: &[Mat<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data.iter())
        .map(|&x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub curve: Vec<CurvePoint>,
    /// Mean loss of each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Run `cfg.epochs` epochs over `data`, continuing the schedule recorded in
/// `state`. The epoch order is a seeded shuffle.
pub fn train<T: Real>(state: &mut TrainState<T>, data: &TrainData, cfg: &TrainConfig, exec: Exec) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.examples.is_empty() {
        return Err(Error::InvalidInput("no training examples".into()));
    }
    let per_epoch = data.examples.len().div_ceil(cfg.batch_size);
    state.total_steps = state.total_steps.max(state.step + per_epoch * cfg.epochs);
    let dropout = state.model.config.dropout;
    let mut curve = Vec::new();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.examples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((state.step as u64) << 20) ^ epoch as u64);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for picks in order.chunks(cfg.batch_size) {
            let lr = lr_at(state.step, state.total_steps, cfg.warmup_ratio, cfg.lr);
            let drop = (dropout > 0.0).then_some((dropout, cfg.seed, state.step));
            let (loss, mut grads) = batch_gradients(&state.model, data, picks, cfg.micro_batch, drop, exec)?;
            let norm = grad_norm(&grads);
            if !loss.is_finite() || !norm.is_finite() {
                let bad: Vec<&str> = state
                    .model
                    .params
                    .names
                    .iter()
                    .zip(&grads)
                    .filter(|(_, g)| !g.all_finite())
                    .map(|(n, _)| n.as_str())
                    .collect();
                return Err(Error::NonFiniteLoss {
                    step: state.step,
                    diagnostic: format!("loss={loss} grad_norm={norm} lr={lr} non-finite gradients in [{}]", bad.join(", ")),
                });
            }
            if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
                let s = T::lit(cfg.clip_norm / norm);
                grads.iter_mut().flat_map(|g| g.data.iter_mut()).for_each(|x| *x *= s);
            }
            state.adam(&grads, lr, cfg);
            curve.push(CurvePoint {
                step: state.step,
                loss,
                lr,
            });
            state.step += 1;
            sum += loss * picks.len() as f64;
        }
        let mean = sum / data.examples.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.4}");
        epoch_loss.push(mean);
    }
    Ok(TrainOutcome { curve, epoch_loss })
}

/// Finite-difference check of the full model loss on `batch` (dropout off).
pub fn model_grad_check(model: &FusionModel<f64>, batch: &TrainBatch, epsilon: f64, min_samples: usize, seed: u64) -> Result<GradCheckReport> {
    if !(1e-6..=1e-4).contains(&epsilon) {
        return Err(Error::InvalidInput(format!("epsilon {epsilon} outside [1e-6, 1e-4]")));
    }
    {
        let mut tape = Tape::new(&model.params);
        model.batch_loss(&mut tape, batch, None)?;
    }
    Ok(grad_check(
        &model.params,
        |tape| model.batch_loss(tape, batch, None).expect("batch validated"),
        epsilon,
        min_samples,
        seed,
    ))
}
