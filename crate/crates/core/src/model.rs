//! Late-fusion encoder-decoder.
//!
//! Every prompt of a bundle is encoded on its own. The encoder outputs are
//! shifted by a learned per-prompt position row and concatenated into one
//! memory that the decoder cross-attends while generating identifier tokens.
//!
//! Training runs on the autodiff tape. Inference uses a tape-free incremental
//! decoder with a per-layer key/value cache.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{axpy, dot, gelu_value, vec_mat, Block, Mat, ParamSet, Real, Segment, Tape, Var};
use crate::error::{Error, Result};
use crate::vocab::{BOS, PAD};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    /// Maximum tokens per prompt (`M`).
    pub max_len: usize,
    /// Maximum history items per bundle (`L`).
    pub max_items: usize,
    /// Zero means "take it from the vocabulary".
    pub vocab_size: usize,
    /// Maximum decoder length: identifier components plus EOS.
    pub max_target_len: usize,
    pub dropout: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_mult: 4,
            max_len: 128,
            max_items: 20,
            vocab_size: 0,
            max_target_len: 16,
            dropout: 0.1,
            init_std: 0.02,
            seed: 42,
        }
    }
}

fn cfg_err(key: &str, constraint: &str) -> Error {
    Error::Config {
        key: key.to_string(),
        constraint: constraint.to_string(),
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("model.d_model", self.d_model),
            ("model.n_layers", self.n_layers),
            ("model.n_heads", self.n_heads),
            ("model.ffn_mult", self.ffn_mult),
            ("model.max_len", self.max_len),
            ("model.max_items", self.max_items),
            ("model.vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                return Err(cfg_err(key, "must be >= 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(cfg_err("model.d_model", "must be divisible by n_heads"));
        }
        if self.max_target_len < 2 {
            return Err(cfg_err("model.max_target_len", "must be >= 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(cfg_err("model.dropout", "must be in [0, 1)"));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(cfg_err("model.init_std", "must be positive"));
        }
        Ok(())
    }

    /// Checks that identifiers of `l` components (plus up to `longest`
    /// components after deduplication) fit the prompt and decoder lengths.
    pub fn check_ids(&self, l: usize, longest: usize) -> Result<()> {
        if self.max_len < l + 2 {
            return Err(cfg_err("model.max_len", "must be >= l + 2"));
        }
        if self.max_target_len < longest + 1 {
            return Err(cfg_err("model.max_target_len", "must exceed the longest identifier"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal,
    Ones,
    Zeros,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct EncLayer {
    ln1: Norm,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2: Norm,
    w1: usize,
    w2: usize,
}

#[derive(Debug, Clone)]
struct DecLayer {
    ln1: Norm,
    sq: usize,
    sk: usize,
    sv: usize,
    so: usize,
    ln2: Norm,
    cq: usize,
    ck: usize,
    cv: usize,
    co: usize,
    ln3: Norm,
    w1: usize,
    w2: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    tok: usize,
    enc_pos: usize,
    dec_pos: usize,
    item_pos: usize,
    enc: Vec<EncLayer>,
    enc_ln: Norm,
    dec: Vec<DecLayer>,
    dec_ln: Norm,
    head: usize,
}

#[derive(Default)]
struct Specs(Vec<(String, usize, usize, Init)>);

impl Specs {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.0.push((name, rows, cols, init));
        self.0.len() - 1
    }

    fn norm(&mut self, name: String, d: usize) -> Norm {
        Norm {
            g: self.add(format!("{name}.g"), 1, d, Init::Ones),
            b: self.add(format!("{name}.b"), 1, d, Init::Zeros),
        }
    }
}

fn layout(cfg: &ModelConfig) -> (Specs, Layout) {
    let d = cfg.d_model;
    let f = d * cfg.ffn_mult;
    let mut s = Specs::default();
    let tok = s.add("tok_emb".into(), cfg.vocab_size, d, Init::Normal);
    let enc_pos = s.add("enc_pos".into(), cfg.max_len, d, Init::Normal);
    let dec_pos = s.add("dec_pos".into(), cfg.max_target_len, d, Init::Normal);
    let item_pos = s.add("item_pos".into(), cfg.max_items + 1, d, Init::Normal);
    let enc = (0..cfg.n_layers)
        .map(|i| {
            let p = format!("enc.{i}");
            EncLayer {
                ln1: s.norm(format!("{p}.ln1"), d),
                wq: s.add(format!("{p}.wq"), d, d, Init::Normal),
                wk: s.add(format!("{p}.wk"), d, d, Init::Normal),
                wv: s.add(format!("{p}.wv"), d, d, Init::Normal),
                wo: s.add(format!("{p}.wo"), d, d, Init::Normal),
                ln2: s.norm(format!("{p}.ln2"), d),
                w1: s.add(format!("{p}.w1"), d, f, Init::Normal),
                w2: s.add(format!("{p}.w2"), f, d, Init::Normal),
            }
        })
        .collect();
    let enc_ln = s.norm("enc.ln_f".into(), d);
    let dec = (0..cfg.n_layers)
        .map(|i| {
            let p = format!("dec.{i}");
            DecLayer {
                ln1: s.norm(format!("{p}.ln1"), d),
                sq: s.add(format!("{p}.self.wq"), d, d, Init::Normal),
                sk: s.add(format!("{p}.self.wk"), d, d, Init::Normal),
                sv: s.add(format!("{p}.self.wv"), d, d, Init::Normal),
                so: s.add(format!("{p}.self.wo"), d, d, Init::Normal),
                ln2: s.norm(format!("{p}.ln2"), d),
                cq: s.add(format!("{p}.cross.wq"), d, d, Init::Normal),
                ck: s.add(format!("{p}.cross.wk"), d, d, Init::Normal),
                cv: s.add(format!("{p}.cross.wv"), d, d, Init::Normal),
                co: s.add(format!("{p}.cross.wo"), d, d, Init::Normal),
                ln3: s.norm(format!("{p}.ln3"), d),
                w1: s.add(format!("{p}.w1"), d, f, Init::Normal),
                w2: s.add(format!("{p}.w2"), f, d, Init::Normal),
            }
        })
        .collect();
    let dec_ln = s.norm("dec.ln_f".into(), d);
    let head = s.add("lm_head".into(), cfg.vocab_size, d, Init::Normal);
    let l = Layout {
        tok,
        enc_pos,
        dec_pos,
        item_pos,
        enc,
        enc_ln,
        dec,
        dec_ln,
        head,
    };
    (s, l)
}

/// Inverted dropout with masks drawn from a seeded stream.
#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Dropout {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn apply<T: Real>(&mut self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let n = tape.value(x).len();
        let keep = T::lit(1.0 / (1.0 - self.rate));
        let mask = (0..n)
            .map(|_| if self.rng.gen::<f64>() < self.rate { T::zero() } else { keep })
            .collect();
        tape.mul_const(x, mask)
    }
}

fn maybe_drop<T: Real>(tape: &mut Tape<'_, T>, x: Var, dropout: &mut Option<&mut Dropout>) -> Var {
    match dropout {
        Some(d) if d.rate > 0.0 => d.apply(tape, x),
        _ => x,
    }
}

/// Number of tokens before trailing padding.
pub fn valid_len(tokens: &[u32]) -> usize {
    tokens.iter().rposition(|&t| t != PAD).map_or(0, |p| p + 1)
}

/// Prompts shared by a batch of training examples. Identical prompts (item
/// prompts of items that several users touched) are stored and encoded once.
#[derive(Debug, Clone, Default)]
pub struct TrainBatch {
    pub prompts: Vec<Vec<u32>>,
    pub examples: Vec<BatchExample>,
    index: HashMap<Vec<u32>, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchExample {
    /// Indices into [`TrainBatch::prompts`] in bundle order.
    pub prompts: Vec<usize>,
    /// Identifier tokens followed by EOS.
    pub target: Vec<u32>,
}

impl TrainBatch {
    pub fn push<'a>(&mut self, prompts: impl IntoIterator<Item = &'a [u32]>, target: Vec<u32>) {
        let ids = prompts
            .into_iter()
            .map(|p| {
                if let Some(&i) = self.index.get(p) {
                    return i;
                }
                self.prompts.push(p.to_vec());
                self.index.insert(p.to_vec(), self.prompts.len() - 1);
                self.prompts.len() - 1
            })
            .collect();
        self.examples.push(BatchExample { prompts: ids, target });
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_target_tokens(&self) -> usize {
        self.examples.iter().map(|e| e.target.len()).sum()
    }
}

/// Encoder blocks shifted by their position rows, laid out at `block_rows`
/// rows per block with a validity mask over padding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedMemory<T> {
    pub x: Mat<T>,
    pub mask: Vec<bool>,
    pub block_rows: usize,
}

impl<T: Real> FusedMemory<T> {
    pub fn num_blocks(&self) -> usize {
        self.x.rows.checked_div(self.block_rows).unwrap_or(0)
    }

    pub fn num_valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Unmasked rows in order.
    pub fn valid_rows(&self) -> Mat<T> {
        let mut data = Vec::with_capacity(self.num_valid() * self.x.cols);
        for (r, &m) in self.mask.iter().enumerate() {
            if m {
                data.extend_from_slice(self.x.row(r));
            }
        }
        Mat::from_vec(data.len() / self.x.cols.max(1), self.x.cols, data)
    }
}

/// Build `X = [H_0 + P_0; H_1 + P_1; ...]` with every block padded to
/// `block_rows` rows. `blocks` hold only the valid rows of each encoding.
pub fn fuse<T: Real>(blocks: &[&Mat<T>], position: &Mat<T>, block_rows: usize) -> Result<FusedMemory<T>> {
    if blocks.len() > position.rows {
        return Err(Error::Shape {
            expected: format!("at most {} prompt blocks", position.rows),
            actual: blocks.len().to_string(),
        });
    }
    let d = position.cols;
    let mut x = Mat::zeros(blocks.len() * block_rows, d);
    let mut mask = vec![false; blocks.len() * block_rows];
    for (j, h) in blocks.iter().enumerate() {
        if h.rows > block_rows || h.cols != d {
            return Err(Error::Shape {
                expected: format!("<= {block_rows} x {d}"),
                actual: format!("{} x {}", h.rows, h.cols),
            });
        }
        let p = position.row(j);
        for r in 0..h.rows {
            let row = j * block_rows + r;
            mask[row] = true;
            for ((o, &a), &b) in x.row_mut(row).iter_mut().zip(h.row(r)).zip(p) {
                *o = a + b;
            }
        }
    }
    Ok(FusedMemory { x, mask, block_rows })
}

/// Per-layer cross-attention keys and values over the valid memory rows.
#[derive(Debug, Clone)]
pub struct MemoryKv<T> {
    k: Vec<Mat<T>>,
    v: Vec<Mat<T>>,
}

/// Self-attention cache of one partial decode.
#[derive(Debug, Clone)]
pub struct DecoderState<T> {
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    len: usize,
}

impl<T> DecoderState<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn layer_norm_row<T: Real>(x: &[T], g: &[T], b: &[T]) -> Vec<T> {
    let inv_d = T::lit(1.0 / x.len() as f64);
    let mean = x.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
    let var = x.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
    let rs = T::one() / (var + T::lit(LN_EPS)).sqrt();
    x.iter()
        .zip(g)
        .zip(b)
        .map(|((&v, &gg), &bb)| (v - mean) * rs * gg + bb)
        .collect()
}

/// Single-query multi-head attention over `n` cached key/value rows.
fn attend<T: Real>(q: &[T], k: &[T], v: &[T], n: usize, heads: usize) -> Vec<T> {
    let d = q.len();
    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); d];
    if n == 0 {
        return out;
    }
    let mut p = vec![T::zero(); n];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = &q[cols.clone()];
        let mut max = T::neg_infinity();
        for (j, pj) in p.iter_mut().enumerate() {
            let s = dot(qh, &k[j * d..(j + 1) * d][cols.clone()]) * scale;
            *pj = s;
            if s > max {
                max = s;
            }
        }
        let mut sum = T::zero();
        for pj in p.iter_mut() {
            *pj = (*pj - max).exp();
            sum += *pj;
        }
        let inv = T::one() / sum;
        let o = &mut out[cols.clone()];
        for (j, pj) in p.iter_mut().enumerate() {
            *pj *= inv;
            axpy(*pj, &v[j * d..(j + 1) * d][cols.clone()], o);
        }
    }
    out
}

fn add_into<T: Real>(x: &mut [T], y: &[T]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

#[derive(Debug, Clone)]
pub struct FusionModel<T: Real> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    layout: Layout,
}

impl<T: Real> FusionModel<T> {
    /// Seeded initialisation. Draws happen in f64 so that f32 and f64 models
    /// built from the same config start from the same point.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, config.init_std).expect("valid std");
        let mut params = ParamSet::default();
        for (name, rows, cols, init) in specs.0 {
            let m = match init {
                Init::Normal => Mat::from_fn(rows, cols, |_, _| T::lit(normal.sample(&mut rng))),
                Init::Ones => Mat::from_fn(rows, cols, |_, _| T::one()),
                Init::Zeros => Mat::zeros(rows, cols),
            };
            params.add(name, m);
        }
        Ok(FusionModel { config, params, layout })
    }

    /// Wrap existing parameters, checking names and shapes against the layout.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = layout(&config);
        if specs.0.len() != params.tensors.len() {
            return Err(Error::Shape {
                expected: format!("{} parameter tensors", specs.0.len()),
                actual: params.tensors.len().to_string(),
            });
        }
        for ((name, rows, cols, _), (pn, t)) in specs.0.iter().zip(params.names.iter().zip(&params.tensors)) {
            if name != pn || (*rows, *cols) != t.shape() {
                return Err(Error::Shape {
                    expected: format!("{name} {rows}x{cols}"),
                    actual: format!("{pn} {}x{}", t.rows, t.cols),
                });
            }
        }
        Ok(FusionModel { config, params, layout })
    }

    pub fn cast<U: Real>(&self) -> FusionModel<U> {
        FusionModel {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Hex SHA-256 over the config and every parameter value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(T::DTYPE.as_bytes());
        let mut buf = Vec::new();
        for t in &self.params.tensors {
            buf.clear();
            for &x in &t.data {
                x.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    /// The `(L+1) x d` table of per-prompt position rows.
    pub fn position_table(&self) -> &Mat<T> {
        &self.params.tensors[self.layout.item_pos]
    }

    pub fn position_table_mut(&mut self) -> &mut Mat<T> {
        &mut self.params.tensors[self.layout.item_pos]
    }

    fn p(&self, i: usize) -> &Mat<T> {
        &self.params.tensors[i]
    }

    fn check_tokens(&self, tokens: &[u32], what: &str) -> Result<()> {
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "{what} token {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn check_prompt(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() > self.config.max_len {
            return Err(Error::InvalidInput(format!(
                "prompt of {} tokens exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        self.check_tokens(tokens, "prompt")
    }

    fn ln(&self, tape: &mut Tape<'_, T>, x: Var, n: Norm) -> Var {
        let (g, b) = (tape.param(n.g), tape.param(n.b));
        tape.layer_norm(x, g, b)
    }

    fn proj(&self, tape: &mut Tape<'_, T>, x: Var, w: usize) -> Var {
        let w = tape.param(w);
        tape.matmul(x, w)
    }

    fn ffn(&self, tape: &mut Tape<'_, T>, x: Var, w1: usize, w2: usize) -> Var {
        let h = self.proj(tape, x, w1);
        let h = tape.gelu(h);
        self.proj(tape, h, w2)
    }

    /// Encode prompts on `tape`, concatenated without padding. Returns the
    /// encoder output and each prompt's `(start, len)` row span.
    fn encoder_tape(
        &self,
        tape: &mut Tape<'_, T>,
        prompts: &[&[u32]],
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<(Var, Vec<(usize, usize)>)> {
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut spans = Vec::with_capacity(prompts.len());
        let mut segs = Vec::with_capacity(prompts.len());
        for p in prompts {
            self.check_prompt(p)?;
            let n = valid_len(p);
            let start = ids.len();
            spans.push((start, n));
            segs.push(Segment {
                q_start: start,
                q_len: n,
                k_start: start,
                k_len: n,
            });
            ids.extend_from_slice(&p[..n]);
            pos.extend(0..n as u32);
        }
        let l = &self.layout;
        let tok = tape.param(l.tok);
        let pe = tape.param(l.enc_pos);
        let a = tape.gather(tok, &ids);
        let b = tape.gather(pe, &pos);
        let mut x = tape.add(a, b);
        x = maybe_drop(tape, x, dropout);
        let heads = self.config.n_heads;
        for layer in &l.enc {
            let a = self.ln(tape, x, layer.ln1);
            let q = self.proj(tape, a, layer.wq);
            let k = self.proj(tape, a, layer.wk);
            let v = self.proj(tape, a, layer.wv);
            let att = tape.attention(q, k, v, heads, segs.clone(), false);
            let o = self.proj(tape, att, layer.wo);
            let o = maybe_drop(tape, o, dropout);
            x = tape.add(x, o);
            let a = self.ln(tape, x, layer.ln2);
            let f = self.ffn(tape, a, layer.w1, layer.w2);
            let f = maybe_drop(tape, f, dropout);
            x = tape.add(x, f);
        }
        let h = self.ln(tape, x, l.enc_ln);
        Ok((h, spans))
    }

    /// Teacher-forced decoder logits for every target position of `batch`.
    ///
    /// Cross-attention keys use `(H_j + P_j) W = H_j W + P_j W`, so each
    /// distinct prompt is projected once per batch no matter how many
    /// examples share it.
    pub fn batch_logits(&self, tape: &mut Tape<'_, T>, batch: &TrainBatch, mut dropout: Option<&mut Dropout>) -> Result<(Var, Vec<u32>)> {
        let cfg = &self.config;
        let prompts: Vec<&[u32]> = batch.prompts.iter().map(Vec::as_slice).collect();
        let (h, spans) = self.encoder_tape(tape, &prompts, &mut dropout)?;

        let mut dec_ids = Vec::new();
        let mut dec_pos = Vec::new();
        let mut targets = Vec::new();
        let mut self_segs = Vec::new();
        let mut cross_segs = Vec::new();
        let mut mem_rows = 0;
        for ex in &batch.examples {
            if ex.prompts.is_empty() || ex.prompts.len() > cfg.max_items + 1 {
                return Err(Error::InvalidInput(format!(
                    "bundle of {} prompts; expected 1..={}",
                    ex.prompts.len(),
                    cfg.max_items + 1
                )));
            }
            let n = ex.target.len();
            if n == 0 || n > cfg.max_target_len {
                return Err(Error::InvalidInput(format!(
                    "target of {n} tokens; expected 1..={}",
                    cfg.max_target_len
                )));
            }
            self.check_tokens(&ex.target, "target")?;
            let m: usize = ex.prompts.iter().map(|&p| spans[p].1).sum();
            let start = dec_ids.len();
            self_segs.push(Segment {
                q_start: start,
                q_len: n,
                k_start: start,
                k_len: n,
            });
            cross_segs.push(Segment {
                q_start: start,
                q_len: n,
                k_start: mem_rows,
                k_len: m,
            });
            mem_rows += m;
            dec_ids.push(BOS);
            dec_ids.extend_from_slice(&ex.target[..n - 1]);
            dec_pos.extend(0..n as u32);
            targets.extend_from_slice(&ex.target);
        }
        let spans = &spans;
        let blocks = |src: Var| -> Vec<Block> {
            batch
                .examples
                .iter()
                .flat_map(|ex| {
                    ex.prompts.iter().enumerate().map(move |(j, &p)| Block {
                        src,
                        start: spans[p].0,
                        len: spans[p].1,
                        pos_row: j,
                    })
                })
                .collect()
        };

        let l = &self.layout;
        let heads = cfg.n_heads;
        let tok = tape.param(l.tok);
        let pd = tape.param(l.dec_pos);
        let pi = tape.param(l.item_pos);
        let a = tape.gather(tok, &dec_ids);
        let b = tape.gather(pd, &dec_pos);
        let mut x = tape.add(a, b);
        x = maybe_drop(tape, x, &mut dropout);
        for layer in &l.dec {
            let a = self.ln(tape, x, layer.ln1);
            let q = self.proj(tape, a, layer.sq);
            let k = self.proj(tape, a, layer.sk);
            let v = self.proj(tape, a, layer.sv);
            let att = tape.attention(q, k, v, heads, self_segs.clone(), true);
            let o = self.proj(tape, att, layer.so);
            let o = maybe_drop(tape, o, &mut dropout);
            x = tape.add(x, o);

            let a = self.ln(tape, x, layer.ln2);
            let q = self.proj(tape, a, layer.cq);
            let hk = self.proj(tape, h, layer.ck);
            let hv = self.proj(tape, h, layer.cv);
            let pk = self.proj(tape, pi, layer.ck);
            let pv = self.proj(tape, pi, layer.cv);
            let k = tape.blocks_with_position(blocks(hk), pk);
            let v = tape.blocks_with_position(blocks(hv), pv);
            let att = tape.attention(q, k, v, heads, cross_segs.clone(), false);
            let o = self.proj(tape, att, layer.co);
            let o = maybe_drop(tape, o, &mut dropout);
            x = tape.add(x, o);

            let a = self.ln(tape, x, layer.ln3);
            let f = self.ffn(tape, a, layer.w1, layer.w2);
            let f = maybe_drop(tape, f, &mut dropout);
            x = tape.add(x, f);
        }
        let y = self.ln(tape, x, l.dec_ln);
        let head = tape.param(l.head);
        Ok((tape.matmul_bt(y, head), targets))
    }

    /// Mean per-token cross-entropy of the batch targets under teacher forcing.
    pub fn batch_loss(&self, tape: &mut Tape<'_, T>, batch: &TrainBatch, dropout: Option<&mut Dropout>) -> Result<Var> {
        let (logits, targets) = self.batch_logits(tape, batch, dropout)?;
        Ok(tape.cross_entropy(logits, &targets))
    }

    /// Encoder output of one prompt: one row per token before trailing
    /// padding. An all-padding prompt yields zero rows.
    pub fn encode_prompt(&self, tokens: &[u32]) -> Result<Mat<T>> {
        Ok(self.encode_batch(&[tokens])?.pop().expect("one prompt"))
    }

    /// Encode several prompts in one pass. Each output depends only on its
    /// own prompt.
    pub fn encode_batch(&self, prompts: &[&[u32]]) -> Result<Vec<Mat<T>>> {
        let mut tape = Tape::new(&self.params);
        let (h, spans) = self.encoder_tape(&mut tape, prompts, &mut None)?;
        let hv = tape.value(h);
        Ok(spans.iter().map(|&(s, n)| hv.rows_slice(s, n)).collect())
    }

    /// Fuse encoder blocks (user prompt first) with this model's position
    /// table at `max_len` rows per block.
    pub fn fuse(&self, blocks: &[&Mat<T>]) -> Result<FusedMemory<T>> {
        fuse(blocks, self.position_table(), self.config.max_len)
    }

    pub fn memory_kv(&self, fused: &FusedMemory<T>) -> MemoryKv<T> {
        let x = fused.valid_rows();
        let (k, v) = self
            .layout
            .dec
            .iter()
            .map(|layer| (x.matmul(self.p(layer.ck)), x.matmul(self.p(layer.cv))))
            .unzip();
        MemoryKv { k, v }
    }

    pub fn start_state(&self) -> DecoderState<T> {
        DecoderState {
            k: vec![Vec::new(); self.config.n_layers],
            v: vec![Vec::new(); self.config.n_layers],
            len: 0,
        }
    }

    /// Feed one decoder input token and return the final hidden state.
    pub fn step(&self, mem: &MemoryKv<T>, state: &mut DecoderState<T>, token: u32) -> Result<Vec<T>> {
        let pos = state.len;
        if pos >= self.config.max_target_len {
            return Err(Error::InvalidInput(format!(
                "decoder position {pos} exceeds max_target_len {}",
                self.config.max_target_len
            )));
        }
        self.check_tokens(&[token], "decoder")?;
        let l = &self.layout;
        let heads = self.config.n_heads;
        let mut x: Vec<T> = self.p(l.tok).row(token as usize).to_vec();
        add_into(&mut x, self.p(l.dec_pos).row(pos));
        for (li, layer) in l.dec.iter().enumerate() {
            let a = layer_norm_row(&x, &self.p(layer.ln1.g).data, &self.p(layer.ln1.b).data);
            let q = vec_mat(&a, self.p(layer.sq));
            state.k[li].extend(vec_mat(&a, self.p(layer.sk)));
            state.v[li].extend(vec_mat(&a, self.p(layer.sv)));
            let att = attend(&q, &state.k[li], &state.v[li], pos + 1, heads);
            add_into(&mut x, &vec_mat(&att, self.p(layer.so)));

            let a = layer_norm_row(&x, &self.p(layer.ln2.g).data, &self.p(layer.ln2.b).data);
            let q = vec_mat(&a, self.p(layer.cq));
            let (mk, mv) = (&mem.k[li], &mem.v[li]);
            let att = attend(&q, &mk.data, &mv.data, mk.rows, heads);
            add_into(&mut x, &vec_mat(&att, self.p(layer.co)));

            let a = layer_norm_row(&x, &self.p(layer.ln3.g).data, &self.p(layer.ln3.b).data);
            let f: Vec<T> = vec_mat(&a, self.p(layer.w1)).into_iter().map(gelu_value).collect();
            add_into(&mut x, &vec_mat(&f, self.p(layer.w2)));
        }
        state.len += 1;
        Ok(layer_norm_row(&x, &self.p(l.dec_ln.g).data, &self.p(l.dec_ln.b).data))
    }

    /// Output scores of `hidden` for the given tokens only.
    pub fn scores_for(&self, hidden: &[T], tokens: &[u32]) -> Vec<T> {
        let head = self.p(self.layout.head);
        tokens.iter().map(|&t| dot(hidden, head.row(t as usize))).collect()
    }

    /// Output scores of `hidden` over the full vocabulary.
    pub fn all_scores(&self, hidden: &[T]) -> Vec<T> {
        let head = self.p(self.layout.head);
        (0..head.rows).map(|t| dot(hidden, head.row(t))).collect()
    }

    /// Unnormalised next-token scores after `BOS, prefix...`.
    pub fn decode_logits(&self, fused: &FusedMemory<T>, prefix: &[u32]) -> Result<Vec<T>> {
        let mem = self.memory_kv(fused);
        let mut state = self.start_state();
        let mut hidden = self.step(&mem, &mut state, BOS)?;
        for &t in prefix {
            hidden = self.step(&mem, &mut state, t)?;
        }
        Ok(self.all_scores(&hidden))
    }
}

/// Seeded stream for dropout in step `step`, micro-batch `part`.
pub fn dropout_seed(seed: u64, step: usize, part: usize) -> u64 {
    seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (part as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}
