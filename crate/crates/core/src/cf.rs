//! Collaborative item embeddings and top-k similar-item retrieval.
//!
//! The trainer is skip-gram with negative sampling over item sequences: each
//! item predicts its neighbours within a window, contrasted against items drawn
//! from the smoothed unigram distribution.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SplitCorpus;
use crate::error::{Error, Result};
use crate::exec::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Dot,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CfConfig {
    pub dims: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub similarity: Similarity,
    /// Embeddings from an external trainer, used instead of training here.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub import: Option<std::path::PathBuf>,
}

impl Default for CfConfig {
    fn default() -> Self {
        CfConfig {
            dims: 32,
            window: 3,
            negatives: 5,
            epochs: 20,
            lr: 0.025,
            seed: 13,
            similarity: Similarity::Dot,
            import: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfEmbeddings {
    pub num_items: usize,
    pub dims: usize,
    /// Row-major `num_items x dims`.
    pub data: Vec<f32>,
    /// Free-form description of how the vectors were produced.
    pub fingerprint: String,
}

impl CfEmbeddings {
    pub fn new(num_items: usize, dims: usize, data: Vec<f32>, fingerprint: String) -> Result<Self> {
        if data.len() != num_items * dims {
            return Err(Error::Shape {
                expected: format!("{} values ({num_items}x{dims})", num_items * dims),
                actual: format!("{} values", data.len()),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite embedding entry".into()));
        }
        Ok(CfEmbeddings {
            num_items,
            dims,
            data,
            fingerprint,
        })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }

    pub fn similarity(&self, a: usize, b: usize, sim: Similarity) -> f32 {
        let (x, y) = (self.row(a), self.row(b));
        let dot: f32 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        match sim {
            Similarity::Dot => dot,
            Similarity::Cosine => {
                let nx = x.iter().map(|v| v * v).sum::<f32>().sqrt();
                let ny = y.iter().map(|v| v * v).sum::<f32>().sqrt();
                if nx == 0.0 || ny == 0.0 {
                    0.0
                } else {
                    dot / (nx * ny)
                }
            }
        }
    }

    /// Text layout: a `count dims` header line, then one row of decimal floats per item.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{} {}", self.num_items, self.dims)?;
        for i in 0..self.num_items {
            let row: Vec<String> = self.row(i).iter().map(|x| format!("{x:?}")).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R, expected_items: usize) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let header = match lines.next() {
            Some((_, l)) => l.map_err(|e| Error::Parse {
                line: 1,
                message: e.to_string(),
            })?,
            None => return Err(Error::Parse { line: 1, message: "missing header".into() }),
        };
        let nums: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse {
                line: 1,
                message: format!("bad header `{header}`"),
            })?;
        let [count, dims] = nums[..] else {
            return Err(Error::Parse { line: 1, message: format!("bad header `{header}`") });
        };
        check_count(count, expected_items)?;
        let mut data = Vec::with_capacity(count * dims);
        let mut rows = 0;
        for (n, line) in lines {
            let line = line.map_err(|e| Error::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f32> = line
                .split_whitespace()
                .map(|t| t.parse::<f32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: n + 1,
                    message: e.to_string(),
                })?;
            if row.len() != dims {
                return Err(Error::Shape {
                    expected: format!("{dims} columns"),
                    actual: format!("{} columns on line {}", row.len(), n + 1),
                });
            }
            data.extend(row);
            rows += 1;
        }
        if rows != count {
            return Err(Error::Shape {
                expected: format!("{count} rows"),
                actual: format!("{rows} rows"),
            });
        }
        CfEmbeddings::new(count, dims, data, "imported".into())
    }

    /// Binary layout: magic `LRCF`, version byte, u32 count, u32 dims, then f32 LE rows.
    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + self.data.len() * 4);
        out.extend_from_slice(b"LRCF");
        out.push(1);
        out.extend_from_slice(&(self.num_items as u32).to_le_bytes());
        out.extend_from_slice(&(self.dims as u32).to_le_bytes());
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_binary(bytes: &[u8], expected_items: usize) -> Result<Self> {
        if bytes.len() < 13 || &bytes[..4] != b"LRCF" {
            return Err(Error::Artifact("not a binary embedding file".into()));
        }
        if bytes[4] != 1 {
            return Err(Error::Artifact(format!("embedding file version {}", bytes[4])));
        }
        let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let dims = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        check_count(count, expected_items)?;
        let body = &bytes[13..];
        if body.len() != count * dims * 4 {
            return Err(Error::Shape {
                expected: format!("{} bytes of rows", count * dims * 4),
                actual: format!("{} bytes", body.len()),
            });
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        CfEmbeddings::new(count, dims, data, "imported".into())
    }
}

fn check_count(count: usize, expected: usize) -> Result<()> {
    if count != expected {
        return Err(Error::Shape {
            expected: format!("{expected} items"),
            actual: format!("{count} items"),
        });
    }
    Ok(())
}

/// Load embeddings produced by an external trainer (text or binary layout).
pub fn import_embeddings(path: &Path, expected_items: usize) -> Result<CfEmbeddings> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"LRCF") {
        CfEmbeddings::from_binary(&bytes, expected_items)
    } else {
        CfEmbeddings::read_text(std::io::Cursor::new(bytes), expected_items)
    }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A (center, context) training pair with its provenance in the loader.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairOrigin {
    pub sequence: usize,
    pub center_pos: usize,
    pub context_pos: usize,
}

pub fn train_cf(split: &SplitCorpus, config: &CfConfig) -> Result<CfEmbeddings> {
    train_cf_observed(split, config, |_, _| {})
}

/// Like [`train_cf`], reporting every positive pair to `observe` together with
/// the sequence slice it was read from.
pub fn train_cf_observed<F>(split: &SplitCorpus, config: &CfConfig, mut observe: F) -> Result<CfEmbeddings>
where
    F: FnMut(PairOrigin, &[usize]),
{
    let seqs = split.cf_sequences();
    let n = split.num_items;
    if n == 0 || seqs.iter().all(|s| s.is_empty()) {
        return Err(Error::InvalidInput("no training interactions for CF".into()));
    }
    let d = config.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut input: Vec<f32> = (0..n * d)
        .map(|_| (rng.gen::<f32>() - 0.5) / d as f32)
        .collect();
    let mut output = vec![0.0f32; n * d];

    // unigram^0.75 table for negatives
    let mut freq = vec![0f64; n];
    for s in &seqs {
        for &i in *s {
            freq[i] += 1.0;
        }
    }
    let weights: Vec<f64> = freq.iter().map(|f| f.powf(0.75)).collect();
    let total: f64 = weights.iter().sum();
    let table_size = (n * 100).max(1000);
    let mut table = Vec::with_capacity(table_size);
    let mut acc = 0.0;
    let mut item = 0;
    for t in 0..table_size {
        let target = (t as f64 + 0.5) / table_size as f64 * total;
        while item + 1 < n && acc + weights[item] < target {
            acc += weights[item];
            item += 1;
        }
        table.push(item);
    }

    let pairs_per_epoch: usize = seqs
        .iter()
        .map(|s| {
            (0..s.len())
                .map(|c| s.len().min(c + config.window + 1) - c.saturating_sub(config.window) - 1)
                .sum::<usize>()
        })
        .sum();
    let total_steps = (pairs_per_epoch * config.epochs).max(1);
    let mut step = 0usize;
    let mut grad_in = vec![0f32; d];
    let mut order: Vec<usize> = (0..seqs.len()).collect();

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &si in &order {
            let s = seqs[si];
            for c in 0..s.len() {
                let lo = c.saturating_sub(config.window);
                let hi = s.len().min(c + config.window + 1);
                for x in lo..hi {
                    if x == c {
                        continue;
                    }
                    observe(
                        PairOrigin {
                            sequence: si,
                            center_pos: c,
                            context_pos: x,
                        },
                        s,
                    );
                    let lr = config.lr as f32 * (1.0 - step as f32 / total_steps as f32).max(1e-4);
                    step += 1;
                    let center = s[c];
                    let ctx = s[x];
                    grad_in.iter_mut().for_each(|g| *g = 0.0);
                    for k in 0..=config.negatives {
                        let (target, label) = if k == 0 {
                            (ctx, 1.0)
                        } else {
                            let t = table[rng.gen_range(0..table.len())];
                            if t == ctx {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let vi = &input[center * d..(center + 1) * d];
                        let vo = &mut output[target * d..(target + 1) * d];
                        let dot: f32 = vi.iter().zip(vo.iter()).map(|(a, b)| a * b).sum();
                        let g = (label - sigmoid(dot)) * lr;
                        for j in 0..d {
                            grad_in[j] += g * vo[j];
                            vo[j] += g * vi[j];
                        }
                    }
                    for (w, g) in input[center * d..(center + 1) * d].iter_mut().zip(&grad_in) {
                        *w += g;
                    }
                }
            }
        }
    }

    CfEmbeddings::new(
        n,
        d,
        input,
        format!(
            "sgns seed={} dims={} epochs={} window={} negatives={}",
            config.seed, config.dims, config.epochs, config.window, config.negatives
        ),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarList {
    pub item: usize,
    /// `(item, score)` by descending score, ties by ascending item index.
    pub neighbors: Vec<(usize, f32)>,
}

impl SimilarList {
    pub fn items(&self) -> Vec<usize> {
        self.neighbors.iter().map(|&(i, _)| i).collect()
    }
}

pub fn top_k_similar(emb: &CfEmbeddings, item: usize, k: usize, sim: Similarity) -> Result<SimilarList> {
    if k == 0 || k >= emb.num_items {
        return Err(Error::InvalidInput(format!(
            "k={k} must satisfy 1 <= k < {} items",
            emb.num_items
        )));
    }
    if item >= emb.num_items {
        return Err(Error::InvalidInput(format!("item {item} out of range")));
    }
    let mut scored: Vec<(usize, f32)> = (0..emb.num_items)
        .filter(|&j| j != item)
        .map(|j| (j, emb.similarity(item, j, sim)))
        .collect();
    let cmp = |a: &(usize, f32), b: &(usize, f32)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    scored.select_nth_unstable_by(k - 1, cmp);
    scored.truncate(k);
    scored.sort_by(cmp);
    Ok(SimilarList {
        item,
        neighbors: scored,
    })
}

/// Top-k lists for every item. `k` is clamped to `num_items - 1`.
pub fn all_top_k(emb: &CfEmbeddings, k: usize, sim: Similarity, exec: Exec) -> Vec<SimilarList> {
    let k = k.min(emb.num_items.saturating_sub(1));
    exec.map_range(emb.num_items, |i| {
        if k == 0 {
            SimilarList {
                item: i,
                neighbors: Vec::new(),
            }
        } else {
            top_k_similar(emb, i, k, sim).expect("k in range")
        }
    })
}
