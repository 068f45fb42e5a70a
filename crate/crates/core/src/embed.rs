//! Dense item embeddings used for hierarchical clustering.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cf::CfEmbeddings;
use crate::error::Result;
use crate::exec::Exec;
use crate::tfidf::SparseVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemEmbeddings {
    pub num_items: usize,
    pub dims: usize,
    pub data: Vec<f32>,
}

impl ItemEmbeddings {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Self {
        let dims = rows.first().map_or(0, Vec::len);
        ItemEmbeddings {
            num_items: rows.len(),
            dims,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn cosine(&self, a: usize, b: usize) -> f32 {
        cosine(self.row(a), self.row(b))
    }
}

pub fn cosine(x: &[f32], y: &[f32]) -> f32 {
    let dot: f32 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|v| v * v).sum::<f32>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f32>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        0.0
    } else {
        dot / (nx * ny)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EmbeddingSource {
    /// Seeded Gaussian random projection of the TF-IDF vectors.
    TfidfProjection { dims: usize, seed: u64 },
    /// Vectors from an external text encoder, in the CF import layout.
    ExternalFile { path: PathBuf },
}

impl Default for EmbeddingSource {
    fn default() -> Self {
        EmbeddingSource::TfidfProjection { dims: 256, seed: 7 }
    }
}

fn projection_row(seed: u64, token: u32, dims: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(token as u64 + 1);
    (0..dims)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect()
}

pub fn embed_items(vectors: &[SparseVector], source: &EmbeddingSource, exec: Exec) -> Result<ItemEmbeddings> {
    match source {
        EmbeddingSource::TfidfProjection { dims, seed } => Ok(project(vectors, *dims, *seed, exec)),
        EmbeddingSource::ExternalFile { path } => {
            let e: CfEmbeddings = crate::cf::import_embeddings(path, vectors.len())?;
            Ok(ItemEmbeddings {
                num_items: e.num_items,
                dims: e.dims,
                data: e.data,
            })
        }
    }
}

fn project(vectors: &[SparseVector], dims: usize, seed: u64, exec: Exec) -> ItemEmbeddings {
    let mut tokens: Vec<u32> = vectors.iter().flat_map(|v| v.indices.iter().copied()).collect();
    tokens.sort_unstable();
    tokens.dedup();
    let rows = exec.map(&tokens, |&t| projection_row(seed, t, dims));
    let row_of = |t: u32| &rows[tokens.binary_search(&t).expect("token collected")];
    let out = exec.map(vectors, |v| {
        let mut z = vec![0f64; dims];
        for (&t, &w) in v.indices.iter().zip(&v.weights) {
            for (acc, g) in z.iter_mut().zip(row_of(t)) {
                *acc += w as f64 * *g as f64;
            }
        }
        let n = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            z.iter().map(|x| (x / n) as f32).collect()
        } else {
            vec![0f32; dims]
        }
    });
    ItemEmbeddings {
        num_items: vectors.len(),
        dims,
        data: out.into_iter().flatten().collect(),
    }
}
