//! Smoothed TF-IDF item vectors over the vocabulary.

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, ItemRecord};
use crate::exec::Exec;
use crate::vocab::{words, Vocabulary};

/// Sparse vector with strictly increasing indices and positive weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    pub indices: Vec<u32>,
    pub weights: Vec<f32>,
}

impl SparseVector {
    pub fn is_zero(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn norm(&self) -> f32 {
        self.weights.iter().map(|w| w * w).sum::<f32>().sqrt()
    }

    pub fn get(&self, token: u32) -> f32 {
        self.indices
            .binary_search(&token)
            .map(|p| self.weights[p])
            .unwrap_or(0.0)
    }

    pub fn dot(&self, other: &SparseVector) -> f32 {
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        while i < self.indices.len() && j < other.indices.len() {
            match self.indices[i].cmp(&other.indices[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += self.weights[i] * other.weights[j];
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    /// Tokens by descending weight, ties by ascending token id.
    pub fn ranked_tokens(&self) -> Vec<u32> {
        let mut pairs: Vec<(u32, f32)> = self.indices.iter().copied().zip(self.weights.iter().copied()).collect();
        pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        pairs.into_iter().map(|p| p.0).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfStats {
    pub num_docs: usize,
    pub df: Vec<u32>,
}

impl DfStats {
    pub fn from_vocab(vocab: &Vocabulary) -> Self {
        DfStats {
            num_docs: vocab.num_docs(),
            df: (0..vocab.len() as u32).map(|t| vocab.doc_freq(t)).collect(),
        }
    }

    pub fn idf(&self, token: u32) -> f64 {
        let n = self.num_docs as f64;
        let df = self.df[token as usize] as f64;
        ((1.0 + n) / (1.0 + df)).ln() + 1.0
    }
}

/// `tf(t) * (ln((1 + N) / (1 + df(t))) + 1)`, L2-normalised. Only vocabulary
/// words count; text without any gives the zero vector.
pub fn tfidf_vector(item: &ItemRecord, vocab: &Vocabulary, df: &DfStats) -> SparseVector {
    tfidf_from_text(&item.text(), vocab, df)
}

pub fn tfidf_from_text(text: &str, vocab: &Vocabulary, df: &DfStats) -> SparseVector {
    let mut ids: Vec<u32> = words(text)
        .iter()
        .filter_map(|w| vocab.id(w))
        .filter(|&id| vocab.is_word(id))
        .collect();
    ids.sort_unstable();
    let mut indices = Vec::new();
    let mut raw: Vec<f64> = Vec::new();
    for chunk in ids.chunk_by(|a, b| a == b) {
        let t = chunk[0];
        indices.push(t);
        raw.push(chunk.len() as f64 * df.idf(t));
    }
    let norm = raw.iter().map(|w| w * w).sum::<f64>().sqrt();
    let weights = raw.iter().map(|w| (w / norm) as f32).collect();
    SparseVector { indices, weights }
}

pub fn tfidf_all(corpus: &Corpus, vocab: &Vocabulary, exec: Exec) -> Vec<SparseVector> {
    let df = DfStats::from_vocab(vocab);
    exec.map(&corpus.items, |it| tfidf_vector(it, vocab, &df))
}
