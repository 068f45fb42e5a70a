#![allow(dead_code)]

use std::collections::BTreeSet;

use lexrec::autodiff::{Real, Tape};
use lexrec::decode::IdTrie;
use lexrec::model::{FusionModel, MemoryKv, ModelConfig, TrainBatch};
use lexrec::vocab::EOS;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_config(vocab: usize, d: usize, max_len: usize, max_items: usize, max_target_len: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        n_layers: 2,
        n_heads: 2,
        ffn_mult: 2,
        max_len,
        max_items,
        vocab_size: vocab,
        max_target_len,
        dropout: 0.0,
        init_std: 0.3,
        seed: 11,
    }
}

/// `len - 1` random word tokens followed by EOS.
pub fn random_prompt(r: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<u32> {
    let mut p: Vec<u32> = (0..len - 1).map(|_| r.gen_range(14..vocab as u32)).collect();
    p.push(EOS);
    p
}

/// `n` distinct identifiers of `l` components drawn from a small alphabet per
/// position, so prefixes are shared and the trie branches at every level.
pub fn random_catalog(r: &mut ChaCha8Rng, n: usize, l: usize, vocab: usize, alphabet: usize) -> Vec<Vec<u32>> {
    assert!(alphabet.pow(l as u32) >= n, "catalog larger than the identifier space");
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let id: Vec<u32> = (0..l)
            .map(|pos| 14 + ((pos * alphabet + r.gen_range(0..alphabet)) % (vocab - 14)) as u32)
            .collect();
        if seen.insert(id.clone()) {
            out.push(id);
        }
    }
    out
}

pub fn memory<T: Real>(model: &FusionModel<T>, prompts: &[Vec<u32>]) -> MemoryKv<T> {
    let refs: Vec<&[u32]> = prompts.iter().map(Vec::as_slice).collect();
    let enc = model.encode_batch(&refs).unwrap();
    let blocks: Vec<_> = enc.iter().collect();
    let fused = model.fuse(&blocks).unwrap();
    model.memory_kv(&fused)
}

fn log_softmax_over(row: &[f64], allowed: &[u32]) -> Vec<f64> {
    let m = allowed.iter().map(|&t| row[t as usize]).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = allowed.iter().map(|&t| (row[t as usize] - m).exp()).sum();
    allowed.iter().map(|&t| row[t as usize] - m - z.ln()).collect()
}

/// Teacher-forced log-likelihood of every catalog identifier, each step
/// renormalised over the tokens the trie allows at that prefix. Logits come
/// from the training graph, not from the incremental decoder.
pub fn exhaustive_scores(model: &FusionModel<f64>, prompts: &[Vec<u32>], catalog: &[Vec<u32>], trie: &IdTrie) -> Vec<f64> {
    let mut batch = TrainBatch::default();
    for id in catalog {
        let mut t = id.clone();
        t.push(EOS);
        batch.push(prompts.iter().map(Vec::as_slice), t);
    }
    let mut tape = Tape::new(&model.params);
    let (logits, _) = model.batch_logits(&mut tape, &batch, None).unwrap();
    let lv = tape.value(logits).clone();
    let mut row = 0;
    let mut scores = Vec::with_capacity(catalog.len());
    for id in catalog {
        let mut node = IdTrie::ROOT;
        let mut total = 0.0;
        for &tok in id.iter().chain(std::iter::once(&EOS)) {
            let allowed: Vec<u32> = trie.children(node).iter().map(|c| c.0).collect();
            let lp = log_softmax_over(lv.row(row), &allowed);
            let pos = allowed.iter().position(|&a| a == tok).expect("identifier walks the trie");
            total += lp[pos];
            node = trie.children(node)[pos].1;
            row += 1;
        }
        scores.push(total);
    }
    scores
}

/// Items sorted by score descending, ties by index.
pub fn oracle_ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}
