//! Prefix-tree constrained decoding and two-stage inference.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Real};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::ids::LexicalIdMap;
use crate::model::{valid_len, FusionModel, MemoryKv};
use crate::prompt::PromptBundle;
use crate::vocab::{BOS, EOS};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrieNode {
    /// `(token, child)` pairs sorted by token.
    pub children: Vec<(u32, usize)>,
    /// Set on the node reached by the EOS edge of a complete identifier.
    pub item: Option<usize>,
}

/// Prefix tree over identifier token sequences. Every identifier is closed
/// by an EOS edge, so an identifier that is a prefix of another (`a-b` and
/// `a-b-2`) still ends on its own terminal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdTrie {
    pub nodes: Vec<TrieNode>,
    num_items: usize,
}

impl IdTrie {
    pub const ROOT: usize = 0;

    pub fn build(ids: &[Vec<u32>]) -> Result<Self> {
        let mut trie = IdTrie {
            nodes: vec![TrieNode::default()],
            num_items: ids.len(),
        };
        for (item, id) in ids.iter().enumerate() {
            if id.is_empty() || id.contains(&EOS) {
                return Err(Error::InvalidInput(format!("item {item} has an invalid identifier")));
            }
            let mut node = Self::ROOT;
            for &t in id.iter().chain(std::iter::once(&EOS)) {
                node = match trie.child(node, t) {
                    Some(c) => c,
                    None => trie.insert_child(node, t),
                };
            }
            if let Some(first) = trie.nodes[node].item {
                return Err(Error::DuplicateId { first, second: item });
            }
            trie.nodes[node].item = Some(item);
        }
        Ok(trie)
    }

    pub fn from_map(map: &LexicalIdMap) -> Result<Self> {
        Self::build(&map.ids)
    }

    fn insert_child(&mut self, node: usize, token: u32) -> usize {
        let id = self.nodes.len();
        self.nodes.push(TrieNode::default());
        let ch = &mut self.nodes[node].children;
        let at = ch.partition_point(|&(t, _)| t < token);
        ch.insert(at, (token, id));
        id
    }

    pub fn child(&self, node: usize, token: u32) -> Option<usize> {
        let ch = &self.nodes[node].children;
        ch.binary_search_by_key(&token, |&(t, _)| t).ok().map(|i| ch[i].1)
    }

    pub fn children(&self, node: usize) -> &[(u32, usize)] {
        &self.nodes[node].children
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_terminals(&self) -> usize {
        self.nodes.iter().filter(|n| n.item.is_some()).count()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.num_items == 0
    }

    /// Item whose identifier is exactly `tokens` (EOS not included).
    pub fn lookup(&self, tokens: &[u32]) -> Option<usize> {
        let mut node = Self::ROOT;
        for &t in tokens.iter().chain(std::iter::once(&EOS)) {
            node = self.child(node, t)?;
        }
        self.nodes[node].item
    }

    /// All identifiers (without EOS) with their items, in depth-first token order.
    pub fn enumerate(&self) -> Vec<(Vec<u32>, usize)> {
        let mut out = Vec::with_capacity(self.num_items);
        let mut stack = vec![(Self::ROOT, Vec::new())];
        while let Some((node, path)) = stack.pop() {
            if let Some(item) = self.nodes[node].item {
                let mut p: Vec<u32> = path;
                p.pop();
                out.push((p, item));
                continue;
            }
            for &(t, c) in self.nodes[node].children.iter().rev() {
                let mut p = path.clone();
                p.push(t);
                stack.push((c, p));
            }
        }
        out
    }
}

/// Log-softmax restricted to the given scores.
pub fn log_normalize(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scores.iter().map(|s| s - lse).collect()
}

/// Distribution over the tokens allowed at `node`, renormalised so that
/// disallowed tokens get zero mass.
///
/// # Panics
/// If `node` has no outgoing edge, which a well-formed trie never allows for
/// a node reached by a live hypothesis.
pub fn constrained_step<T: Real>(logits: &[T], trie: &IdTrie, node: usize) -> Vec<(u32, f64)> {
    let ch = trie.children(node);
    assert!(!ch.is_empty(), "trie node {node} has no continuation");
    let scores: Vec<f64> = ch.iter().map(|&(t, _)| logits[t as usize].as_f64()).collect();
    ch.iter()
        .zip(log_normalize(&scores))
        .map(|(&(t, _), lp)| (t, lp.exp()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub item: usize,
    /// Cumulative log-probability of the identifier.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamResult {
    pub ranked: Vec<Ranked>,
    /// Fewer than `top_n` identifiers were reachable.
    pub shortfall: bool,
}

fn rank_order(a: &Ranked, b: &Ranked) -> Ordering {
    b.score.total_cmp(&a.score).then(a.item.cmp(&b.item))
}

struct Hyp<T> {
    node: usize,
    logp: f64,
    state: crate::model::DecoderState<T>,
    hidden: Vec<T>,
}

/// Length-synchronous beam search over trie-constrained, renormalised steps.
///
/// Finished identifiers are pooled; the search stops when nothing is alive or
/// when every live hypothesis already scores strictly below the `top_n`-th
/// finished one, since extending a hypothesis can only lower its score.
pub fn beam_search<T: Real>(model: &FusionModel<T>, mem: &MemoryKv<T>, trie: &IdTrie, beam_size: usize, top_n: usize) -> Result<BeamResult> {
    if top_n == 0 || beam_size < top_n {
        return Err(Error::InvalidInput(format!("need beam_size >= top_n >= 1, got {beam_size} and {top_n}")));
    }
    let mut state = model.start_state();
    let hidden = model.step(mem, &mut state, BOS)?;
    let mut alive = vec![Hyp {
        node: IdTrie::ROOT,
        logp: 0.0,
        state,
        hidden,
    }];
    let mut finished: Vec<Ranked> = Vec::new();
    while !alive.is_empty() {
        let mut cands: Vec<(f64, usize, u32, usize)> = Vec::new();
        for (hi, h) in alive.iter().enumerate() {
            let ch = trie.children(h.node);
            assert!(!ch.is_empty(), "trie node {} has no continuation", h.node);
            let toks: Vec<u32> = ch.iter().map(|&(t, _)| t).collect();
            let scores: Vec<f64> = model.scores_for(&h.hidden, &toks).into_iter().map(Real::as_f64).collect();
            for (&(t, c), lp) in ch.iter().zip(log_normalize(&scores)) {
                cands.push((h.logp + lp, hi, t, c));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(beam_size);
        let mut next = Vec::with_capacity(cands.len());
        for (logp, hi, t, c) in cands {
            if t == EOS {
                let item = trie.nodes[c].item.expect("EOS edges lead to terminals");
                finished.push(Ranked { item, score: logp });
            } else {
                let mut state = alive[hi].state.clone();
                let hidden = model.step(mem, &mut state, t)?;
                next.push(Hyp {
                    node: c,
                    logp,
                    state,
                    hidden,
                });
            }
        }
        alive = next;
        if finished.len() >= top_n {
            finished.sort_by(rank_order);
            let kth = finished[top_n - 1].score;
            if alive.iter().all(|h| h.logp < kth) {
                break;
            }
        }
    }
    finished.sort_by(rank_order);
    let shortfall = finished.len() < top_n;
    finished.truncate(top_n);
    Ok(BeamResult { ranked: finished, shortfall })
}

/// Unconstrained argmax decoding until EOS or the length limit.
pub fn greedy_decode<T: Real>(model: &FusionModel<T>, mem: &MemoryKv<T>) -> Result<Vec<u32>> {
    let mut state = model.start_state();
    let mut token = BOS;
    let mut out = Vec::new();
    while state.len() < model.config.max_target_len {
        let hidden = model.step(mem, &mut state, token)?;
        let scores = model.all_scores(&hidden);
        token = (0..scores.len())
            .max_by(|&a, &b| scores[a].as_f64().total_cmp(&scores[b].as_f64()).then(b.cmp(&a)))
            .expect("non-empty vocabulary") as u32;
        out.push(token);
        if token == EOS {
            break;
        }
    }
    Ok(out)
}

/// Precomputed encoder outputs of item prompts for one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingCache<T> {
    pub fingerprint: String,
    pub entries: Vec<Option<Mat<T>>>,
}

const CACHE_MAGIC: &[u8; 4] = b"LREC";
const CACHE_VERSION: u32 = 1;

impl<T: Real> EncodingCache<T> {
    pub fn empty(fingerprint: impl Into<String>, num_items: usize) -> Self {
        EncodingCache {
            fingerprint: fingerprint.into(),
            entries: vec![None; num_items],
        }
    }

    /// Encode every item prompt, `chunk` prompts per encoder pass.
    pub fn build(model: &FusionModel<T>, item_prompts: &[Vec<u32>], chunk: usize, exec: Exec) -> Result<Self> {
        let chunks: Vec<&[Vec<u32>]> = item_prompts.chunks(chunk.max(1)).collect();
        let parts = exec.map(&chunks, |c| {
            let refs: Vec<&[u32]> = c.iter().map(Vec::as_slice).collect();
            model.encode_batch(&refs)
        });
        let mut entries = Vec::with_capacity(item_prompts.len());
        for p in parts {
            entries.extend(p?.into_iter().map(Some));
        }
        Ok(EncodingCache {
            fingerprint: model.fingerprint(),
            entries,
        })
    }

    pub fn get(&self, item: usize) -> Option<&Mat<T>> {
        self.entries.get(item).and_then(Option::as_ref)
    }

    pub fn check(&self, model: &FusionModel<T>) -> Result<()> {
        if self.fingerprint != model.fingerprint() {
            return Err(Error::Artifact("encoding cache was built for a different checkpoint".into()));
        }
        Ok(())
    }

    /// Layout: magic, version (u32), element width (u32), fingerprint length
    /// (u32) and bytes, item count (u64), width d (u64), one `(row offset,
    /// rows)` pair of u64 per item (offset `u64::MAX` marks a missing entry),
    /// then all rows back to back in little-endian order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.entries.iter().flatten().map(|m| m.cols).next().unwrap_or(0);
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
        out.extend_from_slice(&(self.fingerprint.len() as u32).to_le_bytes());
        out.extend_from_slice(self.fingerprint.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        out.extend_from_slice(&(d as u64).to_le_bytes());
        let mut offset = 0u64;
        for e in &self.entries {
            match e {
                Some(m) => {
                    out.extend_from_slice(&offset.to_le_bytes());
                    out.extend_from_slice(&(m.rows as u64).to_le_bytes());
                    offset += m.rows as u64;
                }
                None => {
                    out.extend_from_slice(&u64::MAX.to_le_bytes());
                    out.extend_from_slice(&0u64.to_le_bytes());
                }
            }
        }
        for m in self.entries.iter().flatten() {
            for &x in &m.data {
                x.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Artifact(format!("encoding cache: {m}"));
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != CACHE_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
        let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8 bytes"));
        if u32_at(take(4)?) != CACHE_VERSION {
            return Err(bad("unsupported version"));
        }
        if u32_at(take(4)?) as usize != T::BYTES {
            return Err(bad("element width mismatch"));
        }
        let flen = u32_at(take(4)?) as usize;
        let fingerprint = String::from_utf8(take(flen)?.to_vec()).map_err(|_| bad("fingerprint is not utf-8"))?;
        let n = u64_at(take(8)?) as usize;
        let d = u64_at(take(8)?) as usize;
        let mut table = Vec::with_capacity(n);
        for _ in 0..n {
            let off = u64_at(take(8)?);
            let rows = u64_at(take(8)?) as usize;
            table.push((off, rows));
        }
        let data_start = pos;
        let mut entries = Vec::with_capacity(n);
        for (off, rows) in table {
            if off == u64::MAX {
                entries.push(None);
                continue;
            }
            let start = data_start + off as usize * d * T::BYTES;
            let raw = bytes.get(start..start + rows * d * T::BYTES).ok_or_else(|| bad("truncated rows"))?;
            entries.push(Some(Mat::from_vec(rows, d, raw.chunks_exact(T::BYTES).map(T::read_le).collect())));
        }
        Ok(EncodingCache { fingerprint, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferStats {
    /// Prompt tokens encoded at request time.
    pub online_tokens: usize,
    pub cache_misses: usize,
}

impl std::ops::AddAssign for InferStats {
    fn add_assign(&mut self, o: Self) {
        self.online_tokens += o.online_tokens;
        self.cache_misses += o.cache_misses;
    }
}

/// Recommend for one bundle. Item blocks come from `cache` when present;
/// misses are encoded online and counted. With no cache every prompt is
/// encoded online and nothing counts as a miss.
pub fn infer<T: Real>(
    model: &FusionModel<T>,
    bundle: &PromptBundle,
    cache: Option<&EncodingCache<T>>,
    trie: &IdTrie,
    beam_size: usize,
    top_n: usize,
) -> Result<(BeamResult, InferStats)> {
    if let Some(c) = cache {
        c.check(model)?;
    }
    let mut stats = InferStats::default();
    let mut online: Vec<&[u32]> = vec![bundle.user_prompt.as_slice()];
    let mut slots = Vec::with_capacity(bundle.items.len());
    for (j, &item) in bundle.items.iter().enumerate() {
        match cache.and_then(|c| c.get(item)) {
            Some(h) => slots.push(Err(h)),
            None => {
                if cache.is_some() {
                    stats.cache_misses += 1;
                }
                slots.push(Ok(online.len()));
                online.push(&bundle.item_prompts[j]);
            }
        }
    }
    stats.online_tokens = online.iter().map(|p| valid_len(p)).sum();
    let encoded = model.encode_batch(&online)?;
    let mut blocks: Vec<&Mat<T>> = vec![&encoded[0]];
    for s in &slots {
        blocks.push(match s {
            Err(h) => h,
            Ok(i) => &encoded[*i],
        });
    }
    let fused = model.fuse(&blocks)?;
    let mem = model.memory_kv(&fused);
    Ok((beam_search(model, &mem, trie, beam_size, top_n)?, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_and_shared_prefix() {
        let t = IdTrie::build(&[vec![10, 11, 12]]).unwrap();
        assert_eq!(t.len(), 5);
        assert_eq!(t.num_terminals(), 1);
        let t = IdTrie::build(&[vec![10, 11, 12], vec![10, 11, 13]]).unwrap();
        let branching: Vec<usize> = (0..t.len()).filter(|&n| t.children(n).len() > 1).collect();
        assert_eq!(branching.len(), 1);
        let depth2 = t.child(t.child(IdTrie::ROOT, 10).unwrap(), 11).unwrap();
        assert_eq!(branching, vec![depth2]);
    }

    #[test]
    fn prefix_identifiers_end_on_eos() {
        let t = IdTrie::build(&[vec![10, 11], vec![10, 11, 5]]).unwrap();
        assert_eq!(t.lookup(&[10, 11]), Some(0));
        assert_eq!(t.lookup(&[10, 11, 5]), Some(1));
        assert_eq!(t.lookup(&[10]), None);
        assert_eq!(t.enumerate(), vec![(vec![10, 11], 0), (vec![10, 11, 5], 1)]);
    }

    #[test]
    fn duplicate_names_both_items() {
        let err = IdTrie::build(&[vec![7, 8], vec![9], vec![7, 8]]).unwrap_err();
        assert!(matches!(err, Error::DuplicateId { first: 0, second: 2 }));
    }

    #[test]
    fn forced_and_symmetric_steps() {
        let t = IdTrie::build(&[vec![10, 11], vec![12, 13]]).unwrap();
        let logits = vec![0.3f64; 20];
        let root = constrained_step(&logits, &t, IdTrie::ROOT);
        assert_eq!(root.len(), 2);
        assert!(root.iter().all(|&(_, p)| (p - 0.5).abs() < 1e-15));
        let mut skew = vec![0.0f64; 20];
        skew[11] = -30.0;
        let forced = constrained_step(&skew, &t, t.child(IdTrie::ROOT, 10).unwrap());
        assert_eq!(forced, vec![(11, 1.0)]);
    }

    #[test]
    fn cache_bytes_roundtrip() {
        let c = EncodingCache {
            fingerprint: "abc".into(),
            entries: vec![Some(Mat::from_fn(2, 3, |r, c| (r * 3 + c) as f32)), None, Some(Mat::zeros(0, 3)), Some(Mat::from_fn(1, 3, |_, c| c as f32))],
        };
        let back = EncodingCache::<f32>::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert!(EncodingCache::<f64>::from_bytes(&c.to_bytes()).is_err());
    }
}
