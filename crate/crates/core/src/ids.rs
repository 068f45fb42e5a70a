//! Hierarchical lexical identifiers built from a cluster tree and TF-IDF vectors.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterTree;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::tfidf::SparseVector;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdReport {
    /// Clusters whose members had no eligible scored token.
    pub cluster_fallbacks: usize,
    /// Items whose cluster path was shorter than `l`.
    pub padded_items: usize,
    /// Items that ran out of own tokens and were padded with index digits.
    pub digit_padded_items: Vec<usize>,
    /// Items that received a dedup suffix.
    pub deduplicated: usize,
}

/// Bijection between items and identifiers (`l` word components plus an
/// optional trailing run of digit components).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LexicalIdMap {
    pub ids: Vec<Vec<u32>>,
    pub base_len: usize,
    /// Per-item count of components that come from the cluster path.
    pub path_len: Vec<usize>,
    pub tree: ClusterTree,
    pub report: IdReport,
    #[serde(skip)]
    reverse: HashMap<Vec<u32>, usize>,
}

impl PartialEq for LexicalIdMap {
    fn eq(&self, other: &Self) -> bool {
        self.ids == other.ids && self.base_len == other.base_len && self.tree == other.tree && self.path_len == other.path_len
    }
}

impl LexicalIdMap {
    pub fn from_parts(ids: Vec<Vec<u32>>, base_len: usize, path_len: Vec<usize>, tree: ClusterTree, report: IdReport) -> Result<Self> {
        let mut m = LexicalIdMap {
            ids,
            base_len,
            path_len,
            tree,
            report,
            reverse: HashMap::new(),
        };
        m.rebuild_reverse()?;
        Ok(m)
    }

    /// Flat identifiers without a cluster tree, mainly for tests and tools.
    pub fn from_ids(ids: Vec<Vec<u32>>) -> Result<Self> {
        let n = ids.len();
        let base_len = ids.iter().map(Vec::len).min().unwrap_or(0);
        let tree = ClusterTree {
            nodes: vec![crate::cluster::ClusterNode {
                members: (0..n).collect(),
                children: vec![],
                depth: 0,
                token: None,
            }],
            k: 2,
            c: n.max(1),
            l: base_len.max(1),
        };
        Self::from_parts(ids, base_len, vec![0; n], tree, IdReport::default())
    }

    pub fn rebuild_reverse(&mut self) -> Result<()> {
        self.reverse.clear();
        for (i, id) in self.ids.iter().enumerate() {
            if let Some(prev) = self.reverse.insert(id.clone(), i) {
                return Err(Error::DuplicateId { first: prev, second: i });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, item: usize) -> &[u32] {
        &self.ids[item]
    }

    pub fn lookup(&self, components: &[u32]) -> Option<usize> {
        self.reverse.get(components).copied()
    }

    pub fn display(&self, item: usize, vocab: &Vocabulary) -> String {
        self.ids[item]
            .iter()
            .map(|&t| vocab.token(t))
            .collect::<Vec<_>>()
            .join("-")
    }

    /// One line per item: `item_key<TAB>display-id`.
    pub fn write_tsv<W: Write>(&self, mut w: W, corpus: &Corpus, vocab: &Vocabulary) -> std::io::Result<()> {
        for (i, rec) in corpus.items.iter().enumerate() {
            writeln!(w, "{}\t{}", rec.item_key, self.display(i, vocab))?;
        }
        Ok(())
    }
}

fn argmax_eligible(scores: &[f64], eligible: impl Fn(u32) -> bool) -> Option<u32> {
    let mut best: Option<(u32, f64)> = None;
    for (t, &s) in scores.iter().enumerate() {
        let t = t as u32;
        if s > 0.0 && eligible(t) && best.is_none_or(|(_, b)| s > b) {
            best = Some((t, s));
        }
    }
    best.map(|b| b.0)
}

/// Assign representative tokens to every cluster and build identifiers of
/// exactly `l` components.
///
/// Children of a node are processed by descending size (ties by child index);
/// a child's token is the argmax of its members' mean TF-IDF vector, skipping
/// tokens on the ancestor path and tokens already taken by siblings. Items with
/// shorter paths are padded with their own highest-weight tokens, and repeated
/// identifiers get a trailing digit suffix ("2", "3", ...) in item order.
pub fn assign_ids(tree: &ClusterTree, vectors: &[SparseVector], vocab: &Vocabulary, l: usize) -> Result<LexicalIdMap> {
    let n = tree.root().members.len();
    if vectors.len() != n {
        return Err(Error::Shape {
            expected: format!("{n} TF-IDF vectors"),
            actual: format!("{}", vectors.len()),
        });
    }
    let mut tree = tree.clone();
    let mut report = IdReport::default();
    let words = vocab.word_ids();

    let mut stack: Vec<(usize, Vec<u32>)> = vec![(0, Vec::new())];
    while let Some((node, path)) = stack.pop() {
        let children = tree.nodes[node].children.clone();
        let mut order: Vec<usize> = (0..children.len()).collect();
        order.sort_by(|&a, &b| {
            tree.nodes[children[b]].members.len()
                .cmp(&tree.nodes[children[a]].members.len())
                .then(a.cmp(&b))
        });
        let mut claimed: BTreeSet<u32> = BTreeSet::new();
        for &ci in &order {
            let child = children[ci];
            let members = &tree.nodes[child].members;
            let mut mean = vec![0f64; vocab.len()];
            for &m in members {
                for (&t, &w) in vectors[m].indices.iter().zip(&vectors[m].weights) {
                    mean[t as usize] += w as f64;
                }
            }
            let inv = 1.0 / members.len() as f64;
            mean.iter_mut().for_each(|x| *x *= inv);
            let free = |t: u32| !path.contains(&t) && !claimed.contains(&t) && words.contains(&t);
            let token = match argmax_eligible(&mean, free) {
                Some(t) => t,
                None => {
                    report.cluster_fallbacks += 1;
                    words.clone().find(|&t| free(t)).ok_or_else(|| {
                        Error::InvalidInput("vocabulary too small to label clusters".into())
                    })?
                }
            };
            claimed.insert(token);
            tree.nodes[child].token = Some(token);
            let mut child_path = path.clone();
            child_path.push(token);
            stack.push((child, child_path));
        }
    }

    let paths = tree.path_of();
    let mut ids = Vec::with_capacity(n);
    let mut path_len = Vec::with_capacity(n);
    for item in 0..n {
        let mut id: Vec<u32> = paths[item]
            .iter()
            .map(|&node| tree.nodes[node].token.expect("tokens assigned"))
            .collect();
        id.truncate(l);
        path_len.push(id.len());
        if id.len() < l {
            report.padded_items += 1;
            for t in vectors[item].ranked_tokens() {
                if id.len() == l {
                    break;
                }
                if !id.contains(&t) {
                    id.push(t);
                }
            }
            if id.len() < l {
                report.digit_padded_items.push(item);
                let digits = vocab.spell_number(item);
                let mut k = 0;
                while id.len() < l {
                    id.push(digits[k % digits.len()]);
                    k += 1;
                }
            }
        }
        ids.push(id);
    }

    let mut seen: HashMap<Vec<u32>, usize> = HashMap::new();
    for id in ids.iter_mut() {
        let count = seen.entry(id.clone()).or_insert(0);
        *count += 1;
        if *count > 1 {
            report.deduplicated += 1;
            id.extend(vocab.spell_number(*count));
        }
    }

    LexicalIdMap::from_parts(ids, l, path_len, tree, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{ClusterNode, ClusterTree};
    use crate::corpus::ItemRecord;
    use crate::tfidf::tfidf_all;
    use crate::vocab::VocabConfig;
    use crate::exec::Exec;

    fn corpus(texts: &[&str]) -> Corpus {
        Corpus {
            users: vec![],
            items: texts
                .iter()
                .enumerate()
                .map(|(i, t)| ItemRecord::new(format!("i{i}"), &[("title", t)]))
                .collect(),
            sequences: vec![],
        }
    }

    fn single_leaf(n: usize) -> ClusterTree {
        ClusterTree {
            nodes: vec![ClusterNode {
                members: (0..n).collect(),
                children: vec![],
                depth: 0,
                token: None,
            }],
            k: 2,
            c: n,
            l: 3,
        }
    }

    #[test]
    fn single_leaf_uses_top_tokens() {
        let c = corpus(&["alpha alpha alpha beta beta gamma", "delta delta epsilon zeta"]);
        let v = Vocabulary::build(&c, &VocabConfig::default());
        let vecs = tfidf_all(&c, &v, Exec::Sequential);
        let m = assign_ids(&single_leaf(2), &vecs, &v, 3).unwrap();
        assert_eq!(m.display(0, &v), "alpha-beta-gamma");
        assert_eq!(m.display(1, &v), "delta-epsilon-zeta");
        assert_eq!(m.report.padded_items, 2);
    }

    #[test]
    fn identical_text_gets_digit_suffix() {
        let c = corpus(&["red soap bar", "red soap bar", "red soap bar"]);
        let v = Vocabulary::build(&c, &VocabConfig::default());
        let vecs = tfidf_all(&c, &v, Exec::Sequential);
        let m = assign_ids(&single_leaf(3), &vecs, &v, 2).unwrap();
        assert_eq!(m.ids[0].len(), 2);
        assert_eq!(m.display(1, &v), format!("{}-2", m.display(0, &v)));
        assert_eq!(m.display(2, &v), format!("{}-3", m.display(0, &v)));
        for i in 0..3 {
            assert_eq!(m.lookup(m.id(i)), Some(i));
        }
    }

    #[test]
    fn exhausted_vocabulary_pads_with_index_digits() {
        let c = corpus(&["solo", ""]);
        let v = Vocabulary::build(&c, &VocabConfig::default());
        let vecs = tfidf_all(&c, &v, Exec::Sequential);
        let m = assign_ids(&single_leaf(2), &vecs, &v, 3).unwrap();
        assert_eq!(m.display(0, &v), "solo-0-0");
        assert_eq!(m.display(1, &v), "1-1-1");
        assert_eq!(m.report.digit_padded_items, vec![0, 1]);
    }
}
