//! Lloyd's k-means with k-means++ seeding, and recursive clustering into a tree.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::ItemEmbeddings;
use crate::exec::Exec;

pub const MAX_LLOYD_ITERS: usize = 100;

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &c)| {
            let d = x as f64 - c;
            d * d
        })
        .sum()
}

fn nearest(p: &[f32], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(p, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Cluster the rows `members` of `emb` into at most `k` groups.
///
/// Returns one assignment per member. Empty clusters are re-seeded from the
/// point farthest from its centre; iteration stops when assignments are stable
/// or after [`MAX_LLOYD_ITERS`] rounds.
pub fn kmeans(emb: &ItemEmbeddings, members: &[usize], k: usize, seed: u64) -> Vec<usize> {
    let n = members.len();
    assert!(k >= 1 && n >= k, "kmeans needs at least k points");
    let point = |m: usize| emb.row(members[m]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let to64 = |p: &[f32]| p.iter().map(|&x| x as f64).collect::<Vec<f64>>();

    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = vec![to64(point(rng.gen_range(0..n)))];
    let mut d2: Vec<f64> = (0..n).map(|m| sq_dist(point(m), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (m, &w) in d2.iter().enumerate() {
                if r < w {
                    chosen = m;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let c = to64(point(pick));
        for (m, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(point(m), &c));
        }
        centers.push(c);
    }

    let dims = emb.dims;
    let mut assign = vec![usize::MAX; n];
    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        let mut dist = vec![0f64; n];
        for m in 0..n {
            let (c, d) = nearest(point(m), &centers);
            dist[m] = d;
            if assign[m] != c {
                assign[m] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0f64; dims]; k];
        let mut counts = vec![0usize; k];
        for m in 0..n {
            counts[assign[m]] += 1;
            for (s, &x) in sums[assign[m]].iter_mut().zip(point(m)) {
                *s += x as f64;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed from the farthest point that is not a singleton's only member
                let far = (0..n)
                    .filter(|&m| counts[assign[m]] > 1)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)));
                if let Some(m) = far {
                    counts[assign[m]] -= 1;
                    counts[c] = 1;
                    assign[m] = c;
                    dist[m] = 0.0;
                    centers[c] = to64(point(m));
                }
            }
        }
    }
    assign
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterNode {
    pub members: Vec<usize>,
    pub children: Vec<usize>,
    pub depth: usize,
    /// Representative token, set once identifiers are assigned. The root has none.
    pub token: Option<u32>,
}

/// Arena-allocated cluster tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterTree {
    pub nodes: Vec<ClusterNode>,
    pub k: usize,
    pub c: usize,
    pub l: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterParams {
    /// Branching factor.
    pub k: usize,
    /// A node with at most this many members is a leaf.
    pub c: usize,
    /// Maximum depth.
    pub l: usize,
    pub seed: u64,
}

struct Subtree {
    members: Vec<usize>,
    depth: usize,
    children: Vec<Subtree>,
}

fn node_seed(seed: u64, path: &[usize]) -> u64 {
    // FNV-1a over the child-index path
    let mut h: u64 = 0xcbf29ce484222325 ^ seed;
    for &p in path {
        for b in (p as u64).to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn grow(emb: &ItemEmbeddings, members: Vec<usize>, depth: usize, path: Vec<usize>, p: &ClusterParams, exec: Exec) -> Subtree {
    let mut node = Subtree {
        members,
        depth,
        children: Vec::new(),
    };
    if node.members.len() > p.c && depth < p.l && node.members.len() >= p.k {
        let assign = kmeans(emb, &node.members, p.k, node_seed(p.seed, &path));
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); p.k];
        for (m, &a) in assign.iter().enumerate() {
            groups[a].push(node.members[m]);
        }
        groups.retain(|g| !g.is_empty());
        let jobs: Vec<(usize, Vec<usize>)> = groups.into_iter().enumerate().collect();
        node.children = exec.map(&jobs, |(ci, g)| {
            let mut child_path = path.clone();
            child_path.push(*ci);
            grow(emb, g.clone(), depth + 1, child_path, p, exec)
        });
    }
    node
}

/// Recursively split while a node has more than `c` members and depth < `l`.
/// Subtrees use seeds derived from their path, so the result does not depend
/// on the execution schedule.
pub fn hierarchical_cluster(emb: &ItemEmbeddings, params: &ClusterParams, exec: Exec) -> ClusterTree {
    assert!(params.k >= 2 && params.c >= 1 && params.l >= 1);
    let root = grow(emb, (0..emb.num_items).collect(), 0, Vec::new(), params, exec);
    let mut nodes = Vec::new();
    fn flatten(t: Subtree, nodes: &mut Vec<ClusterNode>) -> usize {
        let id = nodes.len();
        nodes.push(ClusterNode {
            members: t.members,
            children: Vec::new(),
            depth: t.depth,
            token: None,
        });
        let kids: Vec<usize> = t.children.into_iter().map(|c| flatten(c, nodes)).collect();
        nodes[id].children = kids;
        id
    }
    flatten(root, &mut nodes);
    ClusterTree {
        nodes,
        k: params.k,
        c: params.c,
        l: params.l,
    }
}

impl ClusterTree {
    pub fn root(&self) -> &ClusterNode {
        &self.nodes[0]
    }

    pub fn leaves(&self) -> impl Iterator<Item = (usize, &ClusterNode)> {
        self.nodes.iter().enumerate().filter(|(_, n)| n.children.is_empty())
    }

    /// Leaf node id for each item.
    pub fn leaf_of(&self) -> Vec<usize> {
        let n = self.root().members.len();
        let mut out = vec![usize::MAX; n];
        for (id, leaf) in self.leaves() {
            for &m in &leaf.members {
                out[m] = id;
            }
        }
        out
    }

    /// Node ids from depth 1 down to the item's leaf.
    pub fn path_of(&self) -> Vec<Vec<usize>> {
        let n = self.root().members.len();
        let mut out = vec![Vec::new(); n];
        let mut stack = vec![(0usize, Vec::<usize>::new())];
        while let Some((id, path)) = stack.pop() {
            let node = &self.nodes[id];
            if node.children.is_empty() {
                for &m in &node.members {
                    out[m] = path.clone();
                }
            }
            for &c in &node.children {
                let mut p = path.clone();
                p.push(c);
                stack.push((c, p));
            }
        }
        out
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Indented text dump: one line per node with depth, size and token.
    pub fn dump(&self, token_name: impl Fn(u32) -> String) -> String {
        let mut out = String::new();
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let n = &self.nodes[id];
            let tok = n.token.map(&token_name).unwrap_or_else(|| "<root>".into());
            out.push_str(&format!(
                "{}{} [{} items]\n",
                "  ".repeat(n.depth),
                tok,
                n.members.len()
            ));
            stack.extend(n.children.iter().rev());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(seed: u64) -> (ItemEmbeddings, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for b in 0..2 {
            for _ in 0..50 {
                let mut r: Vec<f32> = (0..4).map(|_| noise.sample(&mut rng)).collect();
                r[0] += if b == 0 { 0.0 } else { 10.0 };
                rows.push(r);
                labels.push(b);
            }
        }
        (ItemEmbeddings::from_rows(&rows), labels)
    }

    #[test]
    fn small_input_is_single_leaf() {
        let emb = ItemEmbeddings::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.5, 0.5]]);
        let t = hierarchical_cluster(&emb, &ClusterParams { k: 2, c: 3, l: 4, seed: 0 }, Exec::Sequential);
        assert_eq!(t.nodes.len(), 1);
        assert_eq!(t.root().depth, 0);
    }

    #[test]
    fn fewer_items_than_k_is_leaf() {
        let emb = ItemEmbeddings::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]);
        let t = hierarchical_cluster(&emb, &ClusterParams { k: 5, c: 1, l: 4, seed: 0 }, Exec::Sequential);
        assert_eq!(t.nodes.len(), 1);
    }

    #[test]
    fn first_split_recovers_blobs() {
        let (emb, labels) = blobs(42);
        let t = hierarchical_cluster(&emb, &ClusterParams { k: 2, c: 10, l: 3, seed: 9 }, Exec::Sequential);
        let root = t.root();
        assert_eq!(root.children.len(), 2);
        for &c in &root.children {
            let ms = &t.nodes[c].members;
            assert_eq!(ms.len(), 50);
            assert!(ms.iter().all(|&m| labels[m] == labels[ms[0]]));
        }
    }

    #[test]
    fn children_partition_parent_and_respect_guards() {
        let (emb, _) = blobs(3);
        let p = ClusterParams { k: 3, c: 7, l: 3, seed: 1 };
        let t = hierarchical_cluster(&emb, &p, Exec::Sequential);
        for n in &t.nodes {
            assert!(n.depth <= p.l);
            if n.children.is_empty() {
                assert!(n.members.len() <= p.c || n.depth == p.l || n.members.len() < p.k);
            } else {
                let mut all: Vec<usize> = n.children.iter().flat_map(|&c| t.nodes[c].members.clone()).collect();
                all.sort();
                let mut mine = n.members.clone();
                mine.sort();
                assert_eq!(all, mine);
                assert!(n.children.len() <= p.k);
            }
        }
        let t2 = hierarchical_cluster(&emb, &p, Exec::Parallel);
        assert_eq!(t, t2);
    }

    #[test]
    fn identical_points_terminate() {
        let emb = ItemEmbeddings::from_rows(&vec![vec![1.0, 1.0]; 20]);
        let t = hierarchical_cluster(&emb, &ClusterParams { k: 2, c: 2, l: 4, seed: 0 }, Exec::Sequential);
        assert!(t.max_depth() <= 4);
        let mut all: Vec<usize> = t.leaves().flat_map(|(_, n)| n.members.clone()).collect();
        all.sort();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
    }
}
