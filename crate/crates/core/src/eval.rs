//! Full-ranking evaluation, popularity groups and encoding-cost accounting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::corpus::SplitCorpus;
use crate::decode::{infer, EncodingCache, IdTrie, InferStats};
use crate::error::Result;
use crate::exec::Exec;
use crate::ids::LexicalIdMap;
use crate::model::FusionModel;
use crate::prompt::{build_prompt_bundle, ItemPrompts, PromptBundle, PromptConfig};
use crate::vocab::Vocabulary;

pub const DEFAULT_CUTOFFS: [usize; 3] = [5, 10, 20];

/// 1-based rank of `target` in `ranked`.
pub fn rank_of(ranked: &[usize], target: usize) -> Option<usize> {
    ranked.iter().position(|&i| i == target).map(|p| p + 1)
}

pub fn recall_at_k(ranked: &[usize], target: usize, k: usize) -> f64 {
    match rank_of(ranked, target) {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

/// Single-target NDCG: the ideal DCG is 1.
pub fn ndcg_at_k(ranked: &[usize], target: usize, k: usize) -> f64 {
    match rank_of(ranked, target) {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

/// Head-item flags: the top `ceil(0.2 n)` items by popularity, ties broken
/// by ascending item index.
pub fn head_items(popularity: &[usize]) -> Vec<bool> {
    let n = popularity.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| popularity[b].cmp(&popularity[a]).then(a.cmp(&b)));
    let cut = (n as f64 * 0.2).ceil() as usize;
    let mut head = vec![false; n];
    for &i in &order[..cut.min(n)] {
        head[i] = true;
    }
    head
}

/// The same ranking for everybody: items by training popularity, ties by index.
pub fn popularity_ranking(popularity: &[usize], top_n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..popularity.len()).collect();
    order.sort_by(|&a, &b| popularity[b].cmp(&popularity[a]).then(a.cmp(&b)));
    order.truncate(top_n);
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexityAccount {
    pub user_tokens: usize,
    pub item_tokens: usize,
    pub num_items: usize,
    pub early_online_tokens: usize,
    pub late_online_tokens: usize,
    pub late_offline_tokens: usize,
    pub ratio: f64,
}

/// Tokens encoded per request when all prompts are concatenated (early
/// fusion) versus when item prompts are encoded offline (late fusion).
pub fn complexity_account(user_tokens: usize, item_tokens: usize, num_items: usize) -> ComplexityAccount {
    let early = user_tokens + num_items * item_tokens;
    ComplexityAccount {
        user_tokens,
        item_tokens,
        num_items,
        early_online_tokens: early,
        late_online_tokens: user_tokens,
        late_offline_tokens: num_items * item_tokens,
        ratio: if user_tokens == 0 { f64::NAN } else { early as f64 / user_tokens as f64 },
    }
}

impl ComplexityAccount {
    pub fn render(&self) -> String {
        format!(
            "|T_u|={} |T_i*|={} |s|={}\nearly fusion online tokens: {}\nlate fusion online tokens:  {}\nlate fusion offline tokens: {}\nreduction: {}x",
            self.user_tokens,
            self.item_tokens,
            self.num_items,
            self.early_online_tokens,
            self.late_online_tokens,
            self.late_offline_tokens,
            self.ratio
        )
    }
}

/// One evaluated request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub user: usize,
    pub history_len: usize,
    pub target: usize,
    pub bundle: PromptBundle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    Valid,
    Test,
}

/// Bundles for every split user, predicting the validation or test item.
pub fn eval_cases(
    split: &SplitCorpus,
    which: Target,
    id_map: &LexicalIdMap,
    vocab: &Vocabulary,
    items: &ItemPrompts,
    config: &PromptConfig,
) -> Result<Vec<EvalCase>> {
    split
        .users
        .iter()
        .map(|u| {
            let (history, target) = match which {
                Target::Test => (u.test_history(), u.test),
                Target::Valid => (u.train.clone(), u.valid),
            };
            Ok(EvalCase {
                user: u.user,
                history_len: history.len(),
                target,
                bundle: build_prompt_bundle(&history, id_map, vocab, items, config)?,
            })
        })
        .collect()
}

/// Ranking produced for one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserOutcome {
    pub user: usize,
    pub target: usize,
    pub history_len: usize,
    pub ranked: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub n_users: usize,
    /// Aligned with [`EvalReport::cutoffs`].
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cutoffs: Vec<usize>,
    pub num_users: usize,
    /// Users without a test target.
    pub excluded_users: usize,
    /// Keyed by `all`, `head`, `tail` and `len:<range>`.
    pub groups: BTreeMap<String, GroupMetrics>,
    pub config_fingerprint: String,
}

pub fn length_bucket(history_len: usize) -> &'static str {
    match history_len {
        0..=5 => "len:1-5",
        6..=10 => "len:6-10",
        11..=20 => "len:11-20",
        _ => "len:21+",
    }
}

/// Aggregate rankings. Sums run in case order, so the report does not depend
/// on how the rankings were produced.
pub fn aggregate(outcomes: &[UserOutcome], head: &[bool], cutoffs: &[usize], excluded_users: usize, config_fingerprint: &str) -> EvalReport {
    let mut sums: BTreeMap<String, (usize, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for o in outcomes {
        let groups = [
            "all",
            if head[o.target] { "head" } else { "tail" },
            length_bucket(o.history_len),
        ];
        for g in groups {
            let e = sums
                .entry(g.to_string())
                .or_insert_with(|| (0, vec![0.0; cutoffs.len()], vec![0.0; cutoffs.len()]));
            e.0 += 1;
            for (ci, &k) in cutoffs.iter().enumerate() {
                e.1[ci] += recall_at_k(&o.ranked, o.target, k);
                e.2[ci] += ndcg_at_k(&o.ranked, o.target, k);
            }
        }
    }
    let groups = sums
        .into_iter()
        .map(|(g, (n, r, nd))| {
            let inv = 1.0 / n as f64;
            (
                g,
                GroupMetrics {
                    n_users: n,
                    recall: r.into_iter().map(|x| x * inv).collect(),
                    ndcg: nd.into_iter().map(|x| x * inv).collect(),
                },
            )
        })
        .collect();
    EvalReport {
        cutoffs: cutoffs.to_vec(),
        num_users: outcomes.len(),
        excluded_users,
        groups,
        config_fingerprint: config_fingerprint.to_string(),
    }
}

impl EvalReport {
    pub fn metric(&self, group: &str, name: &str, k: usize) -> Option<f64> {
        let g = self.groups.get(group)?;
        let ci = self.cutoffs.iter().position(|&c| c == k)?;
        match name {
            "recall" => Some(g.recall[ci]),
            "ndcg" => Some(g.ndcg[ci]),
            _ => None,
        }
    }

    /// Flat `metric,cutoff,group,value,n_users` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "metric,cutoff,group,value,n_users")?;
        for (g, m) in &self.groups {
            for (ci, &k) in self.cutoffs.iter().enumerate() {
                writeln!(w, "recall,{k},{g},{},{}", m.recall[ci], m.n_users)?;
                writeln!(w, "ndcg,{k},{g},{},{}", m.ndcg[ci], m.n_users)?;
            }
        }
        Ok(())
    }

    /// Plain-text table with one row per group.
    pub fn table(&self) -> String {
        let mut out = format!("{:<12}{:>7}", "group", "users");
        for &k in &self.cutoffs {
            let _ = write!(out, "{:>9}{:>9}", format!("R@{k}"), format!("N@{k}"));
        }
        out.push('\n');
        for (g, m) in &self.groups {
            let _ = write!(out, "{g:<12}{:>7}", m.n_users);
            for ci in 0..self.cutoffs.len() {
                let _ = write!(out, "{:>9.4}{:>9.4}", m.recall[ci], m.ndcg[ci]);
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub beam_size: usize,
    pub top_n: usize,
}

/// Beam inference for every case against the full catalogue trie.
pub fn run_cases<T: Real>(
    model: &FusionModel<T>,
    cases: &[EvalCase],
    cache: Option<&EncodingCache<T>>,
    trie: &IdTrie,
    settings: EvalSettings,
    exec: Exec,
) -> Result<(Vec<UserOutcome>, InferStats)> {
    let results = exec.map(cases, |c| infer(model, &c.bundle, cache, trie, settings.beam_size, settings.top_n));
    let mut outcomes = Vec::with_capacity(cases.len());
    let mut stats = InferStats::default();
    for (c, r) in cases.iter().zip(results) {
        let (beam, s) = r?;
        stats += s;
        outcomes.push(UserOutcome {
            user: c.user,
            target: c.target,
            history_len: c.history_len,
            ranked: beam.ranked.iter().map(|r| r.item).collect(),
        });
    }
    Ok((outcomes, stats))
}

/// Percentile bootstrap interval of the mean paired difference `a - b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

pub fn paired_bootstrap(a: &[f64], b: &[f64], resamples: usize, confidence: f64, seed: u64) -> BootstrapCi {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diff.iter().sum::<f64>() / n.max(1) as f64;
    if n == 0 {
        return BootstrapCi { mean, lo: mean, hi: mean };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| diff[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - confidence) / 2.0;
    let idx = |q: f64| ((q * resamples as f64).floor() as usize).min(resamples - 1);
    BootstrapCi {
        mean,
        lo: means[idx(tail)],
        hi: means[idx(1.0 - tail)],
    }
}

/// Per-user hit indicators at cutoff `k`.
pub fn hits(outcomes: &[UserOutcome], k: usize) -> Vec<f64> {
    outcomes.iter().map(|o| recall_at_k(&o.ranked, o.target, k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_vectors() {
        let r = [3, 1, 4, 5, 9, 2];
        assert_eq!(ndcg_at_k(&r, 3, 5), 1.0);
        assert_eq!(ndcg_at_k(&r, 4, 5), 0.5);
        assert_eq!(recall_at_k(&r, 9, 5), 1.0);
        assert_eq!(recall_at_k(&r, 2, 5), 0.0);
        assert_eq!(ndcg_at_k(&r, 7, 20), 0.0);
    }

    #[test]
    fn complexity_examples() {
        let a = complexity_account(128, 512, 20);
        assert_eq!((a.early_online_tokens, a.late_online_tokens, a.ratio), (10_368, 128, 81.0));
        let b = complexity_account(100, 100, 10);
        assert_eq!((b.early_online_tokens, b.late_online_tokens, b.ratio), (1_100, 100, 11.0));
        let c = complexity_account(40, 70, 0);
        assert_eq!((c.early_online_tokens, c.ratio), (40, 1.0));
    }

    #[test]
    fn head_split_ties_by_index() {
        let h = head_items(&[3; 11]);
        assert_eq!(h.iter().filter(|&&x| x).count(), 3);
        assert!(h[0] && h[1] && h[2] && !h[3]);
        let h = head_items(&[1, 9, 9, 0, 5]);
        assert_eq!(h, vec![false, true, false, false, false]);
    }

    #[test]
    fn report_groups_partition_users() {
        let outcomes = vec![
            UserOutcome { user: 0, target: 0, history_len: 2, ranked: vec![0, 1] },
            UserOutcome { user: 1, target: 1, history_len: 7, ranked: vec![0, 1] },
            UserOutcome { user: 2, target: 2, history_len: 30, ranked: vec![0, 1] },
        ];
        let r = aggregate(&outcomes, &[true, false, false], &DEFAULT_CUTOFFS, 4, "fp");
        assert_eq!(r.groups["head"].n_users + r.groups["tail"].n_users, 3);
        assert_eq!(r.metric("all", "recall", 5), Some(2.0 / 3.0));
        assert_eq!(r.metric("tail", "ndcg", 5), Some(1.0 / 3f64.log2() / 2.0));
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("metric,cutoff,group,value,n_users\n"));
    }

    #[test]
    fn bootstrap_brackets_a_clear_gap() {
        let a: Vec<f64> = (0..200).map(|i| (i % 2) as f64).collect();
        let b = vec![0.0; 200];
        let ci = paired_bootstrap(&a, &b, 1000, 0.95, 1);
        assert!((ci.mean - 0.5).abs() < 1e-12);
        assert!(ci.lo > 0.4 && ci.hi < 0.6);
    }
}
