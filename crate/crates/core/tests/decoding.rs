mod common;

use common::*;
use lexrec::decode::{beam_search, constrained_step, infer, EncodingCache, IdTrie};
use lexrec::model::FusionModel;
use lexrec::prompt::PromptBundle;
use lexrec::vocab::EOS;
use lexrec::Exec;
use rand::Rng;

#[test]
fn trie_over_500_random_ids_walks_back_to_every_item() {
    let mut r = rng(5);
    let ids: Vec<Vec<u32>> = {
        let mut seen = std::collections::BTreeSet::new();
        let mut v = Vec::new();
        while v.len() < 500 {
            let len = r.gen_range(2..=5);
            let id: Vec<u32> = (0..len).map(|_| r.gen_range(4..40)).collect();
            if seen.insert(id.clone()) {
                v.push(id);
            }
        }
        v
    };
    let trie = IdTrie::build(&ids).unwrap();
    assert_eq!(trie.num_terminals(), 500);
    for (i, id) in ids.iter().enumerate() {
        let mut node = IdTrie::ROOT;
        for &t in id.iter().chain(std::iter::once(&EOS)) {
            node = trie.child(node, t).expect("path exists");
        }
        assert_eq!(trie.nodes[node].item, Some(i));
        assert!(trie.children(node).is_empty());
    }
    let mut listed: Vec<usize> = trie.enumerate().into_iter().map(|(p, i)| {
        assert_eq!(p, ids[i]);
        i
    }).collect();
    listed.sort_unstable();
    assert_eq!(listed, (0..500).collect::<Vec<_>>());
}

#[test]
fn constrained_step_equals_masked_softmax() {
    let mut r = rng(8);
    let logits: Vec<f64> = (0..200).map(|_| r.gen_range(-4.0..4.0)).collect();
    let allowed = [17u32, 42, 99, 150, 199];
    let ids: Vec<Vec<u32>> = allowed.iter().map(|&t| vec![t]).collect();
    let trie = IdTrie::build(&ids).unwrap();
    let got = constrained_step(&logits, &trie, IdTrie::ROOT);
    let exp: Vec<f64> = logits.iter().map(|x| x.exp()).collect();
    let z: f64 = allowed.iter().map(|&t| exp[t as usize]).sum();
    assert_eq!(got.len(), 5);
    for (&t, (tok, p)) in allowed.iter().zip(&got) {
        assert_eq!(*tok, t);
        assert!((p - exp[t as usize] / z).abs() < 1e-12);
    }
    let total: f64 = got.iter().map(|p| p.1).sum();
    assert!((total - 1.0).abs() < 1e-12);
}

/// Model, catalogue, its trie and the prompts of one request.
type Toy = (FusionModel<f64>, Vec<Vec<u32>>, IdTrie, Vec<Vec<u32>>);

fn toy(vocab: usize, n: usize, seed: u64) -> Toy {
    toy_with(vocab, n, 4, seed)
}

fn toy_with(vocab: usize, n: usize, alphabet: usize, seed: u64) -> Toy {
    let mut r = rng(seed);
    let model = FusionModel::<f64>::new(small_config(vocab, 16, 10, 4, 5)).unwrap();
    let catalog = random_catalog(&mut r, n, 3, vocab, alphabet);
    let trie = IdTrie::build(&catalog).unwrap();
    let prompts: Vec<Vec<u32>> = (0..3)
        .map(|_| {
            let len = r.gen_range(3..10);
            random_prompt(&mut r, len, vocab)
        })
        .collect();
    (model, catalog, trie, prompts)
}

#[test]
fn wide_beam_equals_exhaustive_ranking() {
    for seed in 0..3 {
        let (model, catalog, trie, prompts) = toy(40, 30, seed);
        let oracle = exhaustive_scores(&model, &prompts, &catalog, &trie);
        let want = oracle_ranking(&oracle);
        let mem = memory(&model, &prompts);
        let got = beam_search(&model, &mem, &trie, 30, 30).unwrap();
        assert!(!got.shortfall);
        let items: Vec<usize> = got.ranked.iter().map(|x| x.item).collect();
        assert_eq!(items, want, "seed {seed}");
        for x in &got.ranked {
            assert!((x.score - oracle[x.item]).abs() < 1e-9);
        }
    }
}

#[test]
fn probabilities_of_all_identifiers_sum_to_one() {
    let (model, catalog, trie, prompts) = toy_with(60, 100, 5, 4);
    let oracle = exhaustive_scores(&model, &prompts, &catalog, &trie);
    let total: f64 = oracle.iter().map(|s| s.exp()).sum();
    assert!((total - 1.0).abs() < 1e-6, "{total}");
}

#[test]
fn single_item_catalog_scores_zero() {
    let (model, _, _, prompts) = toy(40, 1, 2);
    let trie = IdTrie::build(&[vec![20, 21, 22]]).unwrap();
    let got = beam_search(&model, &memory(&model, &prompts), &trie, 5, 1).unwrap();
    assert_eq!(got.ranked.len(), 1);
    assert_eq!(got.ranked[0].item, 0);
    assert!(got.ranked[0].score.abs() < 1e-12);
    let short = beam_search(&model, &memory(&model, &prompts), &trie, 5, 3).unwrap();
    assert!(short.shortfall);
}

#[test]
fn narrow_beam_returns_valid_distinct_items() {
    let (model, catalog, trie, prompts) = toy(40, 30, 6);
    let got = beam_search(&model, &memory(&model, &prompts), &trie, 5, 5).unwrap();
    let mut items: Vec<usize> = got.ranked.iter().map(|x| x.item).collect();
    assert!(items.iter().all(|&i| i < catalog.len()));
    assert!(got.ranked.windows(2).all(|w| w[0].score >= w[1].score));
    assert!(got.ranked.iter().all(|x| x.score <= 0.0));
    items.sort_unstable();
    items.dedup();
    assert_eq!(items.len(), 5);
}

struct Fixture {
    model: FusionModel<f64>,
    trie: IdTrie,
    item_prompts: Vec<Vec<u32>>,
    bundles: Vec<PromptBundle>,
}

fn fixture(users: usize, max_items: usize) -> Fixture {
    let vocab = 50;
    let mut r = rng(21);
    let model = FusionModel::<f64>::new(small_config(vocab, 16, 12, max_items, 5)).unwrap();
    let catalog = random_catalog(&mut r, 40, 3, vocab, 4);
    let trie = IdTrie::build(&catalog).unwrap();
    let item_prompts: Vec<Vec<u32>> = (0..40)
        .map(|_| {
            let len = r.gen_range(3..12);
            random_prompt(&mut r, len, vocab)
        })
        .collect();
    let bundles = (0..users)
        .map(|_| {
            let len = r.gen_range(1..=max_items + 3);
            let seq: Vec<usize> = (0..len).map(|_| r.gen_range(0..40)).collect();
            let items: Vec<usize> = seq.iter().rev().take(max_items).copied().collect();
            let user_len = r.gen_range(4..12);
            PromptBundle {
                user_prompt: random_prompt(&mut r, user_len, vocab),
                item_prompts: items.iter().map(|&i| item_prompts[i].clone()).collect(),
                items,
                user_truncated: false,
                items_truncated: 0,
            }
        })
        .collect();
    Fixture {
        model,
        trie,
        item_prompts,
        bundles,
    }
}

#[test]
fn cached_inference_matches_online_inference() {
    let f = fixture(20, 6);
    let cache = EncodingCache::build(&f.model, &f.item_prompts, 7, Exec::Parallel).unwrap();
    for b in &f.bundles {
        let (online, s0) = infer(&f.model, b, None, &f.trie, 10, 10).unwrap();
        let (cached, s1) = infer(&f.model, b, Some(&cache), &f.trie, 10, 10).unwrap();
        assert_eq!(online.ranked.len(), cached.ranked.len());
        for (a, c) in online.ranked.iter().zip(&cached.ranked) {
            assert_eq!(a.item, c.item);
            assert!((a.score - c.score).abs() < 1e-9);
        }
        assert_eq!(s1.cache_misses, 0);
        assert_eq!(s1.online_tokens, b.user_prompt.len());
        assert_eq!(s0.online_tokens, b.total_tokens());
    }
}

#[test]
fn empty_cache_counts_one_miss_per_history_item() {
    let max_items = 6;
    let f = fixture(5, max_items);
    let empty = EncodingCache::<f64>::empty(f.model.fingerprint(), f.item_prompts.len());
    let mut misses = 0;
    let mut expected = 0;
    for b in &f.bundles {
        let (_, s) = infer(&f.model, b, Some(&empty), &f.trie, 5, 5).unwrap();
        misses += s.cache_misses;
        expected += b.items.len().min(max_items);
    }
    assert_eq!(misses, expected);
}

#[test]
fn cache_from_another_model_is_rejected() {
    let f = fixture(1, 4);
    let mut other_cfg = f.model.config.clone();
    other_cfg.seed += 1;
    let other = FusionModel::<f64>::new(other_cfg).unwrap();
    let cache = EncodingCache::build(&other, &f.item_prompts, 8, Exec::Sequential).unwrap();
    assert!(infer(&f.model, &f.bundles[0], Some(&cache), &f.trie, 5, 5).is_err());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.bin");
    cache.save(&path).unwrap();
    assert_eq!(EncodingCache::<f64>::load(&path).unwrap(), cache);
}
