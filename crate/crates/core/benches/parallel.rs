//! Sequential versus rayon execution of the data-parallel stages.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lexrec::config::IndexConfig;
use lexrec::decode::{EncodingCache, IdTrie};
use lexrec::eval::{run_cases, EvalCase, EvalSettings};
use lexrec::model::{FusionModel, ModelConfig};
use lexrec::pipeline::build_index;
use lexrec::prompt::PromptBundle;
use lexrec::synth::{generate, SynthConfig};
use lexrec::train::{batch_gradients, Example, TrainData};
use lexrec::vocab::{VocabConfig, EOS};
use lexrec::Exec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];
const VOCAB: usize = 200;

fn prompt(r: &mut ChaCha8Rng, len: usize) -> Vec<u32> {
    let mut p: Vec<u32> = (1..len).map(|_| r.gen_range(14..VOCAB as u32)).collect();
    p.push(EOS);
    p
}

fn model() -> FusionModel<f32> {
    FusionModel::new(ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        ffn_mult: 2,
        max_len: 48,
        max_items: 8,
        vocab_size: VOCAB,
        max_target_len: 5,
        dropout: 0.0,
        init_std: 0.02,
        seed: 1,
    })
    .unwrap()
}

fn catalog(n: usize) -> Vec<Vec<u32>> {
    (0..n)
        .map(|i| vec![14 + (i / 100) as u32, 30 + (i / 10 % 10) as u32, 50 + (i % 10) as u32])
        .collect()
}

fn bench_index(c: &mut Criterion) {
    let corpus = generate(&SynthConfig::default()).unwrap().to_corpus().unwrap();
    let cfg = IndexConfig {
        k: 8,
        c: 8,
        l: 3,
        ..IndexConfig::default()
    };
    let mut g = c.benchmark_group("index_500_items");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| build_index(&corpus, &VocabConfig::default(), &cfg, exec).unwrap())
        });
    }
    g.finish();
}

fn bench_cache(c: &mut Criterion) {
    let m = model();
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let prompts: Vec<Vec<u32>> = (0..256).map(|_| prompt(&mut r, 40)).collect();
    let mut g = c.benchmark_group("encoding_cache_256");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| EncodingCache::build(&m, &prompts, 32, exec).unwrap())
        });
    }
    g.finish();
}

fn bench_gradients(c: &mut Criterion) {
    let m = model();
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let ids = catalog(300);
    let item_prompts: Vec<Vec<u32>> = (0..300).map(|_| prompt(&mut r, 40)).collect();
    let examples = (0..64)
        .map(|_| {
            let mut target = ids[r.gen_range(0..300)].clone();
            target.push(EOS);
            Example {
                user_prompt: prompt(&mut r, 30),
                items: (0..6).map(|_| r.gen_range(0..300)).collect(),
                target,
            }
        })
        .collect();
    let data = TrainData { item_prompts, examples };
    let picks: Vec<usize> = (0..64).collect();
    let mut g = c.benchmark_group("gradients_batch_64");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_gradients(&m, &data, &picks, 8, None, exec).unwrap())
        });
    }
    g.finish();
}

fn bench_eval(c: &mut Criterion) {
    let m = model();
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let ids = catalog(300);
    let trie = IdTrie::build(&ids).unwrap();
    let item_prompts: Vec<Vec<u32>> = (0..300).map(|_| prompt(&mut r, 40)).collect();
    let cache = EncodingCache::build(&m, &item_prompts, 64, Exec::Parallel).unwrap();
    let cases: Vec<EvalCase> = (0..64)
        .map(|u| {
            let items: Vec<usize> = (0..6).map(|_| r.gen_range(0..300)).collect();
            EvalCase {
                user: u,
                history_len: items.len(),
                target: r.gen_range(0..300),
                bundle: PromptBundle {
                    user_prompt: prompt(&mut r, 30),
                    item_prompts: items.iter().map(|&i| item_prompts[i].clone()).collect(),
                    items,
                    user_truncated: false,
                    items_truncated: 0,
                },
            }
        })
        .collect();
    let settings = EvalSettings { beam_size: 20, top_n: 20 };
    let mut g = c.benchmark_group("beam_eval_64_users");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_cases(&m, &cases, Some(&cache), &trie, settings, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_index, bench_cache, bench_gradients, bench_eval);
criterion_main!(benches);
