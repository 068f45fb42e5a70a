//! Planted-block synthetic interaction data.
//!
//! Items are split into blocks. Every item carries the block noun and
//! category plus modifiers unique to the item. Users walk a Markov chain that
//! mostly stays inside the current block and otherwise moves to the next
//! block, so both the text and the co-occurrence structure reveal blocks.
//! With `text_noise > 0` a fraction of items describe themselves with another
//! block's noun and category, leaving co-occurrence as the only reliable cue.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{Attribute, ItemRecord, RawInteraction};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_items: usize,
    pub num_users: usize,
    pub num_blocks: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that the next item comes from the current block.
    pub p_stay: f64,
    /// Fraction of items whose text names a different block.
    pub text_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_items: 500,
            num_users: 1000,
            num_blocks: 50,
            min_len: 5,
            max_len: 12,
            p_stay: 0.8,
            text_noise: 0.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, c: &str| {
            Err(Error::Config {
                key: format!("synth.{key}"),
                constraint: c.into(),
            })
        };
        if self.num_blocks == 0 || self.num_blocks > self.num_items {
            return err("num_blocks", "must be in 1..=num_items");
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return err("min_len", "must satisfy 1 <= min_len <= max_len");
        }
        if !(0.0..=1.0).contains(&self.p_stay) {
            return err("p_stay", "must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.text_noise) {
            return err("text_noise", "must be in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub items: Vec<ItemRecord>,
    pub interactions: Vec<RawInteraction>,
    /// True block of every item.
    pub block_of: Vec<usize>,
    /// Items whose text names another block.
    pub noisy: Vec<bool>,
}

const NOUNS: &[&str] = &[
    "soap", "serum", "lotion", "shampoo", "mascara", "polish", "cream", "brush", "perfume", "balm", "gel", "mask",
    "scrub", "powder", "toner", "oil", "spray", "wax", "liner", "blush",
];

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ne", "ru", "sa", "ti", "vo", "ze", "po", "da", "fi", "gu", "he", "ja", "bo", "qi", "wu",
];

/// Distinct lowercase pseudo-words, never colliding with `NOUNS`.
fn pseudo_words(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let s = SYLLABLES.len();
    let mut pool: Vec<String> = (0..s * s * s)
        .map(|i| format!("{}{}{}", SYLLABLES[i / (s * s)], SYLLABLES[(i / s) % s], SYLLABLES[i % s]))
        .collect();
    pool.shuffle(rng);
    assert!(n <= pool.len(), "too many pseudo-words requested");
    pool.truncate(n);
    pool
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let nb = cfg.num_blocks;
    let extra = nb.saturating_sub(NOUNS.len());
    let words = pseudo_words(extra + nb + 2 * cfg.num_items + 40, &mut rng);
    let mut w = words.into_iter();
    let nouns: Vec<String> = NOUNS.iter().map(|s| s.to_string()).chain(w.by_ref().take(extra)).take(nb).collect();
    let categories: Vec<String> = w.by_ref().take(nb).collect();
    let fillers: Vec<String> = w.by_ref().take(40).collect();

    let block_of: Vec<usize> = (0..cfg.num_items).map(|i| i * nb / cfg.num_items).collect();
    let mut members = vec![Vec::new(); nb];
    for (i, &b) in block_of.iter().enumerate() {
        members[b].push(i);
    }
    let mut items = Vec::with_capacity(cfg.num_items);
    let mut noisy = Vec::with_capacity(cfg.num_items);
    for (i, &b) in block_of.iter().enumerate() {
        let is_noisy = nb > 1 && rng.gen::<f64>() < cfg.text_noise;
        let shown = if is_noisy { (b + rng.gen_range(1..nb)) % nb } else { b };
        noisy.push(is_noisy);
        let m1 = w.next().expect("enough words");
        let m2 = w.next().expect("enough words");
        let desc: Vec<&str> = (0..4).map(|_| fillers[rng.gen_range(0..fillers.len())].as_str()).collect();
        items.push(ItemRecord {
            item_key: format!("i{i:05}"),
            attributes: vec![
                Attribute {
                    key: "title".into(),
                    value: format!("{m1} {} {m2}", nouns[shown]),
                },
                Attribute {
                    key: "category".into(),
                    value: categories[shown].clone(),
                },
                Attribute {
                    key: "description".into(),
                    value: desc.join(" "),
                },
            ],
        });
    }

    let mut interactions = Vec::new();
    for u in 0..cfg.num_users {
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        let mut cur = rng.gen_range(0..cfg.num_items);
        for t in 0..len {
            interactions.push(RawInteraction {
                user_key: format!("u{u:05}"),
                item_key: items[cur].item_key.clone(),
                timestamp: 1_000_000 + (u * 100 + t) as i64,
            });
            let b = block_of[cur];
            let target_block = if rng.gen::<f64>() < cfg.p_stay { b } else { (b + 1) % nb };
            let pool = &members[target_block];
            cur = if pool.len() > 1 {
                loop {
                    let c = pool[rng.gen_range(0..pool.len())];
                    if c != cur {
                        break c;
                    }
                }
            } else {
                pool[0]
            };
        }
    }
    Ok(SynthData {
        items,
        interactions,
        block_of,
        noisy,
    })
}

impl SynthData {
    pub fn write_interactions<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.interactions {
            let v = json!({"user": r.user_key, "item": r.item_key, "ts": r.timestamp});
            writeln!(w, "{v}")?;
        }
        Ok(())
    }

    pub fn write_items<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for it in &self.items {
            let attrs: Vec<_> = it.attributes.iter().map(|a| json!({"key": a.key, "value": a.value})).collect();
            writeln!(w, "{}", json!({"item": it.item_key, "attrs": attrs}))?;
        }
        Ok(())
    }

    /// Build the corpus the native reader would produce from the written files.
    pub fn to_corpus(&self) -> Result<crate::corpus::Corpus> {
        let mut a = Vec::new();
        let mut b = Vec::new();
        self.write_interactions(&mut a).expect("in-memory write");
        self.write_items(&mut b).expect("in-memory write");
        let (c, _) = crate::corpus::ingest(&a[..], &b[..], crate::corpus::InputFormat::Native)?;
        Ok(c)
    }
}
