//! Coarse user prompts, fine-grained item prompts and their tokenized bundles.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cf::SimilarList;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::ids::LexicalIdMap;
use crate::vocab::{Vocabulary, EOS};

pub const CF_KEY: &str = "similar items";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    /// Maximum tokens per prompt, EOS included.
    pub max_len: usize,
    /// Maximum history items.
    pub max_items: usize,
    /// Similar items verbalized per item prompt.
    pub num_similar: usize,
    pub use_cf: bool,
    pub use_item_prompts: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            max_len: 128,
            max_items: 20,
            num_similar: 10,
            use_cf: true,
            use_item_prompts: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CfAttribute {
    pub key: String,
    pub value: String,
}

pub fn verbalize_cf(similar: &SimilarList, id_map: &LexicalIdMap, vocab: &Vocabulary) -> CfAttribute {
    CfAttribute {
        key: CF_KEY.to_string(),
        value: similar
            .neighbors
            .iter()
            .map(|&(j, _)| id_map.display(j, vocab))
            .collect::<Vec<_>>()
            .join(", "),
    }
}

/// `What would the user purchase after {newest ; ... ; oldest}?` over the
/// `max_items` most recent items of a chronological history.
pub fn build_user_prompt(seq: &[usize], id_map: &LexicalIdMap, vocab: &Vocabulary, max_items: usize) -> Result<String> {
    if seq.is_empty() {
        return Err(Error::InvalidInput("empty user history".into()));
    }
    let ids: Vec<String> = recent_first(seq, max_items)
        .into_iter()
        .map(|i| id_map.display(i, vocab))
        .collect();
    Ok(format!("What would the user purchase after {}?", ids.join(" ; ")))
}

/// `item: {id}; similar items: {...}; {key}: {value}; ...`
pub fn build_item_prompt(item: usize, corpus: &Corpus, id_map: &LexicalIdMap, vocab: &Vocabulary, cf: Option<&CfAttribute>) -> String {
    let mut out = format!("item: {}", id_map.display(item, vocab));
    if let Some(cf) = cf {
        let _ = write!(out, "; {}: {}", cf.key, cf.value);
    }
    for a in &corpus.items[item].attributes {
        let _ = write!(out, "; {}: {}", a.key, a.value);
    }
    out
}

/// Newest-first view of the last `max_items` entries.
pub fn recent_first(seq: &[usize], max_items: usize) -> Vec<usize> {
    seq.iter().rev().take(max_items).copied().collect()
}

/// Tokenize and keep the head: at most `max_len - 1` tokens followed by EOS.
pub fn tokenize_prompt(text: &str, vocab: &Vocabulary, max_len: usize) -> (Vec<u32>, bool) {
    assert!(max_len >= 1);
    let mut ids = vocab.encode(text);
    let truncated = ids.len() + 1 > max_len;
    ids.truncate(max_len - 1);
    ids.push(EOS);
    (ids, truncated)
}

/// Tokenized item prompts for the whole catalogue; computed once and shared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemPrompts {
    pub prompts: Vec<Vec<u32>>,
    pub truncated: Vec<bool>,
}

impl ItemPrompts {
    pub fn build(corpus: &Corpus, id_map: &LexicalIdMap, vocab: &Vocabulary, similar: &[SimilarList], config: &PromptConfig) -> Self {
        let (prompts, truncated) = (0..corpus.num_items())
            .map(|i| {
                let cf = (config.use_cf && config.num_similar > 0).then(|| {
                    let mut s = similar[i].clone();
                    s.neighbors.truncate(config.num_similar);
                    verbalize_cf(&s, id_map, vocab)
                });
                let text = build_item_prompt(i, corpus, id_map, vocab, cf.as_ref());
                tokenize_prompt(&text, vocab, config.max_len)
            })
            .unzip();
        ItemPrompts { prompts, truncated }
    }
}

/// One user prompt followed by item prompts, newest item first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub user_prompt: Vec<u32>,
    /// Items behind `item_prompts`, newest first.
    pub items: Vec<usize>,
    pub item_prompts: Vec<Vec<u32>>,
    pub user_truncated: bool,
    pub items_truncated: usize,
}

impl PromptBundle {
    pub fn num_prompts(&self) -> usize {
        1 + self.item_prompts.len()
    }

    pub fn prompts(&self) -> impl Iterator<Item = &[u32]> {
        std::iter::once(self.user_prompt.as_slice()).chain(self.item_prompts.iter().map(Vec::as_slice))
    }

    pub fn total_tokens(&self) -> usize {
        self.prompts().map(<[u32]>::len).sum()
    }
}

pub fn build_prompt_bundle(seq: &[usize], id_map: &LexicalIdMap, vocab: &Vocabulary, items: &ItemPrompts, config: &PromptConfig) -> Result<PromptBundle> {
    let text = build_user_prompt(seq, id_map, vocab, config.max_items)?;
    let (user_prompt, user_truncated) = tokenize_prompt(&text, vocab, config.max_len);
    let recent = if config.use_item_prompts {
        recent_first(seq, config.max_items)
    } else {
        Vec::new()
    };
    let item_prompts: Vec<Vec<u32>> = recent.iter().map(|&i| items.prompts[i].clone()).collect();
    let items_truncated = recent.iter().filter(|&&i| items.truncated[i]).count();
    Ok(PromptBundle {
        user_prompt,
        items: recent,
        item_prompts,
        user_truncated,
        items_truncated,
    })
}

/// Human-readable rendering of a bundle in the prompt-example layout.
pub fn render_bundle(user_key: &str, bundle: &PromptBundle, vocab: &Vocabulary) -> String {
    let mut out = format!("=== user {user_key}\n[user prompt]\n{}\n", vocab.decode(&bundle.user_prompt));
    let n = bundle.item_prompts.len();
    for (j, p) in bundle.item_prompts.iter().enumerate() {
        let _ = writeln!(out, "[item prompt {}]\n{}", n - j, vocab.decode(p));
    }
    out
}
