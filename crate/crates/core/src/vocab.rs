//! Word-level vocabulary and tokenizer.
//!
//! Ids are laid out as: special tokens, digit tokens, structural punctuation,
//! reserved words (prompt template words and attribute keys), then corpus
//! words by descending frequency with lexicographic tie-break.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
/// Id of digit token "0"; digits occupy `DIGIT0..DIGIT0 + 10`.
pub const DIGIT0: u32 = 4;

const MARKERS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
const PUNCT: [char; 4] = [';', ':', ',', '?'];
const NUM_SPECIAL: usize = 4 + 10 + PUNCT.len();

/// Words used by the prompt templates.
pub const TEMPLATE_WORDS: [&str; 9] = [
    "what", "would", "the", "user", "purchase", "after", "item", "similar", "items",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabConfig {
    pub min_freq: usize,
    /// Cap on corpus words; 0 means unlimited.
    pub max_size: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            min_freq: 1,
            max_size: 0,
        }
    }
}

/// Lowercased maximal alphanumeric runs.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    /// Number of item texts containing each token.
    doc_freq: Vec<u32>,
    num_docs: usize,
    /// First id that is a word (reserved or corpus).
    first_word: u32,
    /// First id that is a corpus word.
    first_corpus: u32,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.doc_freq == other.doc_freq && self.num_docs == other.num_docs
    }
}

impl Vocabulary {
    pub fn build(corpus: &Corpus, config: &VocabConfig) -> Self {
        let mut reserved: BTreeSet<String> = TEMPLATE_WORDS.iter().map(|s| s.to_string()).collect();
        for item in &corpus.items {
            for a in &item.attributes {
                reserved.extend(words(&a.key));
            }
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for item in &corpus.items {
            for w in words(&item.text()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut corpus_words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= config.min_freq && !reserved.contains(w) && !is_single_digit(w))
            .collect();
        corpus_words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        if config.max_size > 0 {
            corpus_words.truncate(config.max_size);
        }

        let mut tokens: Vec<String> = MARKERS.iter().map(|s| s.to_string()).collect();
        tokens.extend((0..10).map(|d| d.to_string()));
        tokens.extend(PUNCT.iter().map(|c| c.to_string()));
        debug_assert_eq!(tokens.len(), NUM_SPECIAL);
        reserved.retain(|w| !is_single_digit(w));
        let first_word = tokens.len() as u32;
        tokens.extend(reserved);
        let first_corpus = tokens.len() as u32;
        tokens.extend(corpus_words.into_iter().map(|(w, _)| w));

        let mut vocab = Vocabulary {
            doc_freq: vec![0; tokens.len()],
            tokens,
            num_docs: corpus.items.len(),
            first_word,
            first_corpus,
            index: HashMap::new(),
        };
        vocab.rebuild_index();
        for item in &corpus.items {
            let mut seen = BTreeSet::new();
            for w in words(&item.text()) {
                if let Some(&id) = vocab.index.get(&w) {
                    if vocab.is_word(id) {
                        seen.insert(id);
                    }
                }
            }
            for id in seen {
                vocab.doc_freq[id as usize] += 1;
            }
        }
        vocab
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn num_docs(&self) -> usize {
        self.num_docs
    }

    pub fn doc_freq(&self, id: u32) -> u32 {
        self.doc_freq[id as usize]
    }

    /// Words eligible for TF-IDF and identifiers (not markers, digits or punctuation).
    pub fn is_word(&self, id: u32) -> bool {
        id >= self.first_word && (id as usize) < self.tokens.len()
    }

    /// Corpus-derived words only.
    pub fn corpus_words(&self) -> &[String] {
        &self.tokens[self.first_corpus as usize..]
    }

    pub fn word_ids(&self) -> std::ops::Range<u32> {
        self.first_word..self.tokens.len() as u32
    }

    pub fn digit(&self, d: u32) -> u32 {
        assert!(d < 10);
        DIGIT0 + d
    }

    /// Digit tokens spelling `n` in decimal.
    pub fn spell_number(&self, n: usize) -> Vec<u32> {
        n.to_string()
            .bytes()
            .map(|b| DIGIT0 + (b - b'0') as u32)
            .collect()
    }

    /// Tokenize prompt text. Structural punctuation becomes tokens, other
    /// punctuation separates words, unknown numbers are spelled digit by
    /// digit and other unknown words map to `<unk>`. No EOS is appended.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        let mut cur = String::new();
        let flush = |cur: &mut String, out: &mut Vec<u32>| {
            if cur.is_empty() {
                return;
            }
            match self.index.get(cur.as_str()) {
                Some(&id) => out.push(id),
                None if cur.bytes().all(|b| b.is_ascii_digit()) => {
                    out.extend(cur.bytes().map(|b| DIGIT0 + (b - b'0') as u32))
                }
                None => out.push(UNK),
            }
            cur.clear();
        };
        let mut rest = text;
        while let Some(ch) = rest.chars().next() {
            if ch == '<' {
                if let Some((id, m)) = MARKERS.iter().enumerate().find(|(_, m)| rest.starts_with(*m)) {
                    flush(&mut cur, &mut out);
                    out.push(id as u32);
                    rest = &rest[m.len()..];
                    continue;
                }
            }
            if ch.is_alphanumeric() {
                cur.extend(ch.to_lowercase());
            } else {
                flush(&mut cur, &mut out);
                if let Some(p) = PUNCT.iter().position(|&c| c == ch) {
                    out.push((4 + 10 + p) as u32);
                }
            }
            rest = &rest[ch.len_utf8()..];
        }
        flush(&mut cur, &mut out);
        out
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn is_single_digit(w: &str) -> bool {
    w.len() == 1 && w.as_bytes()[0].is_ascii_digit()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ItemRecord;

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

    #[test]
    fn tiny_corpus_tokens() {
        let c = corpus(&["red soap", "red lipstick"]);
        let v = Vocabulary::build(&c, &VocabConfig::default());
        assert_eq!(v.corpus_words(), ["red", "lipstick", "soap"]);
        let v2 = Vocabulary::build(&c, &VocabConfig { min_freq: 2, max_size: 0 });
        assert_eq!(v2.corpus_words(), ["red"]);
        assert_eq!(v.doc_freq(v.id("red").unwrap()), 2);
        assert_eq!(v.token(EOS), "</s>");
        assert!(v.id("title").is_some());
    }

    #[test]
    fn empty_text_gives_specials_only() {
        let c = corpus(&["", "  ..."]);
        let v = Vocabulary::build(&c, &VocabConfig::default());
        assert!(v.corpus_words().is_empty());
        assert_eq!(v.token(DIGIT0 + 7), "7");
    }

    #[test]
    fn encode_handles_punctuation_numbers_and_unknowns() {
        let c = corpus(&["dead sea salt 33"]);
        let v = Vocabulary::build(&c, &VocabConfig::default());
        let ids = v.encode("item: Dead-Sea; price: 19.0, zzz?</s>");
        let text = v.decode(&ids);
        assert_eq!(text, "item : dead sea ; <unk> : 1 9 0 , <unk> ? </s>");
        // "price" is not a key of this corpus, hence <unk>
        assert_eq!(v.encode(&text), ids);
        assert_eq!(v.encode("33"), vec![v.id("33").unwrap()]);
    }

    #[test]
    fn max_size_caps_corpus_words() {
        let c = corpus(&["a a a b b c"]);
        let v = Vocabulary::build(&c, &VocabConfig { min_freq: 1, max_size: 2 });
        assert_eq!(v.corpus_words(), ["a", "b"]);
    }
}
