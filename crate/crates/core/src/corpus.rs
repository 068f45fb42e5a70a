//! Interaction and metadata ingestion, k-core filtering and leave-one-out splits.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawInteraction {
    pub user_key: String,
    pub item_key: String,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub key: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_key: String,
    pub attributes: Vec<Attribute>,
}

impl ItemRecord {
    pub fn new(item_key: impl Into<String>, attrs: &[(&str, &str)]) -> Self {
        ItemRecord {
            item_key: item_key.into(),
            attributes: attrs
                .iter()
                .map(|(k, v)| Attribute {
                    key: k.to_string(),
                    value: v.to_string(),
                })
                .collect(),
        }
    }

    /// All attribute values joined by spaces; the text used for vocabulary and TF-IDF.
    pub fn text(&self) -> String {
        self.attributes
            .iter()
            .map(|a| a.value.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Users, items and chronological per-user sequences over dense indices.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Corpus {
    pub users: Vec<String>,
    pub items: Vec<ItemRecord>,
    pub sequences: Vec<Vec<usize>>,
}

/// Input record layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputFormat {
    /// `{"user", "item", "ts"}` and `{"item", "attrs": [{"key", "value"}]}`.
    #[default]
    Native,
    /// Amazon review dumps: `{"reviewerID", "asin", "unixReviewTime"}` and
    /// metadata `{"asin", "title", "brand", "categories", ...}`.
    Amazon,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub interactions_read: usize,
    pub dropped_unknown_item: usize,
    pub duplicate_item_records: usize,
}

impl Corpus {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn item_index(&self) -> HashMap<&str, usize> {
        self.items
            .iter()
            .enumerate()
            .map(|(i, r)| (r.item_key.as_str(), i))
            .collect()
    }

    /// Interaction count per item.
    pub fn item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.items.len()];
        for seq in &self.sequences {
            for &i in seq {
                counts[i] += 1;
            }
        }
        counts
    }

    /// Set of surviving `(user_key, item_key)` pairs with multiplicity.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .sequences
            .iter()
            .enumerate()
            .flat_map(|(u, seq)| {
                seq.iter()
                    .map(move |&i| (self.users[u].clone(), self.items[i].item_key.clone()))
            })
            .collect();
        out.sort();
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.sequences.len() != self.users.len() {
            return Err(Error::InvalidInput(format!(
                "{} sequences for {} users",
                self.sequences.len(),
                self.users.len()
            )));
        }
        for seq in &self.sequences {
            if let Some(&bad) = seq.iter().find(|&&i| i >= self.items.len()) {
                return Err(Error::InvalidInput(format!(
                    "sequence references item {bad} of {}",
                    self.items.len()
                )));
            }
        }
        Ok(())
    }

    pub fn to_snapshot_bytes(&self) -> Vec<u8> {
        #[derive(Serialize)]
        struct Snap<'a> {
            version: u32,
            corpus: &'a Corpus,
        }
        let mut bytes = serde_json::to_vec(&Snap {
            version: SNAPSHOT_VERSION,
            corpus: self,
        })
        .expect("corpus serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn from_snapshot_bytes(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Snap {
            version: u32,
            corpus: Corpus,
        }
        let snap: Snap = serde_json::from_slice(bytes)
            .map_err(|e| Error::Artifact(format!("corpus snapshot: {e}")))?;
        if snap.version != SNAPSHOT_VERSION {
            return Err(Error::Artifact(format!(
                "corpus snapshot version {} (expected {SNAPSHOT_VERSION})",
                snap.version
            )));
        }
        snap.corpus.validate()?;
        Ok(snap.corpus)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_snapshot_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_snapshot_bytes(&bytes)
    }
}

fn parse_line(line: &str, lineno: usize) -> Result<Option<Value>> {
    let trimmed = line.trim();
    if trimmed.is_empty() {
        return Ok(None);
    }
    serde_json::from_str(trimmed)
        .map(Some)
        .map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })
}

fn field_str(v: &Value, key: &str, lineno: usize) -> Result<String> {
    match v.get(key) {
        Some(Value::String(s)) if !s.is_empty() => Ok(s.clone()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        Some(_) => Err(Error::Parse {
            line: lineno,
            message: format!("field `{key}` must be a non-empty string"),
        }),
        None => Err(Error::Parse {
            line: lineno,
            message: format!("missing field `{key}`"),
        }),
    }
}

fn field_ts(v: &Value, key: &str, lineno: usize) -> Result<i64> {
    let ts = v
        .get(key)
        .and_then(|t| t.as_i64().or_else(|| t.as_str().and_then(|s| s.parse().ok())))
        .ok_or_else(|| Error::Parse {
            line: lineno,
            message: format!("missing or non-integer field `{key}`"),
        })?;
    if ts < 0 {
        return Err(Error::Parse {
            line: lineno,
            message: format!("negative timestamp {ts}"),
        });
    }
    Ok(ts)
}

pub fn parse_interaction(line: &str, lineno: usize, format: InputFormat) -> Result<Option<RawInteraction>> {
    let Some(v) = parse_line(line, lineno)? else {
        return Ok(None);
    };
    let (u, i, t) = match format {
        InputFormat::Native => ("user", "item", "ts"),
        InputFormat::Amazon => ("reviewerID", "asin", "unixReviewTime"),
    };
    Ok(Some(RawInteraction {
        user_key: field_str(&v, u, lineno)?,
        item_key: field_str(&v, i, lineno)?,
        timestamp: field_ts(&v, t, lineno)?,
    }))
}

fn amazon_value_text(v: &Value) -> Option<String> {
    match v {
        Value::Null => None,
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        Value::Array(xs) => {
            // categories are nested lists; flatten and drop repeats
            let mut seen = Vec::<String>::new();
            for x in xs {
                if let Some(s) = amazon_value_text(x) {
                    for part in s.split(", ") {
                        if !seen.iter().any(|p| p == part) {
                            seen.push(part.to_string());
                        }
                    }
                }
            }
            (!seen.is_empty()).then(|| seen.join(", "))
        }
        Value::Object(map) => {
            let parts: Vec<String> = map
                .iter()
                .filter_map(|(k, x)| amazon_value_text(x).map(|s| format!("{k}: {s}")))
                .collect();
            (!parts.is_empty()).then(|| parts.join(", "))
        }
    }
}

pub fn parse_item(line: &str, lineno: usize, format: InputFormat) -> Result<Option<ItemRecord>> {
    let Some(v) = parse_line(line, lineno)? else {
        return Ok(None);
    };
    match format {
        InputFormat::Native => {
            let item_key = field_str(&v, "item", lineno)?;
            let attrs = match v.get("attrs") {
                Some(Value::Array(xs)) => xs,
                None => {
                    return Ok(Some(ItemRecord {
                        item_key,
                        attributes: Vec::new(),
                    }))
                }
                Some(_) => {
                    return Err(Error::Parse {
                        line: lineno,
                        message: "field `attrs` must be an array".into(),
                    })
                }
            };
            let mut attributes: Vec<Attribute> = Vec::with_capacity(attrs.len());
            for a in attrs {
                let key = field_str(a, "key", lineno)?;
                let value = match a.get("value") {
                    Some(Value::String(s)) => s.clone(),
                    Some(other) => amazon_value_text(other).unwrap_or_default(),
                    None => String::new(),
                };
                if attributes.iter().any(|x| x.key == key) {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!("duplicate attribute key `{key}`"),
                    });
                }
                attributes.push(Attribute { key, value });
            }
            Ok(Some(ItemRecord {
                item_key,
                attributes,
            }))
        }
        InputFormat::Amazon => {
            let item_key = field_str(&v, "asin", lineno)?;
            let mut attributes = Vec::new();
            for (src, key) in [
                ("title", "title"),
                ("brand", "brand"),
                ("categories", "categories"),
                ("description", "description"),
                ("price", "price"),
                ("salesRank", "salesrank"),
            ] {
                if let Some(text) = v.get(src).and_then(amazon_value_text) {
                    attributes.push(Attribute {
                        key: key.to_string(),
                        value: text,
                    });
                }
            }
            Ok(Some(ItemRecord {
                item_key,
                attributes,
            }))
        }
    }
}

/// Build a corpus from line-delimited interaction and item records.
///
/// Items are indexed in item-stream order; users in order of first interaction.
/// Interactions naming an unknown item are dropped and counted.
pub fn ingest<I: BufRead, M: BufRead>(
    interactions: I,
    items: M,
    format: InputFormat,
) -> Result<(Corpus, IngestStats)> {
    let mut stats = IngestStats::default();
    let mut corpus = Corpus::default();
    let mut item_idx: HashMap<String, usize> = HashMap::new();

    for (n, line) in items.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        if let Some(rec) = parse_item(&line, n + 1, format)? {
            if item_idx.contains_key(&rec.item_key) {
                stats.duplicate_item_records += 1;
                continue;
            }
            item_idx.insert(rec.item_key.clone(), corpus.items.len());
            corpus.items.push(rec);
        }
    }

    let mut user_idx: HashMap<String, usize> = HashMap::new();
    let mut events: Vec<Vec<(i64, usize)>> = Vec::new();
    for (n, line) in interactions.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        let Some(raw) = parse_interaction(&line, n + 1, format)? else {
            continue;
        };
        stats.interactions_read += 1;
        let Some(&item) = item_idx.get(&raw.item_key) else {
            stats.dropped_unknown_item += 1;
            continue;
        };
        let u = *user_idx.entry(raw.user_key.clone()).or_insert_with(|| {
            corpus.users.push(raw.user_key.clone());
            events.push(Vec::new());
            corpus.users.len() - 1
        });
        events[u].push((raw.timestamp, item));
    }
    if stats.dropped_unknown_item > 0 {
        log::warn!(
            "dropped {} interactions referencing unknown items",
            stats.dropped_unknown_item
        );
    }

    corpus.sequences = events
        .into_iter()
        .map(|mut ev| {
            // stable: ties keep input order
            ev.sort_by_key(|&(ts, _)| ts);
            ev.into_iter().map(|(_, i)| i).collect()
        })
        .collect();
    Ok((corpus, stats))
}

pub fn ingest_files(
    interactions: &Path,
    items: &Path,
    format: InputFormat,
) -> Result<(Corpus, IngestStats)> {
    let open = |p: &Path| {
        std::fs::File::open(p)
            .map(std::io::BufReader::new)
            .map_err(|e| Error::io(p, e))
    };
    ingest(open(interactions)?, open(items)?, format)
}

/// Iteratively drop users and items with fewer than `k` interactions until
/// nothing changes, then re-densify indices preserving relative order.
pub fn apply_k_core(corpus: &Corpus, k: usize) -> Corpus {
    assert!(k >= 1, "k-core threshold must be at least 1");
    let mut seqs = corpus.sequences.clone();
    let mut user_alive = vec![true; corpus.users.len()];
    let mut item_alive = vec![true; corpus.items.len()];
    loop {
        let mut counts = vec![0usize; corpus.items.len()];
        for (u, seq) in seqs.iter().enumerate() {
            if user_alive[u] {
                for &i in seq {
                    counts[i] += 1;
                }
            }
        }
        let mut changed = false;
        for (i, alive) in item_alive.iter_mut().enumerate() {
            if *alive && counts[i] < k {
                *alive = false;
                changed = true;
            }
        }
        for (u, seq) in seqs.iter_mut().enumerate() {
            if !user_alive[u] {
                continue;
            }
            let before = seq.len();
            seq.retain(|&i| item_alive[i]);
            if seq.len() != before {
                changed = true;
            }
            if seq.len() < k {
                user_alive[u] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let mut remap = vec![usize::MAX; corpus.items.len()];
    let mut items = Vec::new();
    for (i, rec) in corpus.items.iter().enumerate() {
        if item_alive[i] {
            remap[i] = items.len();
            items.push(rec.clone());
        }
    }
    let mut users = Vec::new();
    let mut sequences = Vec::new();
    for (u, seq) in seqs.into_iter().enumerate() {
        if user_alive[u] {
            users.push(corpus.users[u].clone());
            sequences.push(seq.into_iter().map(|i| remap[i]).collect());
        }
    }
    Corpus {
        users,
        items,
        sequences,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitUser {
    pub user: usize,
    pub train: Vec<usize>,
    pub valid: usize,
    pub test: usize,
}

impl SplitUser {
    /// History visible when predicting the test item.
    pub fn test_history(&self) -> Vec<usize> {
        let mut h = self.train.clone();
        h.push(self.valid);
        h
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitCorpus {
    pub users: Vec<SplitUser>,
    /// Users with fewer than three interactions; not evaluated.
    pub excluded: Vec<usize>,
    /// Full sequences of excluded users, kept for collaborative training.
    pub excluded_sequences: Vec<Vec<usize>>,
    pub num_items: usize,
}

impl SplitCorpus {
    /// Sequences that collaborative training may read: train prefixes plus the
    /// whole sequences of users too short to split.
    pub fn cf_sequences(&self) -> Vec<&[usize]> {
        self.users
            .iter()
            .map(|u| u.train.as_slice())
            .chain(self.excluded_sequences.iter().map(Vec::as_slice))
            .collect()
    }

    /// Training-interaction count per item (train prefixes only).
    pub fn train_popularity(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_items];
        for u in &self.users {
            for &i in &u.train {
                counts[i] += 1;
            }
        }
        counts
    }
}

pub fn split_leave_one_out(corpus: &Corpus) -> SplitCorpus {
    let mut split = SplitCorpus {
        num_items: corpus.num_items(),
        ..Default::default()
    };
    for (u, seq) in corpus.sequences.iter().enumerate() {
        let n = seq.len();
        if n < 3 {
            split.excluded.push(u);
            split.excluded_sequences.push(seq.clone());
            continue;
        }
        split.users.push(SplitUser {
            user: u,
            train: seq[..n - 2].to_vec(),
            valid: seq[n - 2],
            test: seq[n - 1],
        });
    }
    split
}
