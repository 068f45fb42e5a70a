//! Pipeline configuration: one TOML file with a section per stage.
//!
//! Every field has a default, so an empty file is a complete configuration.
//! Unknown keys are rejected. Prompt length `M`, history length `L`, the
//! vocabulary size and the decoder length are not model settings; they are
//! derived from the prompt section and the built index.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cf::CfConfig;
use crate::cluster::ClusterParams;
use crate::corpus::InputFormat;
use crate::embed::EmbeddingSource;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_CUTOFFS;
use crate::model::ModelConfig;
use crate::prompt::PromptConfig;
use crate::synth::SynthConfig;
use crate::train::TrainConfig;
use crate::vocab::VocabConfig;

fn bad(key: &str, constraint: &str) -> Error {
    Error::Config {
        key: key.to_string(),
        constraint: constraint.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Interaction file. When unset the pipeline reads the output of the
    /// `synth-data` stage.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interactions: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub items: Option<PathBuf>,
    pub format: InputFormat,
    pub k_core: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            interactions: None,
            items: None,
            format: InputFormat::Native,
            k_core: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndexConfig {
    /// Branching factor of the clustering tree.
    pub k: usize,
    /// Leaf capacity.
    pub c: usize,
    /// Identifier components per item.
    pub l: usize,
    pub seed: u64,
    pub embedding: EmbeddingSource,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            k: 128,
            c: 128,
            l: 7,
            seed: 7,
            embedding: EmbeddingSource::default(),
        }
    }
}

impl IndexConfig {
    pub fn cluster_params(&self) -> ClusterParams {
        ClusterParams {
            k: self.k,
            c: self.c,
            l: self.l,
            seed: self.seed,
        }
    }
}

/// Architecture settings that are free choices. The rest of
/// [`ModelConfig`] is derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            ffn_mult: m.ffn_mult,
            dropout: m.dropout,
            init_std: m.init_std,
            seed: m.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Items returned per request; at least the largest cutoff.
    pub top_n: usize,
    pub cutoffs: Vec<usize>,
    /// Item prompts encoded per offline batch when building the cache.
    pub cache_chunk: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 50,
            top_n: 20,
            cutoffs: DEFAULT_CUTOFFS.to_vec(),
            cache_chunk: 64,
        }
    }
}

/// Inputs of the `bench-complexity` account.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComplexityConfig {
    pub user_tokens: usize,
    pub item_tokens: usize,
    pub num_items: usize,
}

impl Default for ComplexityConfig {
    fn default() -> Self {
        ComplexityConfig {
            user_tokens: 128,
            item_tokens: 512,
            num_items: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub vocab: VocabConfig,
    pub cf: CfConfig,
    pub index: IndexConfig,
    pub prompt: PromptConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub complexity: ComplexityConfig,
    pub synth: SynthConfig,
}

/// Tuned `(l, k, c, similar items)` for the four benchmark datasets.
pub fn tuned_index(dataset: &str) -> Option<(usize, usize, usize, usize)> {
    match dataset.to_ascii_lowercase().as_str() {
        "beauty" => Some((7, 128, 128, 10)),
        "toys" => Some((5, 32, 32, 5)),
        "sports" => Some((7, 32, 32, 10)),
        "yelp" => Some((9, 32, 32, 5)),
        _ => None,
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| {
            let key = e.message().split('`').nth(1).unwrap_or("<document>").to_string();
            Error::Config {
                key,
                constraint: e.message().trim().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always serializable")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Override every seed at once.
    pub fn set_seed(&mut self, seed: u64) {
        self.cf.seed = seed;
        self.index.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.synth.seed = seed;
        if let EmbeddingSource::TfidfProjection { seed: s, .. } = &mut self.index.embedding {
            *s = seed;
        }
    }

    /// Full model configuration for a vocabulary of `vocab_size` tokens and
    /// identifiers of at most `longest_id` components.
    pub fn model_config(&self, vocab_size: usize, longest_id: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            ffn_mult: m.ffn_mult,
            max_len: self.prompt.max_len,
            max_items: self.prompt.max_items,
            vocab_size,
            max_target_len: longest_id + 1,
            dropout: m.dropout,
            init_std: m.init_std,
            seed: m.seed,
        }
    }

    /// Check every section; the first violation is reported.
    pub fn validate(&self) -> Result<()> {
        if self.data.k_core == 0 {
            return Err(bad("data.k_core", "must satisfy k_core ≥ 1"));
        }
        if self.data.interactions.is_some() != self.data.items.is_some() {
            return Err(bad("data.items", "interactions and items must be given together"));
        }
        let cf = &self.cf;
        if cf.dims == 0 {
            return Err(bad("cf.dims", "must satisfy dims ≥ 1"));
        }
        if cf.window == 0 {
            return Err(bad("cf.window", "must satisfy window ≥ 1"));
        }
        if cf.epochs == 0 {
            return Err(bad("cf.epochs", "must satisfy epochs ≥ 1"));
        }
        if !(cf.lr > 0.0 && cf.lr.is_finite()) {
            return Err(bad("cf.lr", "must be positive"));
        }
        let ix = &self.index;
        if ix.l == 0 {
            return Err(bad("index.l", "must satisfy l ≥ 1"));
        }
        if ix.k < 2 {
            return Err(bad("index.k", "must satisfy k ≥ 2"));
        }
        if ix.c == 0 {
            return Err(bad("index.c", "must satisfy c ≥ 1"));
        }
        match &ix.embedding {
            EmbeddingSource::TfidfProjection { dims, .. } if *dims == 0 => {
                return Err(bad("index.embedding.dims", "must satisfy dims ≥ 1"));
            }
            EmbeddingSource::ExternalFile { path } if path.as_os_str().is_empty() => {
                return Err(bad("index.embedding.path", "must not be empty"));
            }
            _ => {}
        }
        let p = &self.prompt;
        if p.max_len < 2 {
            return Err(bad("prompt.max_len", "must satisfy max_len ≥ 2"));
        }
        if p.max_items == 0 {
            return Err(bad("prompt.max_items", "must satisfy max_items ≥ 1"));
        }
        if p.max_len < ix.l + 2 {
            return Err(bad("prompt.max_len", "must satisfy max_len ≥ index.l + 2"));
        }
        self.model_config(1, ix.l).validate()?;
        self.train.validate()?;
        let d = &self.decode;
        if d.beam_size == 0 {
            return Err(bad("decode.beam_size", "must satisfy beam_size ≥ 1"));
        }
        if d.cutoffs.is_empty() || d.cutoffs.contains(&0) {
            return Err(bad("decode.cutoffs", "must be a non-empty list of positive integers"));
        }
        let max_cut = *d.cutoffs.iter().max().expect("non-empty");
        if d.top_n < max_cut {
            return Err(bad("decode.top_n", "must satisfy top_n ≥ max(cutoffs)"));
        }
        if d.cache_chunk == 0 {
            return Err(bad("decode.cache_chunk", "must satisfy cache_chunk ≥ 1"));
        }
        self.synth.validate()?;
        Ok(())
    }
}
