//! Generative sequential recommendation over hierarchical lexical item identifiers.
//!
//! The pipeline turns item metadata into word-level identifiers via recursive
//! k-means over text embeddings, verbalizes collaborative neighbours as an
//! item attribute, encodes one user prompt plus one prompt per history item
//! independently, fuses them in decoder cross-attention and decodes
//! identifiers with trie-constrained beam search.

pub mod autodiff;
pub mod cf;
pub mod cluster;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod embed;
pub mod error;
pub mod eval;
pub mod exec;
pub mod ids;
pub mod model;
pub mod pipeline;
pub mod prompt;
pub mod synth;
pub mod tfidf;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use exec::Exec;
