//! Retrieval-augmented episodic meta-learning for few-shot text classification.
//!
//! A query sentence is scored against class prototypes (mean support-set
//! embeddings) by a cross-attention network that reads the query together
//! with passages fetched from a frozen dense index. One score vector is
//! produced per retrieved passage and the views are pooled.
//!
//! Modules, bottom up:
//! - [`corpus`]: documents, 100-word passages, vocabulary, fusion input layout
//! - [`encoder`]: trainable embedding encoder with mean pooling
//! - [`retriever`]: frozen random-projection embedder and exact inner-product index
//! - [`fusion`]: multi-head cross-attention fusion with MEAN/MAX view pooling
//! - [`meta`]: episodes, prototypes, loss, AdamW, training and evaluation
//! - [`cli`]: the `ragmeta` command line

mod binio;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod meta;
pub mod retriever;
pub mod synth;

pub use config::{ScorerKind, TrainConfig, ViewMode};
pub use error::{Error, Result};
pub use fusion::Pooling;
