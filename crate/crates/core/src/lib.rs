//! Chunked long-context inference on a small decoder-only transformer.
//!
//! A long context is split into chunks that each fit the model's position
//! budget. Every chunk is encoded independently with the query appended,
//! its KV cache is pruned by cumulative attention score, and chunks are
//! ranked by how well they predict the query. The best chunks' caches are
//! concatenated for one global pass of the query and greedy decoding.
//!
//! ```
//! use chunkcomp::model::{Model, ModelConfig};
//! use chunkcomp::pipeline::{run_pipeline, PipelineSettings};
//!
//! let model = Model::from_seed(ModelConfig::default(), 7).unwrap();
//! let context: Vec<u32> = (0..300).map(|i| (i * 31 % 256) as u32).collect();
//! let query = [5, 9, 14, 2];
//! let mut settings = PipelineSettings::new(model.config(), 64);
//! settings.max_new = 4;
//! let out = run_pipeline(&model, &context, &query, &settings).unwrap();
//! assert!(out.retained_chunks.len() <= 3);
//! assert!(out.perplexity >= 1.0);
//! ```

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod chunker;
pub mod cli;
pub mod config;
pub mod cost;
pub mod error;
pub mod eviction;
pub mod global;
pub mod local;
pub mod model;
pub mod pipeline;
pub mod queue;
pub mod tensor;

pub use error::{Error, Result};
