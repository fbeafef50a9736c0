//! Progressive audio-visual prompting for multi-task incremental learning.
//!
//! Three trainable stages are injected into a pair of frozen token encoders:
//! a task-shared cross-modal gating adapter ([`tma`]), a per-task prompt
//! pool with instance-wise prompt generation ([`tmdg`]) and per-task,
//! per-modality deep prompts ([`tmi`]). Projection heads and a symmetric
//! contrastive objective ([`heads`]) tie the embeddings to class text
//! targets. [`engine`] runs task sequences and [`metrics`] turns the
//! resulting accuracy matrices into forgetting and transfer tables.

pub mod attention;
pub mod checkpoint;
pub mod encoder;
pub mod engine;
pub mod error;
pub mod gru;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod oracles;
pub mod report;
pub mod store;
pub mod stream;
pub mod synthetic;
pub mod tensor;
pub mod tma;
pub mod tmdg;
pub mod tmi;

pub use error::{Error, Result};
