//! Adaptive in-context learning.
//!
//! Given a labeled training pool, a generative model and a sentence
//! embedding, this crate learns how many nearest-neighbor demonstrations to
//! show the model for each individual query, and evaluates that choice
//! against fixed-k prompting.

pub mod config;
pub mod dataset;
pub mod engine;
pub mod eval;
pub mod gateway;
pub mod icl;
pub mod index;
pub mod manifest;
pub mod oracle;
pub mod pipeline;
pub mod predictor;
pub mod prompt;
pub mod synth;

pub use dataset::{LabeledInstance, TaskConfig};
pub use engine::{PredictionRecord, Strategy};
pub use gateway::{Gateway, MockBackend, MockWorld};
pub use icl::IclContext;
pub use index::{EmbeddingIndex, EmbeddingVector, Neighborhood};
pub use predictor::{Heuristic, KPredictorModel, Variant};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
