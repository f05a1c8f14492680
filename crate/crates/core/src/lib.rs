//! Profiling-guided compression of vision classifiers: profile a model, ask an
//! LLM (or a rule fallback) for a pruning and quantization plan, apply it through
//! a channel dependency graph, evaluate, and iterate toward the best variant.

pub mod analysis;
pub mod artifacts;
pub mod baselines;
pub mod compression;
pub mod error;
pub mod evaluation;
pub mod iterative;
pub mod llm;
pub mod pipeline;
pub mod profiler;
pub mod zoo;

pub use error::{Error, Result};

pub type ModelHandle32 = zoo::ModelHandle<f32>;
pub type ModelHandle64 = zoo::ModelHandle<f64>;
