//! Command-line pipeline around the core library: dataset generation,
//! DNN training, parameter transfer, fine-tuning, evaluation, and the
//! numerical verification suite, with JSON checkpoints and JSONL metrics.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataref;

pub use checkpoint::{Checkpoint, ModelKind};
pub use dataref::DataRef;
