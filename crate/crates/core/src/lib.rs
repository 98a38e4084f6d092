//! Multi-grained visual-linguistic reasoning for video question answering:
//! graph encoders for frames and semantic-role parses, a question-aware
//! integration module, answer heads, and a small reverse-mode engine to
//! train them.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod davl;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod linguistic;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod visual;

#[cfg(test)]
extern crate self as livlr_core;
#[cfg(test)]
mod testutil;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::{ModelConfig, QuestionSetting, RiVariant};
pub use data::{gen_synthetic, Dataset, Sample, SignalSource, SyntheticTaskSpec};
pub use error::{Error, Result};
pub use gradcheck::GradReport;
pub use model::{param_count, LiVLR, ParamCount};
pub use tensor::{ParamStore, Precision, Tape, Tensor, TensorError, Var};
pub use train::{evaluate, grad_check, sweep_nh, train, train_to_dir, EpochMetrics, Evaluation, TrainOutcome};
