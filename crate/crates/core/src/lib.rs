//! Dual-branch multimodal fusion network: toy 2D/3D encoders, local-wise and
//! global-wise cross-modal attention, an ordinal three-class head, reverse-mode
//! autodiff over a flat tape, metrics, and a full train/eval/ablation harness.
//!
//! Everything is deterministic given a seed, f64 end to end, and dependency-light
//! on purpose: the numerics are the point of this crate.

pub mod adam;
pub mod augment;
pub mod config;
pub mod dataset;
pub mod elft;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::{Config, FusionConfig, ModelDims, SynthSpec, TrainConfig};
pub use dataset::{GradeLabel, ModalPair};
pub use error::{Error, Result};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use model::{forward, ModelParams, Mode};
pub use tape::Tape;
pub use tensor::Tensor;
