//! Deterministic simulator of data-parallel parameter-efficient fine-tuning.
//!
//! Implements LoRA, PiSSA and HD-PiSSA (orthogonal per-device adapters,
//! muted forward pass, direct weight update) on small synthetic models,
//! and measures the singular spectrum of the resulting weight updates.

pub mod adapters;
pub mod distsim;
pub mod error;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod rankanalysis;
pub mod rng;
pub mod tasks;

pub use adapters::{AdapterPair, ResidualWeight};
pub use distsim::{train, Method, TrainResult, Trainer, TrainerConfig};
pub use error::{Error, Result};
pub use linalg::{Matrix, Precision, Svd};
pub use model::{ForwardMode, Network};
pub use optim::{AdamWConfig, ScheduleKind};
pub use rankanalysis::RankSpectrum;
pub use tasks::{SyntheticTask, TaskKind};
