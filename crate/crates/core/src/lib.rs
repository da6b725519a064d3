//! Data-driven smoothing and forecasting for chaotic dynamical systems.
//!
//! The crate covers the whole pipeline: simulating Lorenz '63, Lorenz '96 and
//! Kuramoto–Sivashinsky ([`dynsys`]), checking the observability-rank
//! condition with Lie derivatives ([`observability`]), generating datasets
//! ([`datagen`]), a small reverse-mode engine ([`autodiff`]), function-space
//! transformer operators ([`neuralop`]) and training/evaluation ([`harness`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod datagen;
pub mod dynsys;
pub mod error;
pub mod formats;
pub mod harness;
pub mod neuralop;
pub mod observability;

pub use autodiff::{Tape, Tensor, Var};
pub use datagen::{Dataset, Split, Task, TaskSpec};
pub use dynsys::{SystemKind, SystemSpec, TrajectoryBundle};
pub use error::{Error, Result};
pub use harness::{Checkpoint, EvalReport, RolloutStats, TrainConfig};
pub use neuralop::{GridFunction, Model, ModelConfig};
pub use observability::{RankReport, Reduction};
