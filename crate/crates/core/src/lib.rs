//! Domain adaptation of a small feedforward classifier with per-class mean
//! soft labels, alongside the baselines it is usually compared with:
//! fine-tuning, KL-divergence regularisation, knowledge distillation and
//! teacher/student learning on parallel data.
//!
//! Module map:
//!
//! - [`math`]: matrices, seeded random streams, tempered softmax
//! - [`network`]: forward/backward pass, RMSprop, checkpoints
//! - [`losses`]: hard, soft and combined criteria with analytic gradients
//! - [`soft_labels`]: the mean soft-label table and its look-up
//! - [`data`]: synthetic source/target domains with a tunable mismatch
//! - [`training`]: epoch loop, learning-rate halving, best-epoch selection
//! - [`harness`]: strategies, experiment grids, result tables, CLI

pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod math;
pub mod network;
pub mod soft_labels;
pub mod training;

pub use error::{Error, Result};
