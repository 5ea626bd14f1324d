//! Trajectory-user linking for sparse check-in data.
//!
//! The pipeline ingests check-in logs, cuts them into daily sub-trajectories,
//! builds long-term augmented trajectories from each user's history and trains
//! two peer encoders (an LSTM over the short input trajectory and a
//! temporal-aware self-attention encoder over the augmented one) under a
//! bidirectional distillation objective. At inference only the recurrent
//! encoder is used.

pub mod ablation;
pub mod augment;
pub mod cli;
pub mod config;
pub mod data;
pub mod distill;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod par;
pub mod recurrent;
pub mod synth;
pub mod train;
pub mod transformer;

pub use error::{Result, TulError};
