//! Graph similarity toolkit: exact and approximate graph edit distance,
//! a small reverse-mode autodiff engine, and a GED-consistent neural
//! similarity model with training, evaluation metrics and synthetic data.

pub mod data;
pub mod eval;
pub mod ged;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
