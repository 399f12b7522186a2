//! Goal-conditioned multi-agent trajectory forecasting.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gat;
pub mod eval;
pub mod gaussian;
pub mod graph;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
