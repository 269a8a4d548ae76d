pub mod cli;
pub mod distributions;
pub mod error;
pub mod guidance;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use error::{CheckpointError, Error, Result};
pub use linalg::{DenseMatrix, Mat2, Vec2};
pub use nn::{AdamState, Architecture, Condition, DenoiserNet, EvalMode};
pub use rng::RngStream;
