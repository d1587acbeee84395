pub mod alignment;
pub mod baselines;
pub mod checkpoint;
pub mod classify;
pub mod error;
pub mod eval;
pub mod gnn;
pub mod graph;
pub mod lm;
pub mod optim;
pub mod params;
pub mod prompt;
pub mod sft;
pub mod tape;
pub mod text;

pub use error::{Error, Result};
