//! Metrics, reports, the synthetic benchmark graph and the drivers that run
//! the stages end to end.

mod baseline_suite;
mod metrics;
mod pipeline;
mod synthetic;

pub use baseline_suite::*;
pub use metrics::*;
pub use pipeline::*;
pub use synthetic::*;
