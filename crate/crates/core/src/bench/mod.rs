//! Experiment harness: test functions, space-filling designs, accuracy
//! metrics and the replication runner.

mod experiment;
mod functions;
mod metrics;

pub use experiment::*;
pub use functions::*;
pub use metrics::*;
