//! Temporal credit-exposure networks from protocol TVL records.

pub mod cluster;
pub mod error;
pub mod graph;
pub mod ingest;
pub mod linkpred;
pub mod metrics;
pub mod netbuild;
pub mod pipeline;
pub mod sectors;
pub mod tokmap;

pub use error::{Error, Result};
