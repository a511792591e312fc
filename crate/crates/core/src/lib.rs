//! Patient-aware feature alignment for respiratory sound classification.

pub mod datamodel;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod ingest;
pub mod losses;
pub mod model;
pub mod trainer;

pub use error::{PafaError, Result};
