//! Multi-exit neural networks.

mod error;
pub mod data;
pub mod diagkit;
pub mod exitnet;
pub mod inferkit;
pub mod numcore;
pub mod placekit;
pub mod tiersim;
pub mod trainkit;

pub use error::{Error, Result};

/// Crate version, recorded in experiment manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
