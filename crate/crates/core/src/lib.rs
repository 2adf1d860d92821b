//! Adversarial patches against ensembles of person detectors: compositing and
//! augmentation, detectors, losses, the optimizer, evaluation metrics and
//! empirical checks of the ensemble stability claims.

pub mod dataset;
pub mod detectors;
pub mod error;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod optimizer;
pub mod theory;

pub use error::{Error, Result};
