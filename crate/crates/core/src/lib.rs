//! Synthetic plate-based microscopy experiments and audits for nuisance
//! signal: batch, plate, well position, focus, lab source and cell density.

pub mod audit;
pub mod error;
pub mod experiment;
pub mod features;
pub mod image;
pub mod imaging;
pub mod learn;
pub mod project;
pub mod rng;
pub mod simulate;

pub use error::{Error, Result};
pub use simulate::hex_digest;
