//! Latent class integrated choice and latent variable models estimated by
//! maximum simulated likelihood.

pub mod choice;
pub mod data;
pub mod distributions;
pub mod error;
pub mod estimation;
pub mod measurement;
pub mod mixture;
pub mod params;
pub mod quasirandom;
pub mod report;
pub mod structural;
pub mod synth;

pub use error::{Error, Result};
