pub mod alignment;
pub mod config;
pub mod critic;
pub mod error;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod pseudolabel;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
