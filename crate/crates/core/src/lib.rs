//! Software twin of a stereo dark-flash camera rig: spectral capture
//! simulation, automatic exposure, burst planning, stereo registration,
//! gradient-domain fusion and quality metrics.

pub mod burst;
pub mod cli;
pub mod error;
pub mod formats;
pub mod fusion;
pub mod image;
pub mod metering;
pub mod metrics;
pub mod pipeline;
pub mod registration;
pub mod sim;

pub use error::{Error, Result};
