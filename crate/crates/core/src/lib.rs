pub mod edf;
pub mod error;
pub mod layout;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod sampling;
pub mod synth;
pub mod visibility;

pub use error::{Error, Result};
