pub mod data;
pub mod diffusion;
pub mod error;
pub mod fusionnet;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod reconstructor;
pub mod rng;

pub use error::{Error, Result};
