pub mod attention;
pub mod checkpoint;
pub mod dataio;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod latent;
pub mod model;
pub mod nn;
pub mod temporal_factors;
pub mod train;

pub use error::{CoreError, Result};
