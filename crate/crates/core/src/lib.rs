//! Label-free building damage inference on a causal hazard chain.
//!
//! Wind and flood intensities are lognormal latent nodes driven by prior
//! hazard estimates; building damage is a binary node activated by both
//! hazards; the InSAR damage proxy map (DPM) is a lognormal observation of
//! flood and damage. Posteriors and causal edge weights are fitted jointly by
//! stochastic variational EM over raster locations.

pub mod cli;
pub mod elbo;
pub mod error;
pub mod eval;
pub mod geodata;
pub mod inference;
pub mod model;
pub mod oracle;

pub use error::{Error, Result};
