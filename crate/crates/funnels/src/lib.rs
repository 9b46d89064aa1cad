//! Density estimation with dimension-reducing surjective flow layers.
//!
//! The library composes ordinary bijections (couplings, splines, LU-linear,
//! actnorm, permutations) with funnel layers: surjections that drop part of
//! the input while keeping the likelihood exact through a conditional
//! reconstruction density and a Jacobian term.

pub mod error;
pub mod tensor;
pub mod graph;
pub mod params;
pub mod nn;
pub mod bijections;
pub mod densities;
pub mod funnels;
pub mod model;
pub mod vae;
pub mod training;
pub mod data;
pub mod metrics;
pub mod cli;

pub use error::{FunnelError, Result};
pub use tensor::Tensor;
