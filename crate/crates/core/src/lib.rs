//! Multi-processor approximate message passing with lossy uplink
//! compression: state evolution, ECSQ coding, rate-distortion modeling,
//! rate allocation and a logical P-processor simulator.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocation;
pub mod cli;
pub mod denoiser;
pub mod error;
pub mod model;
pub mod mpamp;
pub mod normal;
pub mod quadrature;
pub mod quantizer;
pub mod ratedist;

pub use error::{Error, Result};
