//! Interface free energies of Edwards-Anderson spin glasses on finite boxes of
//! Z^d: exact Gibbs computations, disorder sampling, variance and martingale
//! diagnostics, and a reproducible experiment harness.

pub mod disorder;
pub mod error;
pub mod exactsolve;
pub mod fluctuation;
pub mod harness;
pub mod interface;
pub mod lattice;
pub mod stats;

pub use error::{Error, Result};
