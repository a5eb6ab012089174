//! Viability kernels, critical sets and greedy constraint learning on grids.

pub mod dynamics;
pub mod error;
pub mod harness;
pub mod io;
pub mod lattice;
pub mod learner;
pub mod oracle;
pub mod policy;

pub use error::{Error, Result};
