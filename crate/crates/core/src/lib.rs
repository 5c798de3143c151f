//! Kernel approximations of Fisher-Rao and Wasserstein-Fisher-Rao gradient flows
//! on one-dimensional grids and weighted particle clouds.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod corpus;
pub mod discrepancies;
pub mod energies;
pub mod error;
pub mod flows;
pub mod geodesics;
pub mod io;
pub mod kernels;
pub mod measures;
pub mod regression;

pub use error::{Error, Result};
pub use kernels::{KernelFamily, KernelSpec};
pub use measures::{Grid, GridFunction, GridMeasure, Measure, ParticleMeasure};
