//! Reduced-rank multilinear (PARAFAC/CP) modelling of K-way arrays.
//!
//! * [`array`] - dense arrays, factor sets, composition and fibers
//! * [`als`] - alternating least squares with multi-start
//! * [`hbayes`] - hierarchical and flat-prior Gibbs samplers, DIC, ESS
//! * [`extensions`] - multiway means for cross-classified data and the
//!   symmetric ordered-probit network model

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod als;
pub mod array;
pub mod dist;
pub mod error;
pub mod extensions;
pub mod hbayes;
pub mod io;
pub mod linalg;

pub use array::{FactorSet, MultiwayArray};
pub use dist::RngStream;
pub use error::{Error, Result};
pub use linalg::Spd;
