//! Models that embed the multilinear factor structure: hierarchical cell
//! means for cross-classified data and a symmetric ordered probit for
//! longitudinal relational data.

pub mod means;
pub mod probit;

pub use means::{means_fit, means_gibbs_sweep, CrossTabData, MeansConfig, MeansFit, MeansPrior, MeansState};
pub use probit::{
    probit_fit, probit_gibbs_sweep, symmetric_compose, OrdinalPanel, ProbitConfig, ProbitFit, ProbitPrior, ProbitState,
};
