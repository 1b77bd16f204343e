//! Gibbs samplers for the Bayesian multilinear normal model, with and
//! without the hierarchical prior on factor rows.

mod chain;
mod ess;
mod sampler;

pub use chain::{
    dic, dic_with, posterior_theta, prepare_chain, run_chain, run_chain_from, ChainConfig, ChainMode, ChainOutput,
    Dic, Sampler, TraceRow,
};
pub use ess::ess;
pub use sampler::{
    factor_full_conditional, gibbs_sweep_flat, gibbs_sweep_hier, induced_covariance, neg2_loglik, sample_factor,
    sample_mode_hyper, sample_sigma2, FactorConditional, RowCov,
};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::als::AlsResult;
use crate::array::{FactorSet, MultiwayArray};
use crate::error::{Error, Result};
use crate::linalg::Spd;

/// Inverse-gamma prior on the noise variance, `sigma^2 ~ IG(nu0/2, nu0*sigma0_sq/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaPrior {
    pub nu0: f64,
    pub sigma0_sq: f64,
}

impl SigmaPrior {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu0 >= 0.0 && self.sigma0_sq >= 0.0 && self.nu0.is_finite() && self.sigma0_sq.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sigma prior needs nu0 >= 0 and sigma0_sq >= 0, got {} and {}",
                self.nu0, self.sigma0_sq
            )));
        }
        Ok(())
    }
}

/// Scatter matrix used in the inverse-Wishart draw of `Psi_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PsiScatter {
    /// `U^T U + tau0^2 I`, uncentered.
    Uncentered,
    /// Normal-inverse-Wishart conjugate update: `tau0^2 I + sum (u - ubar)(u - ubar)^T
    /// + kappa0 m / (kappa0 + m) (ubar - mu0)(ubar - mu0)^T`, with `mu_k` integrated out.
    #[default]
    Centered,
}

/// Hyperparameters of the hierarchical prior shared by every mode:
/// `Psi_k ~ IW((tau0^2 I)^{-1}, nu_wishart)`, `mu_k ~ MVN(mu0, Psi_k / kappa0)`,
/// rows of `U^(k)` i.i.d. `MVN(mu_k, Psi_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HierPrior {
    pub mu0: DVector<f64>,
    pub kappa0: f64,
    pub nu_wishart: f64,
    pub tau0_sq: f64,
    pub sigma: SigmaPrior,
    pub psi_scatter: PsiScatter,
}

impl HierPrior {
    pub fn new(rank: usize, tau0_sq: f64, sigma: SigmaPrior) -> Self {
        HierPrior {
            mu0: DVector::zeros(rank),
            kappa0: 1.0,
            nu_wishart: rank as f64 + 1.0,
            tau0_sq,
            sigma,
            psi_scatter: PsiScatter::default(),
        }
    }

    /// Prior weakly centered on a least-squares fit: `tau0^2` is the pooled
    /// variance of the (column-balanced) factor entries, `nu0 = 1` and
    /// `sigma0^2` is the residual mean square.
    pub fn unit_information(a: &MultiwayArray, fit: &AlsResult) -> Result<Self> {
        let balanced = balance_columns(&fit.factors);
        let rank = balanced.rank();
        let tau0_sq = pooled_variance(&balanced).max(f64::EPSILON);
        let n = a.n_observed().max(1) as f64;
        let sigma = SigmaPrior {
            nu0: 1.0,
            sigma0_sq: fit.rss / n,
        };
        Ok(HierPrior::new(rank, tau0_sq, sigma))
    }

    pub fn rank(&self) -> usize {
        self.mu0.len()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rank() as f64;
        if !(self.tau0_sq > 0.0 && self.tau0_sq.is_finite()) {
            return Err(Error::InvalidParameter(format!("tau0_sq must be positive, got {}", self.tau0_sq)));
        }
        if !(self.kappa0 > 0.0) {
            return Err(Error::InvalidParameter(format!("kappa0 must be positive, got {}", self.kappa0)));
        }
        if !(self.nu_wishart >= r + 1.0) {
            return Err(Error::InvalidParameter(format!(
                "Wishart degrees of freedom {} below rank + 1 = {}",
                self.nu_wishart,
                r + 1.0
            )));
        }
        self.sigma.validate()
    }
}

/// Rescales columns so that column `r` has the same norm in every factor,
/// leaving the composed array unchanged.
pub fn balance_columns(f: &FactorSet) -> FactorSet {
    let mut out = f.clone();
    let k = f.order() as f64;
    for r in 0..f.rank() {
        let norms: Vec<f64> = f.factors().iter().map(|u| u.column(r).norm()).collect();
        if norms.contains(&0.0) {
            continue;
        }
        let geo = (norms.iter().map(|n| n.ln()).sum::<f64>() / k).exp();
        for (j, n) in norms.iter().enumerate() {
            out.scale_column(j, r, geo / n);
        }
    }
    out
}

fn pooled_variance(f: &FactorSet) -> f64 {
    let values: Vec<f64> = f.factors().iter().flat_map(|u| u.iter().copied()).collect();
    let n = values.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalState {
    pub factors: FactorSet,
    pub mu: Vec<DVector<f64>>,
    pub psi: Vec<Spd>,
    pub sigma2: f64,
}

impl HierarchicalState {
    /// State at `factors` with `mu_k = 0` and `Psi_k = tau0^2 I`.
    pub fn new(factors: FactorSet, tau0_sq: f64, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma2 must be positive, got {sigma2}")));
        }
        if !(tau0_sq > 0.0) {
            return Err(Error::InvalidParameter(format!("tau0_sq must be positive, got {tau0_sq}")));
        }
        let r = factors.rank();
        let k = factors.order();
        Ok(HierarchicalState {
            mu: vec![DVector::zeros(r); k],
            psi: vec![Spd::scaled_identity(r, tau0_sq); k],
            factors,
            sigma2,
        })
    }

    pub fn rank(&self) -> usize {
        self.factors.rank()
    }

    pub fn theta(&self) -> MultiwayArray {
        self.factors.compose()
    }
}
