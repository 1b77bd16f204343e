use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;

use super::{HierPrior, HierarchicalState, PsiScatter, SigmaPrior};
use crate::als::{mode_system, ModeSystem, RowGram};
use crate::array::{FactorSet, MultiwayArray};
use crate::dist::{invgamma_sample, invwishart_from_scatter, mvn_sample, mvn_sample_canonical};
use crate::error::{Error, Result};
use crate::linalg::Spd;

#[derive(Debug, Clone)]
pub enum RowCov {
    Shared(Spd),
    PerRow(Vec<Spd>),
}

impl RowCov {
    pub fn row(&self, i: usize) -> &Spd {
        match self {
            RowCov::Shared(s) => s,
            RowCov::PerRow(v) => &v[i],
        }
    }
}

/// Matrix-normal full conditional of one factor: row `i` is
/// `MVN(mean[i, ..], rowcov.row(i))`, rows independent.
#[derive(Debug, Clone)]
pub struct FactorConditional {
    pub mean: DMatrix<f64>,
    pub rowcov: RowCov,
}

/// `Psi~ = (Q / sigma2 + Psi^{-1})^{-1}`, `M~ = (L / sigma2 + 1 mu^T Psi^{-1}) Psi~`.
/// Masked arrays get a separate `Psi~` per row.
pub fn factor_full_conditional(a: &MultiwayArray, state: &HierarchicalState, k: usize) -> Result<FactorConditional> {
    check_state(state)?;
    let sys = mode_system(a, &state.factors, k)?;
    conditional_from_system(&sys, state.sigma2, &state.mu[k], &state.psi[k])
}

fn check_state(state: &HierarchicalState) -> Result<()> {
    let (k, r) = (state.factors.order(), state.rank());
    if state.mu.len() != k || state.psi.len() != k {
        return Err(Error::Shape(format!(
            "{} mean vectors and {} covariances for {k} modes",
            state.mu.len(),
            state.psi.len()
        )));
    }
    if state.mu.iter().any(|m| m.len() != r) || state.psi.iter().any(|p| p.dim() != r) {
        return Err(Error::Shape(format!("hyperparameters do not match rank {r}")));
    }
    if !(state.sigma2 > 0.0 && state.sigma2.is_finite()) {
        return Err(Error::InvalidParameter(format!("sigma2 must be positive, got {}", state.sigma2)));
    }
    Ok(())
}

/// Row precisions and linear terms of the conditional in canonical form.
fn canonical_parts(
    sys: &ModeSystem,
    sigma2: f64,
    mu: &DVector<f64>,
    psi: &Spd,
) -> Result<(Vec<Spd>, DMatrix<f64>, bool)> {
    let psi_inv = psi.inverse();
    let prior_h = &psi_inv * mu;
    let mut h = &sys.l / sigma2;
    for mut row in h.row_iter_mut() {
        row += prior_h.transpose();
    }
    let precisions = match &sys.q {
        RowGram::Shared(q) => vec![Spd::new(q / sigma2 + &psi_inv)?],
        RowGram::PerRow(qs) => qs
            .iter()
            .map(|q| Spd::new(q / sigma2 + &psi_inv))
            .collect::<Result<Vec<_>>>()?,
    };
    let shared = matches!(sys.q, RowGram::Shared(_));
    Ok((precisions, h, shared))
}

pub(crate) fn conditional_from_system(
    sys: &ModeSystem,
    sigma2: f64,
    mu: &DVector<f64>,
    psi: &Spd,
) -> Result<FactorConditional> {
    let (precisions, h, shared) = canonical_parts(sys, sigma2, mu, psi)?;
    if shared {
        let prec = &precisions[0];
        let mean = prec.solve(&h.transpose()).transpose();
        return Ok(FactorConditional {
            mean,
            rowcov: RowCov::Shared(prec.inverse_spd()?),
        });
    }
    let mut mean = DMatrix::zeros(h.nrows(), h.ncols());
    let mut covs = Vec::with_capacity(h.nrows());
    for (i, prec) in precisions.iter().enumerate() {
        let row = prec.solve_vec(&h.row(i).transpose());
        mean.set_row(i, &row.transpose());
        covs.push(prec.inverse_spd()?);
    }
    Ok(FactorConditional {
        mean,
        rowcov: RowCov::PerRow(covs),
    })
}

/// One draw of a factor matrix from the normal full conditional given the
/// remaining factors, row mean `mu`, row covariance `psi` and noise `sigma2`.
pub(crate) fn draw_from_system<R: Rng + ?Sized>(
    rng: &mut R,
    sys: &ModeSystem,
    sigma2: f64,
    mu: &DVector<f64>,
    psi: &Spd,
) -> Result<DMatrix<f64>> {
    let (precisions, h, shared) = canonical_parts(sys, sigma2, mu, psi)?;
    let mut out = DMatrix::zeros(h.nrows(), h.ncols());
    for i in 0..h.nrows() {
        let prec = if shared { &precisions[0] } else { &precisions[i] };
        let row = mvn_sample_canonical(rng, prec, &h.row(i).transpose())?;
        out.set_row(i, &row.transpose());
    }
    Ok(out)
}

/// Draws `U^(k)` from its full conditional.
pub fn sample_factor<R: Rng + ?Sized>(
    rng: &mut R,
    a: &MultiwayArray,
    factors: &FactorSet,
    k: usize,
    mu: &DVector<f64>,
    psi: &Spd,
    sigma2: f64,
) -> Result<DMatrix<f64>> {
    let sys = mode_system(a, factors, k)?;
    if mu.len() != factors.rank() || psi.dim() != factors.rank() {
        return Err(Error::Shape(format!(
            "row prior of dimension {} / {} for rank {}",
            mu.len(),
            psi.dim(),
            factors.rank()
        )));
    }
    draw_from_system(rng, &sys, sigma2, mu, psi)
}

/// Draws `(mu_k, Psi_k)` given the rows of `U^(k)`: first `Psi_k` from its
/// inverse-Wishart conditional, then `mu_k ~ MVN((kappa0 mu0 + U^T 1) / (kappa0 + m),
/// Psi_k / (kappa0 + m))`.
pub fn sample_mode_hyper<R: Rng + ?Sized>(
    rng: &mut R,
    u: &DMatrix<f64>,
    prior: &HierPrior,
) -> Result<(DVector<f64>, Spd)> {
    let (m, r) = u.shape();
    if r != prior.rank() {
        return Err(Error::Shape(format!("factor of rank {r} with a rank {} prior", prior.rank())));
    }
    let mf = m as f64;
    let col_sum = u.row_sum().transpose();
    let prior_scatter = DMatrix::identity(r, r) * prior.tau0_sq;
    let scatter = match prior.psi_scatter {
        PsiScatter::Uncentered => u.transpose() * u + prior_scatter,
        PsiScatter::Centered => {
            let ubar = &col_sum / mf;
            let mut centered = u.clone();
            for mut row in centered.row_iter_mut() {
                row -= ubar.transpose();
            }
            let d = &ubar - &prior.mu0;
            let shrink = prior.kappa0 * mf / (prior.kappa0 + mf);
            centered.transpose() * &centered + prior_scatter + &d * d.transpose() * shrink
        }
    };
    let psi = invwishart_from_scatter(rng, &Spd::new(scatter)?, prior.nu_wishart + mf)?;
    let post_n = prior.kappa0 + mf;
    let mean = (&prior.mu0 * prior.kappa0 + col_sum) / post_n;
    let cov = Spd::new(psi.matrix() / post_n)?;
    let mu = mvn_sample(rng, &mean, &cov)?;
    Ok((mu, psi))
}

/// `sigma^2 ~ IG((nu0 + n) / 2, (nu0 sigma0^2 + RSS) / 2)` over the observed cells.
pub fn sample_sigma2<R: Rng + ?Sized>(
    rng: &mut R,
    a: &MultiwayArray,
    theta: &MultiwayArray,
    prior: &SigmaPrior,
) -> Result<f64> {
    let rss = a.sq_dist(theta)?;
    sigma2_from_rss(rng, rss, a.n_observed(), prior)
}

pub(crate) fn sigma2_from_rss<R: Rng + ?Sized>(rng: &mut R, rss: f64, n: usize, prior: &SigmaPrior) -> Result<f64> {
    let shape = (prior.nu0 + n as f64) / 2.0;
    let rate = (prior.nu0 * prior.sigma0_sq + rss) / 2.0;
    if !(rate > 0.0) {
        return Err(Error::InvalidParameter(
            "noise variance conditional is improper: zero residual and zero prior scale".into(),
        ));
    }
    invgamma_sample(rng, shape, rate)
}

/// `-2 log p(Y | Theta, sigma2)` for `n` Gaussian cells with residual sum of squares `rss`.
pub fn neg2_loglik(rss: f64, n: usize, sigma2: f64) -> f64 {
    n as f64 * (2.0 * std::f64::consts::PI * sigma2).ln() + rss / sigma2
}

fn mode_order<R: Rng + ?Sized>(rng: &mut R, order: usize) -> Vec<usize> {
    let mut modes: Vec<usize> = (0..order).collect();
    modes.shuffle(rng);
    modes
}

/// One sweep of the hierarchical sampler. Modes are visited in a fresh
/// random order; for each, `Psi_k`, `mu_k` and `U^(k)` are drawn in turn,
/// then `sigma^2`. Returns the composed array of the new state.
pub fn gibbs_sweep_hier<R: Rng + ?Sized>(
    rng: &mut R,
    a: &MultiwayArray,
    state: &mut HierarchicalState,
    prior: &HierPrior,
) -> Result<MultiwayArray> {
    check_state(state)?;
    for k in mode_order(rng, state.factors.order()) {
        let (mu, psi) = sample_mode_hyper(rng, state.factors.factor(k), prior)?;
        let u = sample_factor(rng, a, &state.factors, k, &mu, &psi, state.sigma2)?;
        state.factors.set_factor(k, u)?;
        state.mu[k] = mu;
        state.psi[k] = psi;
    }
    let theta = state.theta();
    state.sigma2 = sample_sigma2(rng, a, &theta, &prior.sigma)?;
    Ok(theta)
}

/// One sweep with independent `N(0, tau2)` priors on every factor entry.
pub fn gibbs_sweep_flat<R: Rng + ?Sized>(
    rng: &mut R,
    a: &MultiwayArray,
    state: &mut HierarchicalState,
    tau2: f64,
    sigma: &SigmaPrior,
) -> Result<MultiwayArray> {
    if !(tau2 > 0.0 && tau2.is_finite()) {
        return Err(Error::InvalidParameter(format!("tau2 must be positive, got {tau2}")));
    }
    let r = state.rank();
    for (mu, psi) in state.mu.iter_mut().zip(state.psi.iter_mut()) {
        *mu = DVector::zeros(r);
        *psi = Spd::scaled_identity(r, tau2);
    }
    check_state(state)?;
    for k in mode_order(rng, state.factors.order()) {
        let u = sample_factor(rng, a, &state.factors, k, &state.mu[k], &state.psi[k], state.sigma2)?;
        state.factors.set_factor(k, u)?;
    }
    let theta = state.theta();
    state.sigma2 = sample_sigma2(rng, a, &theta, sigma)?;
    Ok(theta)
}

/// Covariance between two cells of a three-or-more-way array induced by a
/// random first-mode row `u ~ MVN(mu, Psi)`: `rows_a` and `rows_b` hold the
/// other-mode factor rows of the two cells (same mode order), giving
/// `tr([(v_j v_l^T) o (w_k w_m^T) o ...] Psi) + sigma2 * same_cell`.
pub fn induced_covariance(
    rows_a: &[DVector<f64>],
    rows_b: &[DVector<f64>],
    psi: &Spd,
    sigma2: f64,
    same_cell: bool,
) -> Result<f64> {
    let r = psi.dim();
    if rows_a.len() != rows_b.len() || rows_a.iter().chain(rows_b).any(|v| v.len() != r) {
        return Err(Error::Shape("cell rows must pair up and match the covariance dimension".into()));
    }
    let mut g = DMatrix::from_element(r, r, 1.0);
    for (x, y) in rows_a.iter().zip(rows_b) {
        g.component_mul_assign(&(x * y.transpose()));
    }
    let tr = (g * psi.matrix()).trace();
    Ok(tr + if same_cell { sigma2 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::als::conditional_update;
    use crate::dist::{std_normal, RngStream};

    fn random_state(dims: &[usize], rank: usize, seed: u64) -> (MultiwayArray, HierarchicalState) {
        let mut rng = RngStream::new(seed);
        let f = FactorSet::from_fn(dims, rank, |_, _, _| std_normal(&mut rng)).unwrap();
        let a = MultiwayArray::from_fn(dims.to_vec(), |_| std_normal(&mut rng)).unwrap();
        let state = HierarchicalState::new(f, 1.0, 0.5).unwrap();
        (a, state)
    }

    #[test]
    fn prior_dominates_as_noise_grows() {
        let (a, mut s) = random_state(&[3, 4, 2], 2, 1);
        s.mu[0] = DVector::from_vec(vec![0.3, -1.2]);
        s.psi[0] = Spd::new(nalgebra::dmatrix![2.0, 0.4; 0.4, 1.0]).unwrap();
        s.sigma2 = 1e300;
        let c = factor_full_conditional(&a, &s, 0).unwrap();
        for i in 0..3 {
            assert!((c.mean.row(i).transpose() - &s.mu[0]).amax() < 1e-10);
        }
        assert!((c.rowcov.row(0).matrix() - s.psi[0].matrix()).amax() < 1e-10);
    }

    #[test]
    fn flat_prior_recovers_least_squares_update() {
        for seed in 0..10 {
            let (a, mut s) = random_state(&[4, 3, 5], 3, 10 + seed);
            let k = (seed % 3) as usize;
            s.psi[k] = Spd::scaled_identity(3, 1e12);
            let c = factor_full_conditional(&a, &s, k).unwrap();
            let ls = conditional_update(&a, &s.factors, k).unwrap();
            assert!((&c.mean - &ls).norm() <= 1e-6 * ls.norm(), "seed {seed}");
        }
    }

    #[test]
    fn masked_conditional_uses_row_grams() {
        let (a, mut s) = random_state(&[4, 3, 2], 2, 5);
        let a = a.with_mask([0, 5, 7]).unwrap();
        s.psi[0] = Spd::scaled_identity(2, 1e12);
        let c = factor_full_conditional(&a, &s, 0).unwrap();
        assert!(matches!(c.rowcov, RowCov::PerRow(_)));
        let ls = conditional_update(&a, &s.factors, 0).unwrap();
        assert!((&c.mean - &ls).norm() <= 1e-6 * ls.norm());
    }

    /// Rank one, (2,2,2): the conditional of each scalar `u_i` is checked
    /// against its density integrated on a grid.
    #[test]
    fn conditional_mean_matches_quadrature() {
        let (a, mut s) = random_state(&[2, 2, 2], 1, 3);
        s.mu[0] = DVector::from_element(1, 0.4);
        s.psi[0] = Spd::scaled_identity(1, 0.7);
        s.sigma2 = 0.8;
        let c = factor_full_conditional(&a, &s, 0).unwrap();
        let (v, w) = (s.factors.factor(1).clone(), s.factors.factor(2).clone());
        for i in 0..2 {
            let log_density = |u: f64| {
                let mut ll = -(u - 0.4).powi(2) / (2.0 * 0.7);
                for j in 0..2 {
                    for k in 0..2 {
                        let y = a.get(&[i, j, k]).unwrap();
                        ll -= (y - u * v[(j, 0)] * w[(k, 0)]).powi(2) / (2.0 * 0.8);
                    }
                }
                ll
            };
            let (lo, hi, n) = (-15.0, 15.0, 200_000);
            let step = (hi - lo) / n as f64;
            let peak = (0..=n).map(|t| log_density(lo + t as f64 * step)).fold(f64::MIN, f64::max);
            let (mut z, mut m1) = (0.0, 0.0);
            for t in 0..=n {
                let u = lo + t as f64 * step;
                let d = (log_density(u) - peak).exp();
                z += d;
                m1 += u * d;
            }
            assert!((m1 / z - c.mean[(i, 0)]).abs() < 1e-3);
        }
    }

    #[test]
    fn sigma2_conditional_mean() {
        let (a, s) = random_state(&[4, 3, 5], 2, 7);
        let theta = s.theta();
        let rss = a.sq_dist(&theta).unwrap();
        let prior = SigmaPrior {
            nu0: 0.0,
            sigma0_sq: 0.0,
        };
        let mut rng = RngStream::new(9);
        let n = 100_000;
        let mean = (0..n).map(|_| sample_sigma2(&mut rng, &a, &theta, &prior).unwrap()).sum::<f64>() / n as f64;
        let expect = rss / (a.n_observed() as f64 - 2.0);
        assert!((mean - expect).abs() < 0.02 * expect);
    }

    #[test]
    fn sigma2_is_small_when_data_fit_exactly() {
        let (_, s) = random_state(&[3, 3, 3], 1, 2);
        let theta = s.theta();
        let prior = SigmaPrior {
            nu0: 1.0,
            sigma0_sq: 1e-12,
        };
        let mut rng = RngStream::new(4);
        let mean = (0..1000).map(|_| sample_sigma2(&mut rng, &theta, &theta, &prior).unwrap()).sum::<f64>() / 1000.0;
        assert!(mean < 1e-10);
        let none = SigmaPrior {
            nu0: 0.0,
            sigma0_sq: 0.0,
        };
        assert!(sample_sigma2(&mut rng, &theta, &theta, &none).is_err());
    }

    #[test]
    fn sweeps_are_deterministic() {
        let (a, s0) = random_state(&[3, 4, 2], 2, 11);
        let prior = HierPrior::new(
            2,
            1.0,
            SigmaPrior {
                nu0: 1.0,
                sigma0_sq: 1.0,
            },
        );
        let run = || {
            let mut s = s0.clone();
            let mut rng = RngStream::new(77);
            for _ in 0..20 {
                gibbs_sweep_hier(&mut rng, &a, &mut s, &prior).unwrap();
            }
            for _ in 0..5 {
                gibbs_sweep_flat(&mut rng, &a, &mut s, 100.0, &prior.sigma).unwrap();
            }
            s
        };
        let (x, y) = (run(), run());
        assert_eq!(x, y);
        assert_eq!(x.sigma2.to_bits(), y.sigma2.to_bits());
    }

    #[test]
    fn induced_covariance_matches_simulation() {
        let mut rng = RngStream::new(21);
        let v = nalgebra::dmatrix![1.0, 0.5; 0.8, -0.4; 1.2, 0.9];
        let w = nalgebra::dmatrix![1.0, 0.7; 0.6, 1.1];
        let mu = DVector::from_vec(vec![0.5, -0.3]);
        let psi = Spd::new(nalgebra::dmatrix![1.5, 0.6; 0.6, 0.8]).unwrap();
        let sigma2: f64 = 0.25;
        let cells = [((0, 1), (2, 0)), ((1, 1), (1, 1))];
        for &((j, k), (l, m)) in &cells {
            let za = v.row(j).transpose().component_mul(&w.row(k).transpose());
            let zb = v.row(l).transpose().component_mul(&w.row(m).transpose());
            let same = (j, k) == (l, m);
            let n = 100_000;
            let (mut sa, mut sb, mut sab) = (0.0, 0.0, 0.0);
            for _ in 0..n {
                let u = mvn_sample(&mut rng, &mu, &psi).unwrap();
                let ea = std_normal(&mut rng) * sigma2.sqrt();
                let eb = if same { ea } else { std_normal(&mut rng) * sigma2.sqrt() };
                let ya = u.dot(&za) + ea;
                let yb = u.dot(&zb) + eb;
                sa += ya;
                sb += yb;
                sab += ya * yb;
            }
            let nf = n as f64;
            let emp = sab / nf - (sa / nf) * (sb / nf);
            let rows_a = [v.row(j).transpose(), w.row(k).transpose()];
            let rows_b = [v.row(l).transpose(), w.row(m).transpose()];
            let exact = induced_covariance(&rows_a, &rows_b, &psi, sigma2, same).unwrap();
            assert!((emp - exact).abs() < 0.05 * exact.abs(), "{emp} vs {exact}");
        }
    }
}
