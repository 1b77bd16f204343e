//! Hierarchical multilinear model for cell means of cross-classified
//! multivariate data:
//!
//! ```text
//! y_i | x_i = x  ~ MVN(mu_x, Sigma)
//! mu_x = beta_x + gamma_x,   gamma_x ~ MVN(0, Omega)
//! beta_x = V (u^(1)_{x_1} o ... o u^(K)_{x_K})
//! ```
//!
//! Cells are numbered in the array's linear order (first variable fastest),
//! so the `cells x p` matrix of means, read column-major, is the
//! `m_1 x ... x m_K x p` array `B`.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::als::{als_fit, rank_r_approx, AlsConfig};
use crate::array::{FactorSet, MultiwayArray};
use crate::dist::{invwishart_from_scatter, mvn_sample_canonical, RngStream};
use crate::error::{Error, Result};
use crate::hbayes::{balance_columns, sample_factor, sample_mode_hyper, HierPrior, SigmaPrior};
use crate::io::{csv_error, record_line};
use crate::linalg::{lower_inverse, Spd};

#[derive(Debug, Clone, PartialEq)]
pub struct CrossTabData {
    levels: Vec<usize>,
    /// 0-based level of each categorical variable, per observation.
    x: Vec<Vec<usize>>,
    /// `n x p`.
    y: DMatrix<f64>,
    y_names: Vec<String>,
}

impl CrossTabData {
    pub fn new(levels: Vec<usize>, x: Vec<Vec<usize>>, y: DMatrix<f64>) -> Result<Self> {
        if levels.is_empty() || levels.contains(&0) {
            return Err(Error::InvalidParameter(format!("level counts must be positive, got {levels:?}")));
        }
        if y.ncols() == 0 {
            return Err(Error::InvalidParameter("need at least one response column".into()));
        }
        if x.len() != y.nrows() {
            return Err(Error::Shape(format!("{} category rows for {} responses", x.len(), y.nrows())));
        }
        for (n, row) in x.iter().enumerate() {
            if row.len() != levels.len() || row.iter().zip(&levels).any(|(&v, &m)| v >= m) {
                return Err(Error::InvalidParameter(format!(
                    "observation {n}: levels {row:?} outside {levels:?}"
                )));
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("responses must be finite".into()));
        }
        let y_names = (1..=y.ncols()).map(|j| format!("y{j}")).collect();
        Ok(CrossTabData {
            levels,
            x,
            y,
            y_names,
        })
    }

    /// CSV with a header `x1,...,xK,y1,...,yp`: columns whose name starts
    /// with `x` are 1-based category levels, the rest are responses. Level
    /// counts are the largest level seen in each column.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers().map_err(csv_error)?.clone();
        let k = header.iter().take_while(|h| h.starts_with('x')).count();
        let p = header.len() - k;
        if k == 0 || p == 0 || header.iter().skip(k).any(|h| h.starts_with('x')) {
            return Err(Error::parse(
                1,
                "header must list category columns x1..xK first, then at least one response",
            ));
        }
        let mut x = Vec::new();
        let mut ys = Vec::new();
        let mut levels = vec![0usize; k];
        for rec in rdr.records() {
            let rec = rec.map_err(csv_error)?;
            let line = record_line(&rec);
            let mut row = Vec::with_capacity(k);
            for (c, field) in rec.iter().take(k).enumerate() {
                let v: usize = field
                    .parse()
                    .map_err(|_| Error::parse(line, format!("{}: expected a level >= 1, got {field:?}", &header[c])))?;
                if v == 0 {
                    return Err(Error::parse(line, format!("{}: levels are 1-based", &header[c])));
                }
                levels[c] = levels[c].max(v);
                row.push(v - 1);
            }
            for (c, field) in rec.iter().enumerate().skip(k) {
                let v: f64 = field
                    .parse()
                    .map_err(|_| Error::parse(line, format!("{}: not a number: {field:?}", &header[c])))?;
                if !v.is_finite() {
                    return Err(Error::parse(line, format!("{}: value must be finite", &header[c])));
                }
                ys.push(v);
            }
            x.push(row);
        }
        if x.is_empty() {
            return Err(Error::parse(1, "no observations"));
        }
        let y = DMatrix::from_row_slice(x.len(), p, &ys);
        let mut data = CrossTabData::new(levels, x, y)?;
        data.y_names = header.iter().skip(k).map(String::from).collect();
        Ok(data)
    }

    pub fn read_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn p(&self) -> usize {
        self.y.ncols()
    }

    pub fn n_cells(&self) -> usize {
        self.levels.iter().product()
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn y_names(&self) -> &[String] {
        &self.y_names
    }

    pub fn cell_of(&self, obs: usize) -> usize {
        cell_index(&self.levels, &self.x[obs])
    }

    /// Column means and standard deviations (`n - 1` denominator).
    pub fn column_moments(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.n() as f64;
        let mean = self.y.row_sum().transpose() / n;
        let sd = DVector::from_fn(self.p(), |j, _| {
            let ss: f64 = self.y.column(j).iter().map(|v| (v - mean[j]).powi(2)).sum();
            (ss / (n - 1.0).max(1.0)).sqrt()
        });
        (mean, sd)
    }

    /// Copy with every response column centered and scaled to unit variance.
    pub fn standardized(&self) -> Self {
        let (mean, sd) = self.column_moments();
        let mut out = self.clone();
        for j in 0..self.p() {
            let s = if sd[j] > 0.0 { sd[j] } else { 1.0 };
            for v in out.y.column_mut(j).iter_mut() {
                *v = (*v - mean[j]) / s;
            }
        }
        out
    }

    pub fn sample_covariance(&self) -> DMatrix<f64> {
        let (mean, _) = self.column_moments();
        let mut c = self.y.clone();
        for mut row in c.row_iter_mut() {
            row -= mean.transpose();
        }
        (c.transpose() * c) / (self.n() as f64 - 1.0).max(1.0)
    }

    pub fn summary(&self) -> CellSummary {
        let (cells, p) = (self.n_cells(), self.p());
        let mut counts = vec![0usize; cells];
        let mut sums = DMatrix::zeros(cells, p);
        for i in 0..self.n() {
            let c = self.cell_of(i);
            counts[c] += 1;
            let mut row = sums.row_mut(c);
            row += self.y.row(i);
        }
        let mut means = sums.clone();
        for (c, &n) in counts.iter().enumerate() {
            if n > 0 {
                means.row_mut(c).unscale_mut(n as f64);
            }
        }
        let mut within = DMatrix::zeros(p, p);
        for i in 0..self.n() {
            let d = (self.y.row(i) - means.row(self.cell_of(i))).transpose();
            within += &d * d.transpose();
        }
        CellSummary {
            levels: self.levels.clone(),
            counts,
            sums,
            means,
            within,
        }
    }
}

pub fn cell_index(levels: &[usize], x: &[usize]) -> usize {
    let mut lin = 0;
    let mut stride = 1;
    for (&v, &m) in x.iter().zip(levels) {
        lin += v * stride;
        stride *= m;
    }
    lin
}

/// Sufficient statistics per cell.
#[derive(Debug, Clone)]
pub struct CellSummary {
    pub levels: Vec<usize>,
    pub counts: Vec<usize>,
    /// `cells x p` sums of responses.
    pub sums: DMatrix<f64>,
    /// `cells x p` sample means; zero rows for empty cells.
    pub means: DMatrix<f64>,
    /// Pooled within-cell scatter.
    pub within: DMatrix<f64>,
}

impl CellSummary {
    pub fn n(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn p(&self) -> usize {
        self.sums.ncols()
    }
}

/// `Sigma ~ IW` with scatter `sigma_scatter` and `sigma_dof` degrees of
/// freedom (prior mean `scatter / (dof - p - 1)`), likewise `Omega`; the
/// factor matrices `U^(k)` get the hierarchical row prior of `factor`.
#[derive(Debug, Clone)]
pub struct MeansPrior {
    pub sigma_scatter: Spd,
    pub sigma_dof: f64,
    pub omega_scatter: Spd,
    pub omega_dof: f64,
    pub factor: HierPrior,
}

impl MeansPrior {
    /// Both covariance priors centered on the sample covariance with `p + 1`
    /// degrees of freedom.
    pub fn empirical(data: &CrossTabData, rank: usize, tau0_sq: f64) -> Result<Self> {
        let s = Spd::new(data.sample_covariance())?;
        let dof = data.p() as f64 + 1.0;
        let unused = SigmaPrior {
            nu0: 0.0,
            sigma0_sq: 0.0,
        };
        Ok(MeansPrior {
            sigma_scatter: s.clone(),
            sigma_dof: dof,
            omega_scatter: s,
            omega_dof: dof,
            factor: HierPrior::new(rank, tau0_sq, unused),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeansState {
    /// `cells x p`.
    pub mu: DMatrix<f64>,
    pub sigma: Spd,
    pub omega: Spd,
    /// `U^(1), ..., U^(K), V`.
    pub factors: FactorSet,
    pub mode_mu: Vec<DVector<f64>>,
    pub mode_psi: Vec<Spd>,
}

impl MeansState {
    pub fn order(&self) -> usize {
        self.factors.order() - 1
    }

    pub fn v(&self) -> &DMatrix<f64> {
        self.factors.factor(self.order())
    }

    /// `cells x p` matrix of `beta_x`.
    pub fn beta(&self) -> DMatrix<f64> {
        let b = self.factors.compose();
        let p = self.v().nrows();
        DMatrix::from_column_slice(b.len() / p, p, b.data())
    }

    /// Starting point: `mu_x` at the cell means (empty cells at the grand
    /// mean), both covariances at their prior scatter, factors from a
    /// least-squares fit to the starting means.
    pub fn initial(summary: &CellSummary, prior: &MeansPrior, seed: u64) -> Result<Self> {
        let rank = prior.factor.rank();
        let grand = summary.sums.row_sum() / summary.n().max(1) as f64;
        let mut mu = summary.means.clone();
        for (c, &n) in summary.counts.iter().enumerate() {
            if n == 0 {
                mu.set_row(c, &grand);
            }
        }
        let arr = means_array(&summary.levels, &mu)?;
        let cfg = AlsConfig {
            n_starts: 5,
            ..AlsConfig::new(rank).with_seed(seed)
        };
        let factors = balance_columns(&als_fit(&arr, &cfg)?.factors);
        let k = summary.levels.len();
        Ok(MeansState {
            mu,
            sigma: prior.sigma_scatter.clone(),
            omega: prior.omega_scatter.clone(),
            factors,
            mode_mu: vec![DVector::zeros(rank); k],
            mode_psi: vec![Spd::scaled_identity(rank, prior.factor.tau0_sq); k],
        })
    }
}

/// The `cells x p` matrix as an `m_1 x ... x m_K x p` array.
pub fn means_array(levels: &[usize], m: &DMatrix<f64>) -> Result<MultiwayArray> {
    let mut dims = levels.to_vec();
    dims.push(m.ncols());
    MultiwayArray::new(dims, m.as_slice().to_vec())
}

/// Step 1: `Sigma | y, mu`.
pub fn sample_sigma<R: Rng + ?Sized>(
    rng: &mut R,
    summary: &CellSummary,
    mu: &DMatrix<f64>,
    prior: &MeansPrior,
) -> Result<Spd> {
    let mut scatter = prior.sigma_scatter.matrix() + &summary.within;
    for (c, &n) in summary.counts.iter().enumerate() {
        if n > 0 {
            let d = (summary.means.row(c) - mu.row(c)).transpose();
            scatter += &d * d.transpose() * n as f64;
        }
    }
    invwishart_from_scatter(rng, &Spd::new(scatter)?, prior.sigma_dof + summary.n() as f64)
}

/// Step 2: each `mu_x ~ MVN` with precision `n_x Sigma^{-1} + Omega^{-1}` and
/// linear term `Sigma^{-1} sum_x y + Omega^{-1} beta_x`.
pub fn sample_cell_means<R: Rng + ?Sized>(
    rng: &mut R,
    summary: &CellSummary,
    beta: &DMatrix<f64>,
    sigma: &Spd,
    omega: &Spd,
) -> Result<DMatrix<f64>> {
    let si = sigma.inverse();
    let oi = omega.inverse();
    let mut out = DMatrix::zeros(beta.nrows(), beta.ncols());
    let mut by_count: Vec<Option<Spd>> = Vec::new();
    for (c, &n) in summary.counts.iter().enumerate() {
        if by_count.len() <= n {
            by_count.resize(n + 1, None);
        }
        if by_count[n].is_none() {
            by_count[n] = Some(Spd::new(&si * n as f64 + &oi)?);
        }
        let prec = by_count[n].as_ref().expect("just filled");
        let h = &si * summary.sums.row(c).transpose() + &oi * beta.row(c).transpose();
        let draw = mvn_sample_canonical(rng, prec, &h)?;
        out.set_row(c, &draw.transpose());
    }
    Ok(out)
}

/// Step 3: `Omega | mu, beta, V` with scatter `Omega_0 + V V^T + sum_x (mu_x -
/// beta_x)(mu_x - beta_x)^T` and `eta_0 + R + cells` degrees of freedom.
pub fn sample_omega<R: Rng + ?Sized>(
    rng: &mut R,
    mu: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    v: &DMatrix<f64>,
    prior: &MeansPrior,
) -> Result<Spd> {
    let d = mu - beta;
    let scatter = prior.omega_scatter.matrix() + v * v.transpose() + d.transpose() * &d;
    let dof = prior.omega_dof + v.ncols() as f64 + mu.nrows() as f64;
    invwishart_from_scatter(rng, &Spd::new(scatter)?, dof)
}

/// Steps 4 and 5: with `L L^T = Omega`, the array `L^{-1} mu_x` has unit noise
/// around `<U^(1), ..., U^(K), L^{-1} V>`, so each `U^(k)` (in random order)
/// gets the hierarchical update with `sigma^2 = 1`, then `L^{-1} V` a
/// standard-normal-prior update, and `V = L (L^{-1} V)`.
pub fn sample_mean_factors<R: Rng + ?Sized>(
    rng: &mut R,
    levels: &[usize],
    state: &mut MeansState,
    prior: &MeansPrior,
) -> Result<()> {
    let k_order = levels.len();
    let l = state.omega.chol_l();
    let l_inv = lower_inverse(&l);
    let mu_t = &state.mu * l_inv.transpose();
    let arr = means_array(levels, &mu_t)?;
    let mut tilde = state.factors.clone();
    tilde.set_factor(k_order, &l_inv * state.v())?;
    let mut modes: Vec<usize> = (0..k_order).collect();
    modes.shuffle(rng);
    for k in modes {
        let (m, psi) = sample_mode_hyper(rng, tilde.factor(k), &prior.factor)?;
        let u = sample_factor(rng, &arr, &tilde, k, &m, &psi, 1.0)?;
        tilde.set_factor(k, u)?;
        state.mode_mu[k] = m;
        state.mode_psi[k] = psi;
    }
    let rank = tilde.rank();
    let v_t = sample_factor(rng, &arr, &tilde, k_order, &DVector::zeros(rank), &Spd::identity(rank), 1.0)?;
    tilde.set_factor(k_order, &l * v_t)?;
    state.factors = tilde;
    Ok(())
}

pub fn means_gibbs_sweep<R: Rng + ?Sized>(
    rng: &mut R,
    summary: &CellSummary,
    state: &mut MeansState,
    prior: &MeansPrior,
) -> Result<()> {
    state.sigma = sample_sigma(rng, summary, &state.mu, prior)?;
    let beta = state.beta();
    state.mu = sample_cell_means(rng, summary, &beta, &state.sigma, &state.omega)?;
    state.omega = sample_omega(rng, &state.mu, &beta, state.v(), prior)?;
    sample_mean_factors(rng, &summary.levels, state, prior)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeansConfig {
    pub rank: usize,
    pub n_burn: usize,
    pub n_iter: usize,
    pub thin: usize,
    pub seed: u64,
    pub standardize: bool,
    pub tau0_sq: f64,
}

impl Default for MeansConfig {
    fn default() -> Self {
        MeansConfig {
            rank: 2,
            n_burn: 2000,
            n_iter: 20_000,
            thin: 10,
            seed: 0,
            standardize: true,
            tau0_sq: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageRow {
    pub cell: usize,
    pub n: usize,
    /// `||mu_hat_x - ybar_x||`.
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeansTraceRow {
    pub iteration: usize,
    pub sigma_trace: f64,
    pub omega_trace: f64,
    pub beta_mean: f64,
}

#[derive(Debug, Clone)]
pub struct MeansFit {
    pub levels: Vec<usize>,
    pub count: usize,
    /// Posterior means, `cells x p`, on the (possibly standardized) fitting scale.
    pub mu_hat: DMatrix<f64>,
    pub b_bar: MultiwayArray,
    pub b_hat: FactorSet,
    /// `||B_bar - B_hat||^2 / ||B_bar||^2`.
    pub b_fit_loss: f64,
    pub sigma_bar: DMatrix<f64>,
    pub omega_bar: DMatrix<f64>,
    pub cell_means: DMatrix<f64>,
    pub counts: Vec<usize>,
    pub shrinkage: Vec<ShrinkageRow>,
    pub trace: Vec<MeansTraceRow>,
    /// Column means and sds removed before fitting (zeros and ones when not standardized).
    pub center: DVector<f64>,
    pub scale: DVector<f64>,
    pub final_state: MeansState,
}

impl MeansFit {
    pub fn u_hat(&self, k: usize) -> &DMatrix<f64> {
        self.b_hat.factor(k)
    }

    pub fn v_hat(&self) -> &DMatrix<f64> {
        self.b_hat.factor(self.levels.len())
    }
}

pub fn means_fit(data: &CrossTabData, cfg: &MeansConfig) -> Result<MeansFit> {
    if cfg.rank == 0 || cfg.thin == 0 || cfg.n_iter / cfg.thin.max(1) == 0 {
        return Err(Error::InvalidParameter(format!(
            "need rank >= 1 and at least one saved draw (rank {}, n_iter {}, thin {})",
            cfg.rank, cfg.n_iter, cfg.thin
        )));
    }
    let (center, scale, work) = if cfg.standardize {
        let (m, s) = data.column_moments();
        let s = s.map(|v| if v > 0.0 { v } else { 1.0 });
        (m, s, data.standardized())
    } else {
        (DVector::zeros(data.p()), DVector::from_element(data.p(), 1.0), data.clone())
    };
    let prior = MeansPrior::empirical(&work, cfg.rank, cfg.tau0_sq)?;
    let summary = work.summary();
    let mut state = MeansState::initial(&summary, &prior, cfg.seed)?;
    let mut rng = RngStream::new(cfg.seed).substream(&[0x006d_6561_6e73]);

    let (cells, p) = (work.n_cells(), work.p());
    let mut mu_sum = DMatrix::zeros(cells, p);
    let mut b_sum = DMatrix::zeros(cells, p);
    let mut sigma_sum = DMatrix::zeros(p, p);
    let mut omega_sum = DMatrix::zeros(p, p);
    let mut trace = Vec::with_capacity(cfg.n_iter / cfg.thin);
    for t in 1..=cfg.n_burn + cfg.n_iter {
        means_gibbs_sweep(&mut rng, &summary, &mut state, &prior)?;
        if t <= cfg.n_burn || !(t - cfg.n_burn).is_multiple_of(cfg.thin) {
            continue;
        }
        let beta = state.beta();
        mu_sum += &state.mu;
        sigma_sum += state.sigma.matrix();
        omega_sum += state.omega.matrix();
        trace.push(MeansTraceRow {
            iteration: t - cfg.n_burn,
            sigma_trace: state.sigma.matrix().trace(),
            omega_trace: state.omega.matrix().trace(),
            beta_mean: beta.mean(),
        });
        b_sum += beta;
    }
    let c = trace.len() as f64;
    let mu_hat = mu_sum / c;
    let b_bar = means_array(&work.levels, &(b_sum / c))?;
    let b_hat = rank_r_approx(&b_bar, cfg.rank)?;
    let b_fit_loss = b_bar.sq_dist(&b_hat.compose())? / b_bar.sq_norm().max(f64::MIN_POSITIVE);
    let shrinkage = summary
        .counts
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0)
        .map(|(cell, &n)| ShrinkageRow {
            cell,
            n,
            distance: (mu_hat.row(cell) - summary.means.row(cell)).norm(),
        })
        .collect();
    Ok(MeansFit {
        levels: work.levels.clone(),
        count: trace.len(),
        mu_hat,
        b_bar,
        b_hat,
        b_fit_loss,
        sigma_bar: sigma_sum / c,
        omega_bar: omega_sum / c,
        cell_means: summary.means.clone(),
        counts: summary.counts.clone(),
        shrinkage,
        trace,
        center,
        scale,
        final_state: state,
    })
}
