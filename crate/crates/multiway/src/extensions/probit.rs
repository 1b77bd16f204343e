//! Ordered probit model for symmetric longitudinal relational data:
//!
//! ```text
//! z_ijt = beta^T x_ijt + sum_r u_ir u_jr v_tr + eps_ijt,   eps_ijt = eps_jit ~ N(0, 1)
//! y_ijt = k  iff  c_k < z_ijt <= c_{k+1}
//! ```
//!
//! with categories numbered `0..C` internally, `c_0 = -inf`, `c_C = +inf`.
//! Each unordered pair `i < j` is stored once; the diagonal never enters.

use std::collections::HashSet;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::als::{als_fit, conditional_update, AlsConfig};
use crate::array::{FactorSet, MultiwayArray};
use crate::dist::{mvn_sample_canonical, norm_quantile, std_normal, trunc_norm_sample, RngStream};
use crate::error::{Error, Result};
use crate::hbayes::{ess, sample_mode_hyper, HierPrior, SigmaPrior};
use crate::io::{csv_error, record_line};
use crate::linalg::Spd;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PanelCell {
    pub i: usize,
    pub j: usize,
    pub t: usize,
    /// Internal category in `0..n_categories`.
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrdinalPanel {
    m: usize,
    n_times: usize,
    /// External label of internal category 0; labels are contiguous.
    min_label: i64,
    n_categories: usize,
    cells: Vec<PanelCell>,
    /// `cells x q`.
    x: DMatrix<f64>,
}

impl OrdinalPanel {
    /// `labels` are the external category labels of the cells, which must
    /// span a contiguous integer range (categories with no cells are allowed
    /// only strictly inside it).
    pub fn new(m: usize, n_times: usize, pairs: Vec<(usize, usize, usize)>, labels: &[i64], x: DMatrix<f64>) -> Result<Self> {
        if pairs.len() != labels.len() || pairs.len() != x.nrows() {
            return Err(Error::Shape(format!(
                "{} cells, {} labels and {} covariate rows",
                pairs.len(),
                labels.len(),
                x.nrows()
            )));
        }
        if pairs.is_empty() || m < 2 || n_times == 0 {
            return Err(Error::InvalidParameter("panel needs at least one pair and one time".into()));
        }
        let min_label = *labels.iter().min().expect("nonempty");
        let max_label = *labels.iter().max().expect("nonempty");
        let mut seen = HashSet::new();
        let mut cells = Vec::with_capacity(pairs.len());
        for (n, (&(i, j, t), &y)) in pairs.iter().zip(labels).enumerate() {
            if i >= j || j >= m || t >= n_times {
                return Err(Error::InvalidParameter(format!(
                    "cell {n}: ({i}, {j}, {t}) needs i < j < {m} and t < {n_times}"
                )));
            }
            if !seen.insert((i, j, t)) {
                return Err(Error::InvalidParameter(format!("cell {n}: duplicate pair ({i}, {j}, {t})")));
            }
            cells.push(PanelCell {
                i,
                j,
                t,
                y: (y - min_label) as usize,
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("covariates must be finite".into()));
        }
        Ok(OrdinalPanel {
            m,
            n_times,
            min_label,
            n_categories: (max_label - min_label + 1) as usize,
            cells,
            x,
        })
    }

    /// CSV with header `i,j,t,y,x1,...,xq`; `i`, `j`, `t` are 1-based, `y`
    /// is an integer label and every row must have `i < j`.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers().map_err(csv_error)?.clone();
        let lead: Vec<&str> = header.iter().take(4).collect();
        if lead != ["i", "j", "t", "y"] {
            return Err(Error::parse(1, "header must start with i,j,t,y"));
        }
        let q = header.len() - 4;
        let (mut pairs, mut labels, mut xs) = (Vec::new(), Vec::new(), Vec::new());
        let (mut m, mut n_times) = (0, 0);
        let mut seen = HashSet::new();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_error)?;
            let line = record_line(&rec);
            let index = |c: usize| -> Result<usize> {
                let f = &rec[c];
                match f.parse::<usize>() {
                    Ok(v) if v >= 1 => Ok(v - 1),
                    _ => Err(Error::parse(line, format!("{}: expected a positive integer, got {f:?}", &header[c]))),
                }
            };
            let (i, j, t) = (index(0)?, index(1)?, index(2)?);
            if i >= j {
                return Err(Error::parse(line, format!("pairs must have i < j, got i = {}, j = {}", i + 1, j + 1)));
            }
            if !seen.insert((i, j, t)) {
                return Err(Error::parse(line, "duplicate (i, j, t)"));
            }
            let y: i64 = rec[3]
                .parse()
                .map_err(|_| Error::parse(line, format!("y: expected an integer category, got {:?}", &rec[3])))?;
            for c in 4..rec.len() {
                let v: f64 = rec[c]
                    .parse()
                    .map_err(|_| Error::parse(line, format!("{}: not a number: {:?}", &header[c], &rec[c])))?;
                if !v.is_finite() {
                    return Err(Error::parse(line, format!("{}: value must be finite", &header[c])));
                }
                xs.push(v);
            }
            m = m.max(j + 1);
            n_times = n_times.max(t + 1);
            pairs.push((i, j, t));
            labels.push(y);
        }
        if pairs.is_empty() {
            return Err(Error::parse(1, "no observations"));
        }
        let x = DMatrix::from_row_slice(pairs.len(), q, &xs);
        OrdinalPanel::new(m, n_times, pairs, &labels, x)
    }

    pub fn read_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn q(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_categories(&self) -> usize {
        self.n_categories
    }

    pub fn cells(&self) -> &[PanelCell] {
        &self.cells
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn label(&self, category: usize) -> i64 {
        self.min_label + category as i64
    }

    /// Cell indices touching each country.
    fn by_country(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.m];
        for (n, c) in self.cells.iter().enumerate() {
            out[c.i].push(n);
            out[c.j].push(n);
        }
        out
    }

    fn by_time(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_times];
        for (n, c) in self.cells.iter().enumerate() {
            out[c.t].push(n);
        }
        out
    }
}

/// `U diag(v_t) U^T` as an `m x m` array with the diagonal masked.
pub fn symmetric_compose(u: &DMatrix<f64>, v_t: &DVector<f64>) -> Result<MultiwayArray> {
    if u.ncols() != v_t.len() {
        return Err(Error::Shape(format!("U has {} columns, v_t has {} entries", u.ncols(), v_t.len())));
    }
    let m = u.nrows();
    let g = u * DMatrix::from_diagonal(v_t) * u.transpose();
    let mut out = MultiwayArray::from_fn(vec![m, m], |idx| {
        let (i, j) = (idx[0].min(idx[1]), idx[0].max(idx[1]));
        g[(i, j)]
    })?;
    for i in 0..m {
        out.mask_cell(i + i * m)?;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ProbitPrior {
    /// Prior variance of each regression coefficient.
    pub beta_var: f64,
    /// Cutoffs are uniform on increasing sequences inside `(-bound, bound)`.
    pub cutoff_bound: f64,
    /// Hierarchical row prior shared by `U` and `V`.
    pub factor: HierPrior,
}

impl ProbitPrior {
    pub fn new(rank: usize, tau0_sq: f64) -> Self {
        let unused = SigmaPrior {
            nu0: 0.0,
            sigma0_sq: 0.0,
        };
        ProbitPrior {
            beta_var: 100.0,
            cutoff_bound: 10.0,
            factor: HierPrior::new(rank, tau0_sq, unused),
        }
    }

    pub fn rank(&self) -> usize {
        self.factor.rank()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbitState {
    /// Latent value per stored pair; `z_jit = z_ijt`.
    pub z: Vec<f64>,
    pub beta: DVector<f64>,
    /// `c_1 < ... < c_{C-1}`.
    pub cutoffs: Vec<f64>,
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub mu_u: DVector<f64>,
    pub psi_u: Option<Spd>,
    pub mu_v: DVector<f64>,
    pub psi_v: Option<Spd>,
}

impl ProbitState {
    /// Cutoffs at normal quantiles of the smoothed cumulative category
    /// frequencies, `beta = 0`, small random factors and `z` drawn inside
    /// each cell's interval.
    pub fn initial(panel: &OrdinalPanel, prior: &ProbitPrior, rng: &mut RngStream) -> Result<Self> {
        let c = panel.n_categories();
        let n = panel.cells().len() as f64;
        let mut counts = vec![0usize; c];
        for cell in panel.cells() {
            counts[cell.y] += 1;
        }
        let mut below = 0usize;
        let inner = prior.cutoff_bound * 0.9;
        let cutoffs: Vec<f64> = (1..c)
            .map(|k| {
                below += counts[k - 1];
                norm_quantile((below as f64 + k as f64) / (n + c as f64)).clamp(-inner, inner)
            })
            .collect();
        let r = prior.rank();
        let u = DMatrix::from_fn(panel.m(), r, |_, _| 0.5 * std_normal(rng));
        let v = DMatrix::from_fn(panel.n_times(), r, |_, _| 0.5 * std_normal(rng));
        let mut state = ProbitState {
            z: vec![0.0; panel.cells().len()],
            beta: DVector::zeros(panel.q()),
            cutoffs,
            u,
            v,
            mu_u: DVector::zeros(r),
            psi_u: None,
            mu_v: DVector::zeros(r),
            psi_v: None,
        };
        if !state.cutoffs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidParameter("initial cutoffs are not increasing".into()));
        }
        sample_latent(rng, panel, &mut state)?;
        Ok(state)
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    /// Interval `(c_y, c_{y+1})` of category `y`.
    pub fn interval(&self, y: usize) -> (f64, f64) {
        let lo = if y == 0 { f64::NEG_INFINITY } else { self.cutoffs[y - 1] };
        let hi = self.cutoffs.get(y).copied().unwrap_or(f64::INFINITY);
        (lo, hi)
    }

    /// `max { k : z > c_k }`.
    pub fn category_of(&self, z: f64) -> usize {
        self.cutoffs.iter().take_while(|&&c| z > c).count()
    }

    pub fn factor_part(&self, cell: &PanelCell) -> f64 {
        (0..self.rank())
            .map(|r| self.u[(cell.i, r)] * self.u[(cell.j, r)] * self.v[(cell.t, r)])
            .sum()
    }

    /// `Z` as an `m x m x T` array: symmetric, diagonal and unobserved pairs masked.
    pub fn latent_array(&self, panel: &OrdinalPanel) -> Result<MultiwayArray> {
        let (m, tt) = (panel.m(), panel.n_times());
        let mut data = vec![0.0; m * m * tt];
        let mut observed = vec![false; m * m * tt];
        for (cell, &z) in panel.cells().iter().zip(&self.z) {
            for (a, b) in [(cell.i, cell.j), (cell.j, cell.i)] {
                let lin = a + m * (b + m * cell.t);
                data[lin] = z;
                observed[lin] = true;
            }
        }
        let missing: Vec<usize> = (0..data.len()).filter(|&l| !observed[l]).collect();
        MultiwayArray::new(vec![m, m, tt], data)?.with_mask(missing)
    }

    /// `<U, U, V>` over every `(i, j, t)`, diagonal included.
    pub fn theta(&self, panel: &OrdinalPanel) -> Result<MultiwayArray> {
        if self.rank() == 0 {
            return MultiwayArray::zeros(vec![panel.m(), panel.m(), panel.n_times()]);
        }
        Ok(FactorSet::new(vec![self.u.clone(), self.u.clone(), self.v.clone()])?.compose())
    }
}

/// Step (a): every `z` from its normal distribution truncated to its category interval.
pub fn sample_latent<R: Rng + ?Sized>(rng: &mut R, panel: &OrdinalPanel, state: &mut ProbitState) -> Result<()> {
    for (n, cell) in panel.cells().iter().enumerate() {
        let mean = panel.x().row(n).dot(&state.beta.transpose()) + state.factor_part(cell);
        let (lo, hi) = state.interval(cell.y);
        state.z[n] = trunc_norm_sample(rng, mean, lo, hi)?;
    }
    Ok(())
}

/// Step (b): normal regression of `z - <u_i, u_j, v_t>` on `x`.
pub fn sample_beta<R: Rng + ?Sized>(rng: &mut R, panel: &OrdinalPanel, state: &mut ProbitState, prior: &ProbitPrior) -> Result<()> {
    let q = panel.q();
    if q == 0 {
        return Ok(());
    }
    let x = panel.x();
    let resid = DVector::from_iterator(
        state.z.len(),
        panel.cells().iter().zip(&state.z).map(|(c, z)| z - state.factor_part(c)),
    );
    let prec = Spd::new(x.transpose() * x + DMatrix::identity(q, q) / prior.beta_var)?;
    state.beta = mvn_sample_canonical(rng, &prec, &(x.transpose() * resid))?;
    Ok(())
}

/// Step (c): each cutoff uniform between the largest `z` below it and the
/// smallest `z` above it, within its neighbours and the prior range.
pub fn sample_cutoffs<R: Rng + ?Sized>(rng: &mut R, panel: &OrdinalPanel, state: &mut ProbitState, prior: &ProbitPrior) -> Result<()> {
    let c = panel.n_categories();
    let mut max_z = vec![f64::NEG_INFINITY; c];
    let mut min_z = vec![f64::INFINITY; c];
    for (cell, &z) in panel.cells().iter().zip(&state.z) {
        max_z[cell.y] = max_z[cell.y].max(z);
        min_z[cell.y] = min_z[cell.y].min(z);
    }
    let b = prior.cutoff_bound;
    for k in 1..c {
        let below = if k >= 2 { state.cutoffs[k - 2] } else { -b };
        let above = state.cutoffs.get(k).copied().unwrap_or(b);
        let lo = below.max(max_z[k - 1]);
        let hi = above.min(min_z[k]);
        if !(lo < hi) {
            return Err(Error::EmptyInterval { lo, hi });
        }
        state.cutoffs[k - 1] = lo + (hi - lo) * rng.random::<f64>();
    }
    Ok(())
}

/// Steps (d) and (e): hierarchical hyperparameters, then each `u_i` given the
/// other rows (design rows `u_j o v_t`), then each `v_t` (design `u_i o u_j`).
pub fn sample_probit_factors<R: Rng + ?Sized>(
    rng: &mut R,
    panel: &OrdinalPanel,
    state: &mut ProbitState,
    prior: &ProbitPrior,
) -> Result<()> {
    let r = state.rank();
    if r == 0 {
        return Ok(());
    }
    let resid: Vec<f64> = (0..state.z.len())
        .map(|n| state.z[n] - panel.x().row(n).dot(&state.beta.transpose()))
        .collect();

    let (mu_u, psi_u) = sample_mode_hyper(rng, &state.u, &prior.factor)?;
    let prec_u = psi_u.inverse();
    let h_u = &prec_u * &mu_u;
    for (i, touching) in panel.by_country().iter().enumerate() {
        let mut p = prec_u.clone();
        let mut h = h_u.clone();
        for &n in touching {
            let cell = &panel.cells()[n];
            let other = if cell.i == i { cell.j } else { cell.i };
            let d = state.u.row(other).transpose().component_mul(&state.v.row(cell.t).transpose());
            p += &d * d.transpose();
            h += d * resid[n];
        }
        let row = mvn_sample_canonical(rng, &Spd::new(p)?, &h)?;
        state.u.set_row(i, &row.transpose());
    }

    let (mu_v, psi_v) = sample_mode_hyper(rng, &state.v, &prior.factor)?;
    let prec_v = psi_v.inverse();
    let h_v = &prec_v * &mu_v;
    for (t, at) in panel.by_time().iter().enumerate() {
        let mut p = prec_v.clone();
        let mut h = h_v.clone();
        for &n in at {
            let cell = &panel.cells()[n];
            let d = state.u.row(cell.i).transpose().component_mul(&state.u.row(cell.j).transpose());
            p += &d * d.transpose();
            h += d * resid[n];
        }
        let row = mvn_sample_canonical(rng, &Spd::new(p)?, &h)?;
        state.v.set_row(t, &row.transpose());
    }
    state.mu_u = mu_u;
    state.psi_u = Some(psi_u);
    state.mu_v = mu_v;
    state.psi_v = Some(psi_v);
    Ok(())
}

pub fn probit_gibbs_sweep<R: Rng + ?Sized>(
    rng: &mut R,
    panel: &OrdinalPanel,
    state: &mut ProbitState,
    prior: &ProbitPrior,
) -> Result<()> {
    sample_latent(rng, panel, state)?;
    sample_beta(rng, panel, state, prior)?;
    sample_cutoffs(rng, panel, state, prior)?;
    sample_probit_factors(rng, panel, state, prior)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbitConfig {
    pub rank: usize,
    pub n_burn: usize,
    pub n_iter: usize,
    pub thin: usize,
    pub seed: u64,
    pub beta_var: f64,
    pub cutoff_bound: f64,
    pub tau0_sq: f64,
}

impl Default for ProbitConfig {
    fn default() -> Self {
        ProbitConfig {
            rank: 2,
            n_burn: 500,
            n_iter: 50_000,
            thin: 10,
            seed: 0,
            beta_var: 100.0,
            cutoff_bound: 10.0,
            tau0_sq: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbitFit {
    pub count: usize,
    /// Saved draws, one row per saved iteration.
    pub beta_draws: DMatrix<f64>,
    pub beta_mean: DVector<f64>,
    pub beta_sd: DVector<f64>,
    /// Central 95% interval per coefficient.
    pub beta_interval: Vec<(f64, f64)>,
    pub beta_ess: Vec<f64>,
    pub cutoffs_mean: Vec<f64>,
    pub theta_mean: MultiwayArray,
    /// Unit-norm columns, ordered by decreasing `||V_hat column||`.
    pub u_hat: DMatrix<f64>,
    pub v_hat: DMatrix<f64>,
    pub final_state: ProbitState,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn probit_fit(panel: &OrdinalPanel, cfg: &ProbitConfig) -> Result<ProbitFit> {
    if cfg.thin == 0 || cfg.n_iter / cfg.thin.max(1) == 0 {
        return Err(Error::EmptyChain(format!("{} iterations thinned by {}", cfg.n_iter, cfg.thin)));
    }
    let mut prior = ProbitPrior::new(cfg.rank, cfg.tau0_sq);
    prior.beta_var = cfg.beta_var;
    prior.cutoff_bound = cfg.cutoff_bound;
    let mut rng = RngStream::new(cfg.seed).substream(&[0x7072_6f62_6974]);
    let mut state = ProbitState::initial(panel, &prior, &mut rng)?;

    let q = panel.q();
    let dims = vec![panel.m(), panel.m(), panel.n_times()];
    let mut theta_sum = vec![0.0; dims.iter().product()];
    let mut cut_sum = vec![0.0; state.cutoffs.len()];
    let mut draws: Vec<f64> = Vec::new();
    let mut count = 0;
    for t in 1..=cfg.n_burn + cfg.n_iter {
        probit_gibbs_sweep(&mut rng, panel, &mut state, &prior)?;
        if t <= cfg.n_burn || !(t - cfg.n_burn).is_multiple_of(cfg.thin) {
            continue;
        }
        count += 1;
        draws.extend(state.beta.iter());
        for (s, c) in cut_sum.iter_mut().zip(&state.cutoffs) {
            *s += c;
        }
        if cfg.rank > 0 {
            for (s, v) in theta_sum.iter_mut().zip(state.theta(panel)?.data()) {
                *s += v;
            }
        }
    }
    let c = count as f64;
    let beta_draws = DMatrix::from_row_slice(count, q, &draws);
    let beta_mean = DVector::from_fn(q, |j, _| beta_draws.column(j).mean());
    let beta_sd = DVector::from_fn(q, |j, _| {
        let col = beta_draws.column(j);
        (col.iter().map(|b| (b - beta_mean[j]).powi(2)).sum::<f64>() / (c - 1.0).max(1.0)).sqrt()
    });
    let mut beta_interval = Vec::with_capacity(q);
    let mut beta_ess = Vec::with_capacity(q);
    for j in 0..q {
        let mut col: Vec<f64> = beta_draws.column(j).iter().copied().collect();
        beta_ess.push(if col.len() >= 10 { ess(&col)? } else { f64::NAN });
        col.sort_by(f64::total_cmp);
        beta_interval.push((quantile(&col, 0.025), quantile(&col, 0.975)));
    }
    let theta_mean = MultiwayArray::new(dims, theta_sum.iter().map(|s| s / c).collect())?;
    let (u_hat, v_hat) = if cfg.rank > 0 {
        symmetric_point_factors(&theta_mean, cfg.rank, cfg.seed)?
    } else {
        (DMatrix::zeros(panel.m(), 0), DMatrix::zeros(panel.n_times(), 0))
    };
    Ok(ProbitFit {
        count,
        beta_draws,
        beta_mean,
        beta_sd,
        beta_interval,
        beta_ess,
        cutoffs_mean: cut_sum.iter().map(|s| s / c).collect(),
        theta_mean,
        u_hat,
        v_hat,
        final_state: state,
    })
}

/// Rank-`rank` least-squares factors of a symmetric `m x m x T` array with
/// one shared country factor: the two country-mode factors of an ALS fit
/// are normalized, sign-aligned and averaged, `V` is refit by least squares
/// given that factor, and columns are ordered by decreasing `||V column||`.
pub fn symmetric_point_factors(theta: &MultiwayArray, rank: usize, seed: u64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let fit = als_fit(theta, &AlsConfig::new(rank).with_seed(seed))?;
    let (a, b) = (fit.factors.factor(0), fit.factors.factor(1));
    let mut u = DMatrix::zeros(a.nrows(), rank);
    for r in 0..rank {
        let mut ca = a.column(r).normalize();
        let cb = b.column(r).normalize();
        if ca.dot(&cb) < 0.0 {
            ca = -ca;
        }
        let avg = ca + cb;
        let norm = avg.norm();
        let col = if norm > 0.0 { avg / norm } else { a.column(r).normalize() };
        u.set_column(r, &col);
    }
    let mut f = FactorSet::new(vec![u.clone(), u.clone(), fit.factors.factor(2).clone()])?;
    let v = conditional_update(theta, &f, 2)?;
    f.set_factor(2, v.clone())?;
    let mut order: Vec<usize> = (0..rank).collect();
    order.sort_by(|&x, &y| v.column(y).norm().total_cmp(&v.column(x).norm()));
    let u_sorted = DMatrix::from_columns(&order.iter().map(|&r| u.column(r)).collect::<Vec<_>>());
    let v_sorted = DMatrix::from_columns(&order.iter().map(|&r| v.column(r)).collect::<Vec<_>>());
    Ok((u_sorted, v_sorted))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn panel(seed: u64, m: usize, tt: usize, q: usize) -> OrdinalPanel {
        let mut rng = RngStream::new(seed);
        let mut pairs = Vec::new();
        let mut labels = Vec::new();
        let mut xs = Vec::new();
        for t in 0..tt {
            for j in 0..m {
                for i in 0..j {
                    pairs.push((i, j, t));
                    labels.push(rng.random_range(-2..=1));
                    for _ in 0..q {
                        xs.push(std_normal(&mut rng));
                    }
                }
            }
        }
        let n = pairs.len();
        OrdinalPanel::new(m, tt, pairs, &labels, DMatrix::from_row_slice(n, q, &xs)).unwrap()
    }

    #[test]
    fn symmetric_compose_cases() {
        let u = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let g = symmetric_compose(&u, &DVector::from_element(1, 2.0)).unwrap();
        assert_eq!(g.masked_indices(), vec![0, 4, 8]);
        assert!(g.data().iter().enumerate().all(|(l, &v)| l == 0 || v == 0.0));

        let mut rng = RngStream::new(3);
        let u = DMatrix::from_fn(5, 3, |_, _| std_normal(&mut rng));
        let v = DVector::from_fn(3, |_, _| std_normal(&mut rng));
        let g = symmetric_compose(&u, &v).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(g.get(&[i, j]).unwrap(), g.get(&[j, i]).unwrap());
                if i != j {
                    let direct: f64 = (0..3).map(|r| u[(i, r)] * u[(j, r)] * v[r]).sum();
                    assert!((g.get(&[i, j]).unwrap() - direct).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn csv_parsing() {
        let text = "i,j,t,y,x1\n1,2,1,-5,0.5\n1,3,1,2,1.0\n2,3,2,0,-1\n";
        let p = OrdinalPanel::read_csv(text.as_bytes()).unwrap();
        assert_eq!((p.m(), p.n_times(), p.q(), p.n_categories()), (3, 2, 1, 8));
        assert_eq!(p.cells()[0].y, 0);
        assert_eq!(p.label(7), 2);
        for (text, line) in [
            ("i,j,t,y\n2,1,1,0\n", 2),
            ("i,j,t,y\n1,2,1,0\n1,2,1,1\n", 3),
            ("i,j,t,y\n1,2,1,0\n1,2,0,1\n", 3),
            ("i,j,t,y,x1\n1,2,1,0,foo\n", 2),
        ] {
            match OrdinalPanel::read_csv(text.as_bytes()) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn latent_draws_respect_categories_and_symmetry() {
        let p = panel(1, 6, 3, 2);
        let prior = ProbitPrior::new(2, 1.0);
        let mut rng = RngStream::new(2);
        let mut s = ProbitState::initial(&p, &prior, &mut rng).unwrap();
        for _ in 0..200 {
            probit_gibbs_sweep(&mut rng, &p, &mut s, &prior).unwrap();
            assert!(s.cutoffs.windows(2).all(|w| w[0] < w[1]));
            for (cell, &z) in p.cells().iter().zip(&s.z) {
                assert_eq!(s.category_of(z), cell.y);
            }
            let zarr = s.latent_array(&p).unwrap();
            for lin in 0..zarr.len() {
                let idx = zarr.multi_index(lin);
                let mirror = zarr.linear_index(&[idx[1], idx[0], idx[2]]).unwrap();
                assert_eq!(zarr.is_observed(lin), zarr.is_observed(mirror));
                assert_eq!(zarr.data()[lin], zarr.data()[mirror]);
                if idx[0] == idx[1] {
                    assert!(!zarr.is_observed(lin));
                }
            }
        }
    }

    #[test]
    fn single_category_without_factors_gives_free_normals() {
        let mut p = panel(4, 5, 2, 1);
        for c in p.cells.iter_mut() {
            c.y = 0;
        }
        p.n_categories = 1;
        let prior = ProbitPrior::new(0, 1.0);
        let mut rng = RngStream::new(5);
        let mut s = ProbitState::initial(&p, &prior, &mut rng).unwrap();
        assert!(s.cutoffs.is_empty());
        s.beta[0] = 0.0;
        let mut all = Vec::new();
        for _ in 0..400 {
            sample_latent(&mut rng, &p, &mut s).unwrap();
            all.extend(s.z.iter().copied());
        }
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05 && (var - 1.0).abs() < 0.05, "{mean} {var}");
    }

    #[test]
    fn sign_flip_leaves_theta_unchanged() {
        let p = panel(6, 4, 2, 0);
        let prior = ProbitPrior::new(2, 1.0);
        let mut rng = RngStream::new(7);
        let s = ProbitState::initial(&p, &prior, &mut rng).unwrap();
        let mut flipped = s.clone();
        flipped.u.column_mut(1).neg_mut();
        let (a, b) = (s.theta(&p).unwrap(), flipped.theta(&p).unwrap());
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn point_factors_are_normalized_and_ordered() {
        let mut rng = RngStream::new(8);
        let u = DMatrix::from_fn(6, 2, |_, _| std_normal(&mut rng));
        let v = DMatrix::from_fn(3, 2, |t, r| if r == 0 { 1.0 + t as f64 } else { 5.0 + t as f64 });
        let theta = FactorSet::new(vec![u.clone(), u.clone(), v]).unwrap().compose();
        let (uh, vh) = symmetric_point_factors(&theta, 2, 1).unwrap();
        for r in 0..2 {
            assert!((uh.column(r).norm() - 1.0).abs() < 1e-9);
        }
        assert!(vh.column(0).norm() >= vh.column(1).norm());
        let back = FactorSet::new(vec![uh.clone(), uh, vh]).unwrap().compose();
        assert!(theta.sq_dist(&back).unwrap() < 1e-8 * theta.sq_norm());
    }
}
