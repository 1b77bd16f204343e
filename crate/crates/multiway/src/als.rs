//! Alternating least squares for rank-R CP decompositions.
//!
//! With every factor but `U^(k)` held fixed, the least-squares estimate of
//! `U^(k)` solves `U Q = L` where
//!
//! * `Q = hadamard_{j != k} (U^(j)^T U^(j))` ([`gram_hadamard`]), and
//! * `L = sum over mode-k fibers y (x) z`, `z` the Hadamard product of the
//!   matching rows of the other factors ([`cross_moment`]).
//!
//! Masked cells drop out of both; each row of `U^(k)` then gets its own
//! `Q_i` accumulated over the observed cells of that row.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::{for_each_index, khatri_rao, FactorSet, MultiwayArray};
use crate::dist::{std_normal, RngStream};
use crate::error::{Error, Result};
use crate::linalg::Spd;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlsConfig {
    pub rank: usize,
    pub n_starts: usize,
    /// Stop when `||theta_new - theta_old|| / ||theta_old||` drops below this.
    pub rel_tol: f64,
    pub max_sweeps: usize,
    pub seed: u64,
}

impl Default for AlsConfig {
    fn default() -> Self {
        AlsConfig {
            rank: 1,
            n_starts: 20,
            rel_tol: 1e-6,
            max_sweeps: 5000,
            seed: 0,
        }
    }
}

impl AlsConfig {
    pub fn new(rank: usize) -> Self {
        AlsConfig {
            rank,
            ..Default::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidParameter("ALS rank must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::InvalidParameter(format!("rel_tol must be positive, got {}", self.rel_tol)));
        }
        if self.n_starts == 0 {
            return Err(Error::InvalidParameter("need at least one ALS start".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AlsResult {
    pub factors: FactorSet,
    pub rss: f64,
    pub sweeps: usize,
    pub converged: bool,
    /// RSS at the starting point followed by the RSS after every sweep.
    pub rss_trace: Vec<f64>,
    /// Index of the start that produced this result.
    pub start: usize,
}

impl AlsResult {
    pub fn theta(&self) -> MultiwayArray {
        self.factors.compose()
    }
}

/// Normal-equation Gram matrix for one mode.
#[derive(Debug, Clone)]
pub enum RowGram {
    /// Fully observed arrays: every row shares `Q`.
    Shared(DMatrix<f64>),
    /// Masked arrays: `Q_i` over the observed cells of row `i`.
    PerRow(Vec<DMatrix<f64>>),
}

impl RowGram {
    pub fn row(&self, i: usize) -> &DMatrix<f64> {
        match self {
            RowGram::Shared(q) => q,
            RowGram::PerRow(qs) => &qs[i],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModeSystem {
    pub mode: usize,
    pub l: DMatrix<f64>,
    pub q: RowGram,
}

fn check_compatible(a: &MultiwayArray, f: &FactorSet, mode: usize) -> Result<()> {
    a.check_mode(mode)?;
    if f.dims() != a.dims() {
        return Err(Error::Shape(format!(
            "factor rows {:?} vs array dims {:?}",
            f.dims(),
            a.dims()
        )));
    }
    Ok(())
}

/// `Q = hadamard over j != skip of U^(j)^T U^(j)` (`R x R`).
pub fn gram_hadamard(f: &FactorSet, skip: usize) -> Result<DMatrix<f64>> {
    if skip >= f.order() {
        return Err(Error::InvalidMode {
            mode: skip,
            order: f.order(),
        });
    }
    let r = f.rank();
    let mut q = DMatrix::from_element(r, r, 1.0);
    for (j, u) in f.factors().iter().enumerate() {
        if j != skip {
            q.component_mul_assign(&(u.transpose() * u));
        }
    }
    Ok(q)
}

/// Accumulates `L` (and per-row `Q_i` when `per_row`) in one pass over the
/// observed cells.
fn accumulate(a: &MultiwayArray, f: &FactorSet, mode: usize, per_row: bool) -> (DMatrix<f64>, Option<Vec<DMatrix<f64>>>) {
    let rank = f.rank();
    let m = a.dims()[mode];
    let mut l = DMatrix::zeros(m, rank);
    let mut qs = per_row.then(|| vec![DMatrix::zeros(rank, rank); m]);
    let mut z = vec![0.0; rank];
    let data = a.data();
    for_each_index(a.dims(), |lin, idx| {
        if !a.is_observed(lin) {
            return;
        }
        z.iter_mut().for_each(|v| *v = 1.0);
        for (j, u) in f.factors().iter().enumerate() {
            if j != mode {
                let row = idx[j];
                for (r, v) in z.iter_mut().enumerate() {
                    *v *= u[(row, r)];
                }
            }
        }
        let i = idx[mode];
        let y = data[lin];
        for (r, v) in z.iter().enumerate() {
            l[(i, r)] += y * v;
        }
        if let Some(qs) = qs.as_mut() {
            let q = &mut qs[i];
            for s in 0..rank {
                for r in 0..rank {
                    q[(r, s)] += z[r] * z[s];
                }
            }
        }
    });
    (l, qs)
}

/// `L = fibers(a, k) Z` with masked cells contributing zero.
pub fn cross_moment(a: &MultiwayArray, f: &FactorSet, mode: usize) -> Result<DMatrix<f64>> {
    check_compatible(a, f, mode)?;
    Ok(accumulate(a, f, mode, false).0)
}

pub fn mode_system(a: &MultiwayArray, f: &FactorSet, mode: usize) -> Result<ModeSystem> {
    check_compatible(a, f, mode)?;
    if a.is_masked() {
        let (l, qs) = accumulate(a, f, mode, true);
        Ok(ModeSystem {
            mode,
            l,
            q: RowGram::PerRow(qs.expect("per-row grams requested")),
        })
    } else {
        Ok(ModeSystem {
            mode,
            l: a.fibers(mode)? * khatri_rao(f, mode)?,
            q: RowGram::Shared(gram_hadamard(f, mode)?),
        })
    }
}

fn is_zero(q: &DMatrix<f64>) -> bool {
    q.iter().all(|&v| v == 0.0)
}

/// Conditional least-squares estimate `L Q^{-1}` of factor `mode`.
///
/// A zero Gram matrix (no information about a row) yields the
/// minimum-norm answer: zero for `Shared`, the current row for `PerRow`.
pub fn conditional_update(a: &MultiwayArray, f: &FactorSet, mode: usize) -> Result<DMatrix<f64>> {
    let sys = mode_system(a, f, mode)?;
    solve_system(&sys, f.factor(mode))
}

pub(crate) fn solve_system(sys: &ModeSystem, current: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let rank = sys.l.ncols();
    match &sys.q {
        RowGram::Shared(q) => {
            if is_zero(q) {
                return Ok(DMatrix::zeros(sys.l.nrows(), rank));
            }
            let q = Spd::new(q.clone()).map_err(|_| Error::Singular(sys.mode))?;
            Ok(q.solve(&sys.l.transpose()).transpose())
        }
        RowGram::PerRow(qs) => {
            let mut out = current.clone();
            for (i, q) in qs.iter().enumerate() {
                if is_zero(q) {
                    continue;
                }
                let q = Spd::new(q.clone()).map_err(|_| Error::Singular(sys.mode))?;
                let row = q.solve_vec(&sys.l.row(i).transpose());
                out.set_row(i, &row.transpose());
            }
            Ok(out)
        }
    }
}

/// Runs ALS from `init` until the relative change in the composed
/// estimate falls below `cfg.rel_tol` or `cfg.max_sweeps` is reached.
/// Modes are updated in the fixed order `0..K` within each sweep.
pub fn als_from(a: &MultiwayArray, init: FactorSet, cfg: &AlsConfig) -> Result<AlsResult> {
    cfg.validate()?;
    if init.dims() != a.dims() {
        return Err(Error::Shape(format!(
            "initial factor rows {:?} vs array dims {:?}",
            init.dims(),
            a.dims()
        )));
    }
    // Fully observed arrays: L = fibers(a, k) Z with the fibers unfolded once.
    let unfolded = if a.is_masked() {
        None
    } else {
        Some((0..a.order()).map(|k| a.fibers(k)).collect::<Result<Vec<_>>>()?)
    };
    let mut factors = init;
    let mut theta = factors.compose();
    let mut rss_trace = vec![a.sq_dist(&theta)?];
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < cfg.max_sweeps {
        sweeps += 1;
        for k in 0..factors.order() {
            let u = match &unfolded {
                Some(fibers) => {
                    let sys = ModeSystem {
                        mode: k,
                        l: &fibers[k] * khatri_rao(&factors, k)?,
                        q: RowGram::Shared(gram_hadamard(&factors, k)?),
                    };
                    solve_system(&sys, factors.factor(k))?
                }
                None => conditional_update(a, &factors, k)?,
            };
            factors.set_factor(k, u)?;
        }
        let next = factors.compose();
        rss_trace.push(a.sq_dist(&next)?);
        let old_norm = theta.sq_norm();
        let change = next.sq_dist(&theta)?;
        theta = next;
        let done = if old_norm > 0.0 {
            (change / old_norm).sqrt() < cfg.rel_tol
        } else {
            theta.sq_norm() == 0.0
        };
        if done {
            converged = true;
            break;
        }
    }
    let rss = *rss_trace.last().expect("trace starts non-empty");
    Ok(AlsResult {
        factors,
        rss,
        sweeps,
        converged,
        rss_trace,
        start: 0,
    })
}

/// Factor set with i.i.d. standard normal entries.
pub fn random_factors(dims: &[usize], rank: usize, rng: &mut RngStream) -> Result<FactorSet> {
    FactorSet::from_fn(dims, rank, |_, _, _| std_normal(rng))
}

/// Best-of-`n_starts` ALS; starts run in parallel on disjoint substreams and
/// the minimum-RSS result wins (ties go to the lowest start index).
pub fn als_fit(a: &MultiwayArray, cfg: &AlsConfig) -> Result<AlsResult> {
    cfg.validate()?;
    let root = RngStream::new(cfg.seed);
    let runs: Vec<Result<AlsResult>> = (0..cfg.n_starts)
        .into_par_iter()
        .map(|s| {
            let mut rng = root.substream(&[s as u64]);
            let init = random_factors(a.dims(), cfg.rank, &mut rng)?;
            als_from(a, init, cfg).map(|mut r| {
                r.start = s;
                r
            })
        })
        .collect();
    let mut best: Option<AlsResult> = None;
    let mut first_err = None;
    for run in runs {
        match run {
            Ok(r) => {
                if best.as_ref().is_none_or(|b| r.rss < b.rss) {
                    best = Some(r);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    best.ok_or_else(|| first_err.expect("at least one start ran"))
}

/// Rank-`rank` least-squares approximation with the default configuration.
pub fn rank_r_approx(a: &MultiwayArray, rank: usize) -> Result<FactorSet> {
    Ok(als_fit(a, &AlsConfig::new(rank))?.factors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn random_array(dims: &[usize], seed: u64) -> MultiwayArray {
        let mut rng = RngStream::new(seed);
        MultiwayArray::from_fn(dims.to_vec(), |_| std_normal(&mut rng)).unwrap()
    }

    #[test]
    fn gram_hadamard_examples() {
        let u = dmatrix![9.0; 1.0; 1.0];
        let f = FactorSet::new(vec![u, dmatrix![1.0; 2.0], dmatrix![3.0; 4.0]]).unwrap();
        assert_eq!(gram_hadamard(&f, 0).unwrap(), dmatrix![125.0]);

        let eye = DMatrix::<f64>::identity(3, 2);
        let f = FactorSet::new(vec![DMatrix::from_element(4, 2, 7.0), eye.clone(), eye]).unwrap();
        assert_eq!(gram_hadamard(&f, 0).unwrap(), DMatrix::identity(2, 2));
        assert!(gram_hadamard(&f, 3).is_err());
    }

    #[test]
    fn gram_hadamard_matches_scalar_loops() {
        let mut rng = RngStream::new(1);
        let dims = [3, 4, 2, 3];
        let f = random_factors(&dims, 3, &mut rng).unwrap();
        let q = gram_hadamard(&f, 1).unwrap();
        for r in 0..3 {
            for s in 0..3 {
                let mut want = 1.0;
                for j in [0, 2, 3] {
                    let u = f.factor(j);
                    want *= (0..dims[j]).map(|i| u[(i, r)] * u[(i, s)]).sum::<f64>();
                }
                assert!((q[(r, s)] - want).abs() < 1e-12 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn cross_moment_matches_fiber_product() {
        let a = random_array(&[2, 3, 4], 2);
        let f = random_factors(a.dims(), 2, &mut RngStream::new(3)).unwrap();
        for k in 0..3 {
            let want = a.fibers(k).unwrap() * khatri_rao(&f, k).unwrap();
            assert!((cross_moment(&a, &f, k).unwrap() - want).amax() < 1e-12);
        }
    }

    #[test]
    fn cross_moment_brute_force_222() {
        let a = MultiwayArray::from_fn(vec![2, 2, 2], |i| (1 + i[0] + 2 * i[1] + 4 * i[2]) as f64).unwrap();
        let f = FactorSet::from_fn(&[2, 2, 2], 2, |k, i, r| (k + 2 * i + r) as f64 * 0.5 - 1.0).unwrap();
        let l = cross_moment(&a, &f, 0).unwrap();
        for i in 0..2 {
            for r in 0..2 {
                let mut want = 0.0;
                for j in 0..2 {
                    for k in 0..2 {
                        want += a.get(&[i, j, k]).unwrap() * f.factor(1)[(j, r)] * f.factor(2)[(k, r)];
                    }
                }
                assert_eq!(l[(i, r)], want);
            }
        }
        assert!(cross_moment(&MultiwayArray::zeros(vec![2, 2, 2]).unwrap(), &f, 1).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noise_free_identity_l_equals_uq() {
        let f = random_factors(&[4, 3, 5], 3, &mut RngStream::new(4)).unwrap();
        let y = f.compose();
        for k in 0..3 {
            let l = cross_moment(&y, &f, k).unwrap();
            let uq = f.factor(k) * gram_hadamard(&f, k).unwrap();
            assert!((l - uq).amax() < 1e-10);
        }
    }

    #[test]
    fn conditional_update_recovers_exact_factor() {
        let f = random_factors(&[5, 4, 3], 2, &mut RngStream::new(5)).unwrap();
        let y = f.compose();
        for k in 0..3 {
            let mut g = f.clone();
            g.set_factor(k, DMatrix::from_element(f.dims()[k], 2, 0.3)).unwrap();
            let u = conditional_update(&y, &g, k).unwrap();
            assert!((u - f.factor(k)).amax() < 1e-10);
        }
    }

    #[test]
    fn conditional_update_never_increases_rss() {
        for seed in 0..20 {
            let a = random_array(&[4, 3, 2], 100 + seed);
            let mut f = random_factors(a.dims(), 2, &mut RngStream::new(seed)).unwrap();
            for k in 0..3 {
                let before = a.sq_dist(&f.compose()).unwrap();
                let u = conditional_update(&a, &f, k).unwrap();
                f.set_factor(k, u).unwrap();
                let after = a.sq_dist(&f.compose()).unwrap();
                assert!(after <= before * (1.0 + 1e-12), "{after} > {before}");
            }
        }
    }

    #[test]
    fn singular_paths() {
        // collinear columns with R above the fiber count: jitter repair path
        let a = random_array(&[3, 2, 1], 9);
        let f = FactorSet::new(vec![
            DMatrix::from_element(3, 3, 1.0),
            dmatrix![1.0, 1.0, 1.0; 2.0, 2.0, 2.0],
            dmatrix![1.0, 1.0, 1.0],
        ])
        .unwrap();
        let u = conditional_update(&a, &f, 0).unwrap();
        assert!(u.iter().all(|v| v.is_finite()));
        // poisoned factors cannot be repaired
        let bad = FactorSet::new(vec![
            DMatrix::from_element(3, 1, 1.0),
            dmatrix![f64::NAN; 1.0],
            dmatrix![1.0],
        ])
        .unwrap();
        assert!(matches!(conditional_update(&a, &bad, 0), Err(Error::Singular(0))));
    }

    #[test]
    fn rank_one_exact_recovery() {
        let f = random_factors(&[5, 4, 3], 1, &mut RngStream::new(6)).unwrap();
        let y = f.compose();
        let fit = als_fit(&y, &AlsConfig::new(1).with_seed(1)).unwrap();
        assert!(fit.rss / y.sq_norm() < 1e-10);
        assert!(fit.converged);
    }

    #[test]
    fn rss_trace_non_increasing() {
        for seed in 0..10 {
            let a = random_array(&[5, 4, 3], 200 + seed);
            let cfg = AlsConfig { rank: 3, n_starts: 1, seed, ..Default::default() };
            let fit = als_fit(&a, &cfg).unwrap();
            let r0 = fit.rss_trace[0];
            for w in fit.rss_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9 * r0);
            }
            assert!((fit.rss - a.sq_dist(&fit.theta()).unwrap()).abs() <= 1e-8 * fit.rss.max(1e-300));
        }
    }

    #[test]
    fn masked_cells_never_read() {
        let mut a = random_array(&[4, 3, 3], 7);
        let masked = [0usize, 5, 17, 30];
        for &m in &masked {
            a.data_mut()[m] = f64::NAN;
        }
        let a = a.with_mask(masked).unwrap();
        let fit = als_fit(&a, &AlsConfig { rank: 2, n_starts: 3, ..Default::default() }).unwrap();
        assert!(fit.rss.is_finite());
        assert!(fit.factors.factors().iter().all(|u| u.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn all_zero_data() {
        let a = MultiwayArray::zeros(vec![3, 3, 2]).unwrap();
        let fit = als_fit(&a, &AlsConfig::new(2)).unwrap();
        assert_eq!(fit.rss, 0.0);
        assert!(fit.converged);
    }

    #[test]
    fn config_validation() {
        let a = random_array(&[2, 2], 1);
        assert!(als_fit(&a, &AlsConfig::new(0)).is_err());
        assert!(als_fit(&a, &AlsConfig { rel_tol: 0.0, ..AlsConfig::new(1) }).is_err());
    }

    #[test]
    fn multistart_dominates_single_starts() {
        let a = random_array(&[5, 4, 3], 8);
        let cfg = AlsConfig { rank: 3, n_starts: 20, seed: 42, ..Default::default() };
        let best = als_fit(&a, &cfg).unwrap();
        let root = RngStream::new(42);
        for s in 0..20u64 {
            let init = random_factors(a.dims(), 3, &mut root.substream(&[s])).unwrap();
            let single = als_from(&a, init, &cfg).unwrap();
            assert!(best.rss <= single.rss);
        }
    }
}
