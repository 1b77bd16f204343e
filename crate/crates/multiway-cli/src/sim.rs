//! Synthetic data: the simulation-study arrays plus small generators for
//! cross-classified and ordinal panel data.

use multiway::als::{als_fit, AlsConfig};
use multiway::dist::{invwishart_sample, mvn_sample, std_normal, wishart_sample};
use multiway::extensions::{CrossTabData, OrdinalPanel};
use multiway::{Error, FactorSet, MultiwayArray, Result, RngStream, Spd};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSpec {
    pub dims: Vec<usize>,
    pub rank: usize,
    /// Error variance as a fraction of the mean square of `theta`.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SimSpec {
    fn default() -> Self {
        SimSpec {
            dims: vec![10, 8, 6],
            rank: 4,
            noise: 0.25,
            seed: 0,
        }
    }
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "dims must list at least two positive sizes, got {:?}",
                self.dims
            )));
        }
        if self.rank == 0 {
            return Err(Error::InvalidParameter("rank must be at least 1".into()));
        }
        if !(self.noise > 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidParameter(format!("noise must be positive, got {}", self.noise)));
        }
        Ok(())
    }

    /// Rank of the generating factors: the product of all dims but the first.
    pub fn full_rank(&self) -> usize {
        self.dims[1..].iter().product()
    }
}

/// Hyperparameters drawn for one mode, kept for diagnostics.
#[derive(Debug, Clone)]
pub struct ModeDraw {
    pub nu0: f64,
    pub psi: Spd,
    pub mu: DVector<f64>,
    pub u: DMatrix<f64>,
}

/// Per mode: `Psi_0 ~ Wishart(I, Rt + 1)`, `nu_0 = Rt + Poisson(sqrt Rt)`,
/// `Psi_k ~ inverse-Wishart(Psi_0, nu_0)` (inverse-scale argument),
/// `mu_k ~ MVN(0, Psi_k)` and `m_k` rows i.i.d. `MVN(mu_k, Psi_k)`.
pub fn draw_mode<R: Rng + ?Sized>(rng: &mut R, m: usize, rt: usize) -> Result<ModeDraw> {
    let rtf = rt as f64;
    let psi0 = wishart_sample(rng, &Spd::identity(rt), rtf + 1.0)?;
    let x = Poisson::new(rtf.sqrt())
        .map_err(|e| Error::InvalidParameter(e.to_string()))?
        .sample(rng);
    let nu0 = rtf + x;
    let psi = invwishart_sample(rng, &psi0, nu0)?;
    let mu = mvn_sample(rng, &DVector::zeros(rt), &psi)?;
    let mut u = DMatrix::zeros(m, rt);
    for i in 0..m {
        u.set_row(i, &mvn_sample(rng, &mu, &psi)?.transpose());
    }
    Ok(ModeDraw { nu0, psi, mu, u })
}

/// Generates `(theta, y)`: `theta` is the rank-`spec.rank` least-squares
/// approximation of the full-rank composition, rescaled to mean square 1,
/// and `y = theta + N(0, spec.noise)`.
pub fn simulate_theta(spec: &SimSpec, rng: &mut RngStream) -> Result<(MultiwayArray, MultiwayArray)> {
    spec.validate()?;
    let rt = spec.full_rank();
    let mut factors = Vec::with_capacity(spec.dims.len());
    for &m in &spec.dims {
        factors.push(draw_mode(rng, m, rt)?.u);
    }
    let full = FactorSet::new(factors)?.compose();
    let als_seed = rng.random::<u64>();
    let fit = als_fit(&full, &AlsConfig::new(spec.rank).with_seed(als_seed))?;
    let mut theta = fit.theta();
    let ms = theta.sq_norm() / theta.len() as f64;
    if !(ms > 0.0) {
        return Err(Error::InvalidParameter("simulated theta is identically zero".into()));
    }
    let c = ms.sqrt().recip();
    theta.data_mut().iter_mut().for_each(|v| *v *= c);
    let sd = spec.noise.sqrt();
    let mut y = theta.clone();
    y.data_mut().iter_mut().for_each(|v| *v += sd * std_normal(rng));
    Ok((theta, y))
}

/// Replicate `r` of a study, drawn from its own substream.
pub fn simulate_replicate(spec: &SimSpec, replicate: u64) -> Result<(MultiwayArray, MultiwayArray)> {
    let mut rng = RngStream::new(spec.seed).substream(&[0x73696d, spec.rank as u64, replicate]);
    simulate_theta(spec, &mut rng)
}

/// Cross-classified data with known `B`: factor entries and `V` are
/// standard normal, `mu_x = beta_x + N(0, omega I)` and responses are
/// `mu_x + N(0, sigma I)`. Cell sizes are uniform on `0..=max_count`.
#[derive(Debug, Clone)]
pub struct CrossTabSample {
    pub data: CrossTabData,
    /// `cells x p`.
    pub beta: DMatrix<f64>,
    pub mu: DMatrix<f64>,
}

pub fn crosstab_sample(
    levels: &[usize],
    p: usize,
    rank: usize,
    omega: f64,
    sigma: f64,
    max_count: usize,
    rng: &mut RngStream,
) -> Result<CrossTabSample> {
    let mut dims = levels.to_vec();
    dims.push(p);
    let f = FactorSet::from_fn(&dims, rank, |_, _, _| std_normal(rng))?;
    let b = f.compose();
    let cells: usize = levels.iter().product();
    // Linear order of B puts the response index last, so column j of the
    // cells x p matrix is the j-th contiguous block.
    let beta = DMatrix::from_column_slice(cells, p, b.data());
    let mu = beta.map(|v| v + omega.sqrt() * std_normal(rng));
    let mut x = Vec::new();
    let mut y = Vec::new();
    for c in 0..cells {
        let mut idx = Vec::with_capacity(levels.len());
        let mut rest = c;
        for &m in levels {
            idx.push(rest % m);
            rest /= m;
        }
        let n = rng.random_range(0..=max_count);
        for _ in 0..n {
            x.push(idx.clone());
            y.extend((0..p).map(|j| mu[(c, j)] + sigma.sqrt() * std_normal(rng)));
        }
    }
    let n = x.len();
    let data = CrossTabData::new(levels.to_vec(), x, DMatrix::from_row_slice(n, p, &y))?;
    Ok(CrossTabSample { data, beta, mu })
}

/// Ordinal panel from the symmetric probit model: `z = x^T beta + sum_r
/// u_ir u_jr v_tr + N(0, 1)` and the label is `min_label` plus the number of
/// `cutoffs` below `z`. Covariates and factor entries are standard normal.
#[derive(Debug, Clone)]
pub struct PanelSample {
    pub panel: OrdinalPanel,
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn panel_sample(
    m: usize,
    n_times: usize,
    rank: usize,
    beta: &[f64],
    cutoffs: &[f64],
    min_label: i64,
    factor_scale: f64,
    rng: &mut RngStream,
) -> Result<PanelSample> {
    let q = beta.len();
    let u = DMatrix::from_fn(m, rank, |_, _| factor_scale * std_normal(rng));
    let v = DMatrix::from_fn(n_times, rank, |_, _| std_normal(rng));
    let mut pairs = Vec::new();
    let mut labels = Vec::new();
    let mut xs = Vec::new();
    for t in 0..n_times {
        for j in 0..m {
            for i in 0..j {
                let x: Vec<f64> = (0..q).map(|_| std_normal(rng)).collect();
                let lin: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>()
                    + (0..rank).map(|r| u[(i, r)] * u[(j, r)] * v[(t, r)]).sum::<f64>();
                let z = lin + std_normal(rng);
                labels.push(min_label + cutoffs.iter().filter(|&&c| z > c).count() as i64);
                pairs.push((i, j, t));
                xs.extend(x);
            }
        }
    }
    let n = pairs.len();
    let panel = OrdinalPanel::new(m, n_times, pairs, &labels, DMatrix::from_row_slice(n, q, &xs))?;
    Ok(PanelSample { panel, u, v })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn theta_has_unit_mean_square_and_target_rank() {
        let spec = SimSpec {
            seed: 3,
            ..SimSpec::default()
        };
        let (theta, y) = simulate_replicate(&spec, 0).unwrap();
        let ms = theta.sq_norm() / theta.len() as f64;
        assert!((ms - 1.0).abs() < 1e-9, "{ms}");
        let noise = y.sq_dist(&theta).unwrap() / y.len() as f64;
        assert!((noise - 0.25).abs() < 0.06, "{noise}");
        // A rank-4 CP array has every unfolding of matrix rank at most 4.
        for k in 0..3 {
            let mut s: Vec<f64> = theta.fibers(k).unwrap().singular_values().iter().copied().collect();
            s.sort_by(|a, b| b.total_cmp(a));
            assert!(s[4] < 1e-10 * s[0], "mode {k}: {s:?}");
        }
    }

    #[test]
    fn replicates_are_reproducible_and_distinct() {
        let spec = SimSpec::default();
        let (a, _) = simulate_replicate(&spec, 1).unwrap();
        let (b, _) = simulate_replicate(&spec, 1).unwrap();
        let (c, _) = simulate_replicate(&spec, 2).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn nu0_excess_has_poisson_mean() {
        let mut rng = RngStream::new(11);
        let rt = 48;
        let n = 200;
        let mut total = 0.0;
        for _ in 0..n {
            total += draw_mode(&mut rng, 2, rt).unwrap().nu0 - rt as f64;
        }
        let mean = total / n as f64;
        let target = (rt as f64).sqrt();
        assert!((mean - target).abs() < 0.15 * target, "{mean} vs {target}");
    }

    #[test]
    fn mode_draw_shapes() {
        let mut rng = RngStream::new(5);
        let d = draw_mode(&mut rng, 10, 48).unwrap();
        assert_eq!(d.u.shape(), (10, 48));
        assert_eq!(d.psi.dim(), 48);
        assert_eq!(d.mu.len(), 48);
    }

    #[test]
    fn crosstab_sample_layout() {
        let mut rng = RngStream::new(2);
        let s = crosstab_sample(&[3, 2], 2, 1, 0.1, 0.5, 6, &mut rng).unwrap();
        assert_eq!(s.beta.shape(), (6, 2));
        let sum = s.data.summary();
        assert_eq!(sum.counts.iter().sum::<usize>(), s.data.n());
    }

    #[test]
    fn panel_labels_follow_cutoffs() {
        let mut rng = RngStream::new(4);
        let s = panel_sample(6, 2, 1, &[1.0], &[-1.0, 0.0, 1.0], -2, 1.0, &mut rng).unwrap();
        assert_eq!(s.panel.cells().len(), 30);
        assert!(s.panel.n_categories() <= 4);
    }
}
