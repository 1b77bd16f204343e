//! Random streams and the samplers used by the Gibbs schemes.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};
use crate::linalg::{lower_inverse, Spd};

/// A seeded ChaCha stream. Substreams share the key and differ in the
/// ChaCha stream id, so they never overlap.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    /// Independent stream keyed by `key` (e.g. `[replicate, rank, method]`).
    /// Depends only on the seed, this stream's id and `key`, never on how
    /// many draws have been taken.
    pub fn substream(&self, key: &[u64]) -> RngStream {
        let mut h = splitmix(self.stream ^ 0x5851_f42d_4c95_7f2d);
        for &k in key {
            h = splitmix(h ^ splitmix(k.wrapping_add(0x9e37_79b9)));
        }
        Self::with_stream(self.seed, h)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

#[inline]
pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn std_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| std_normal(rng))
}

/// `mean + L z` with `cov = L L^T`.
pub fn mvn_sample<R: Rng + ?Sized>(rng: &mut R, mean: &DVector<f64>, cov: &Spd) -> Result<DVector<f64>> {
    if mean.len() != cov.dim() {
        return Err(Error::Shape(format!(
            "mean of length {} with {}x{} covariance",
            mean.len(),
            cov.dim(),
            cov.dim()
        )));
    }
    let z = std_normal_vec(rng, mean.len());
    Ok(mean + cov.chol_l() * z)
}

/// Draw from `MVN(P^{-1} h, P^{-1})` given the precision `P` and the
/// linear term `h`, without forming `P^{-1}`.
pub fn mvn_sample_canonical<R: Rng + ?Sized>(
    rng: &mut R,
    precision: &Spd,
    h: &DVector<f64>,
) -> Result<DVector<f64>> {
    if h.len() != precision.dim() {
        return Err(Error::Shape(format!(
            "linear term of length {} with {}x{} precision",
            h.len(),
            precision.dim(),
            precision.dim()
        )));
    }
    let mean = precision.solve_vec(h);
    let l = precision.chol_l();
    let z = std_normal_vec(rng, h.len());
    // L^T x = z  =>  x ~ MVN(0, (L L^T)^{-1})
    let x = l
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::NotSpd("zero pivot in precision factor".into()))?;
    Ok(mean + x)
}

/// Rows drawn independently, row `i` from `MVN(M[i, ..], rowcov)`.
pub fn matnorm_sample<R: Rng + ?Sized>(rng: &mut R, m: &DMatrix<f64>, rowcov: &Spd) -> Result<DMatrix<f64>> {
    if m.ncols() != rowcov.dim() {
        return Err(Error::Shape(format!(
            "mean with {} columns and {}x{} row covariance",
            m.ncols(),
            rowcov.dim(),
            rowcov.dim()
        )));
    }
    let z = DMatrix::from_fn(m.nrows(), m.ncols(), |_, _| std_normal(rng));
    Ok(m + z * rowcov.chol_l().transpose())
}

pub fn gamma_sample<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> Result<f64> {
    if !(shape > 0.0 && rate > 0.0 && shape.is_finite() && rate.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "gamma needs positive shape and rate, got ({shape}, {rate})"
        )));
    }
    let g = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(g.sample(rng))
}

/// Reciprocal of a `gamma(shape, rate)` draw; mean `rate / (shape - 1)`.
pub fn invgamma_sample<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> Result<f64> {
    Ok(1.0 / gamma_sample(rng, shape, rate)?)
}

/// Lower-triangular Bartlett factor `A` with `A A^T ~ Wishart(I, dof)`.
fn bartlett<R: Rng + ?Sized>(rng: &mut R, p: usize, dof: f64) -> Result<DMatrix<f64>> {
    if !(dof > p as f64 - 1.0) || !dof.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "Wishart dof {dof} must exceed dimension - 1 = {}",
            p as f64 - 1.0
        )));
    }
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        a[(i, i)] = (2.0 * gamma_sample(rng, (dof - i as f64) / 2.0, 1.0)?).sqrt();
        for j in 0..i {
            a[(i, j)] = std_normal(rng);
        }
    }
    Ok(a)
}

/// `Wishart(scale, dof)` with mean `dof * scale`, via the Bartlett
/// decomposition.
pub fn wishart_sample<R: Rng + ?Sized>(rng: &mut R, scale: &Spd, dof: f64) -> Result<Spd> {
    let a = bartlett(rng, scale.dim(), dof)?;
    let la = scale.chol_l() * a;
    Spd::new(&la * la.transpose())
}

/// Inverse of a `Wishart(inv_scale, dof)` draw.
///
/// The first argument is the scale of the Wishart being inverted, so
/// `E[draw] = inv_scale^{-1} / (dof - p - 1)`.
pub fn invwishart_sample<R: Rng + ?Sized>(rng: &mut R, inv_scale: &Spd, dof: f64) -> Result<Spd> {
    wishart_sample(rng, inv_scale, dof)?.inverse_spd()
}

/// Same law as `invwishart_sample(scatter^{-1}, dof)`, computed from the
/// scatter matrix directly: with `scatter = L L^T` the draw is
/// `L A^{-T} A^{-1} L^T`.
pub fn invwishart_from_scatter<R: Rng + ?Sized>(rng: &mut R, scatter: &Spd, dof: f64) -> Result<Spd> {
    let a = bartlett(rng, scatter.dim(), dof)?;
    let m = scatter.chol_l() * lower_inverse(&a).transpose();
    Spd::new(&m * m.transpose())
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const SQRT_2: f64 = std::f64::consts::SQRT_2;
/// Above this standardized bound the upper tail is sampled by rejection.
const TAIL_SWITCH: f64 = 3.0;

fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

fn norm_sf(x: f64) -> f64 {
    0.5 * erfc(x * FRAC_1_SQRT_2)
}

/// Quantile of the standard normal.
pub fn norm_quantile(p: f64) -> f64 {
    -SQRT_2 * erfc_inv(2.0 * p)
}

fn norm_isf(q: f64) -> f64 {
    SQRT_2 * erfc_inv(2.0 * q)
}

/// `normal(mean, 1)` conditioned on `(lo, hi)`; either bound may be infinite.
pub fn trunc_norm_sample<R: Rng + ?Sized>(rng: &mut R, mean: f64, lo: f64, hi: f64) -> Result<f64> {
    if lo.is_nan() || hi.is_nan() || !mean.is_finite() || !(lo < hi) {
        return Err(Error::EmptyInterval { lo, hi });
    }
    for _ in 0..16 {
        let x = mean + std_trunc(rng, lo - mean, hi - mean);
        if lo < x && x < hi {
            return Ok(x);
        }
    }
    // Interval narrower than the rounding error of `mean + x`.
    let mid = lo + 0.5 * (hi - lo);
    if lo < mid && mid < hi {
        Ok(mid)
    } else {
        Err(Error::EmptyInterval { lo, hi })
    }
}

fn std_trunc<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY && b == f64::INFINITY {
        std_normal(rng)
    } else if a >= 0.0 {
        upper_tail(rng, a, b)
    } else if b <= 0.0 {
        -upper_tail(rng, -b, -a)
    } else {
        let (pa, pb) = (norm_cdf(a), norm_cdf(b));
        let u = pa + (pb - pa) * rng.random::<f64>();
        norm_quantile(u).clamp(a, b)
    }
}

/// Standard normal restricted to `(a, b)` with `0 <= a < b`.
fn upper_tail<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    if a < TAIL_SWITCH {
        let (qa, qb) = (norm_sf(a), norm_sf(b));
        let u = qb + (qa - qb) * rng.random::<f64>();
        return norm_isf(u).clamp(a, b);
    }
    // Robert (1995): translated exponential proposal, truncated to (a, b).
    let alpha = 0.5 * (a + (a * a + 4.0).sqrt());
    let width_mass = -(-(alpha * (b - a))).exp_m1();
    loop {
        let u: f64 = rng.random();
        let x = a - (-u * width_mass).ln_1p() / alpha;
        let e: f64 = Exp1.sample(rng);
        if 0.5 * (x - alpha) * (x - alpha) <= e {
            return x;
        }
    }
}
