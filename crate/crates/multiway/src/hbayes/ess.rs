use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};

/// Effective sample size by Geyer's initial positive sequence: lag
/// autocorrelations are summed in pairs `(rho_2k + rho_2k+1)` until the
/// first nonpositive pair. A constant trace has ESS `n`; the estimate is
/// capped at `n log10 n` for strongly antithetic traces.
pub fn ess(trace: &[f64]) -> Result<f64> {
    let n = trace.len();
    if n < 10 {
        return Err(Error::InvalidParameter(format!("ESS needs at least 10 values, got {n}")));
    }
    if trace.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("trace has non-finite values".into()));
    }
    let nf = n as f64;
    let acov = autocovariance(trace);
    if acov[0] <= 0.0 {
        return Ok(nf);
    }
    let rho = |t: usize| if t < n { acov[t] / acov[0] } else { 0.0 };
    let mut tau = -1.0;
    let mut k = 0;
    while 2 * k < n {
        let pair = rho(2 * k) + rho(2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        k += 1;
    }
    let cap = nf * nf.log10();
    Ok(if tau > 0.0 { (nf / tau).min(cap) } else { cap })
}

/// Biased (divide-by-n) autocovariance at every lag, via zero-padded FFT.
fn autocovariance(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
    buf.resize(size, Complex::new(0.0, 0.0));
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    let scale = (size * n) as f64;
    buf[..n].iter().map(|c| c.re / scale).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{std_normal, RngStream};

    #[test]
    fn fft_autocovariance_matches_direct() {
        let mut rng = RngStream::new(1);
        let x: Vec<f64> = (0..37).map(|_| std_normal(&mut rng)).collect();
        let n = x.len();
        let mean = x.iter().sum::<f64>() / n as f64;
        let fast = autocovariance(&x);
        for t in 0..n {
            let direct = (0..n - t).map(|i| (x[i] - mean) * (x[i + t] - mean)).sum::<f64>() / n as f64;
            assert!((fast[t] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn iid_trace() {
        let mut rng = RngStream::new(2);
        let x: Vec<f64> = (0..10_000).map(|_| std_normal(&mut rng)).collect();
        let e = ess(&x).unwrap();
        assert!((8_000.0..=12_000.0).contains(&e), "{e}");
    }

    #[test]
    fn ar1_trace() {
        let mut rng = RngStream::new(3);
        let rho: f64 = 0.9;
        let mut x = vec![std_normal(&mut rng) / (1.0 - rho * rho).sqrt()];
        for _ in 1..10_000 {
            let prev = *x.last().unwrap();
            x.push(rho * prev + std_normal(&mut rng));
        }
        let expect = 10_000.0 * (1.0 - rho) / (1.0 + rho);
        let e = ess(&x).unwrap();
        assert!((e - expect).abs() < 0.3 * expect, "{e} vs {expect}");
    }

    #[test]
    fn antithetic_and_constant() {
        let alt: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert!(ess(&alt).unwrap() > 100.0);
        assert_eq!(ess(&[2.5; 50]).unwrap(), 50.0);
        assert!(ess(&[1.0; 9]).is_err());
    }
}
