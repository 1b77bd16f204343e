use std::io::Write;

use serde::{Deserialize, Serialize};

use super::sampler::{gibbs_sweep_flat, gibbs_sweep_hier, neg2_loglik};
use super::{balance_columns, HierPrior, HierarchicalState, PsiScatter, SigmaPrior};
use crate::als::{als_fit, AlsConfig, AlsResult};
use crate::array::{FactorSet, MultiwayArray};
use crate::dist::RngStream;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainMode {
    #[default]
    Hierarchical,
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    pub rank: usize,
    pub n_burn: usize,
    pub n_iter: usize,
    pub thin: usize,
    pub mode: ChainMode,
    /// Prior variance of each factor entry in flat mode.
    pub flat_tau2: f64,
    pub psi_scatter: PsiScatter,
    pub seed: u64,
    /// Random starts of the least-squares fit used for initialization and
    /// the unit-information prior.
    pub als_starts: usize,
    pub keep_factors: bool,
    pub keep_theta: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            rank: 1,
            n_burn: 1000,
            n_iter: 10_000,
            thin: 1,
            mode: ChainMode::Hierarchical,
            flat_tau2: 100.0,
            psi_scatter: PsiScatter::default(),
            seed: 0,
            als_starts: 20,
            keep_factors: false,
            keep_theta: false,
        }
    }
}

impl ChainConfig {
    pub fn new(rank: usize) -> Self {
        ChainConfig {
            rank,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidParameter("rank must be at least 1".into()));
        }
        if self.thin == 0 {
            return Err(Error::InvalidParameter("thin must be at least 1".into()));
        }
        if self.n_iter / self.thin == 0 {
            return Err(Error::EmptyChain(format!(
                "{} iterations thinned by {} save nothing",
                self.n_iter, self.thin
            )));
        }
        Ok(())
    }

    pub fn saved_count(&self) -> usize {
        self.n_iter / self.thin.max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sampler {
    Hierarchical(HierPrior),
    Flat { tau2: f64, sigma: SigmaPrior },
}

impl Sampler {
    pub fn sweep(&self, rng: &mut RngStream, a: &MultiwayArray, state: &mut HierarchicalState) -> Result<MultiwayArray> {
        match self {
            Sampler::Hierarchical(prior) => gibbs_sweep_hier(rng, a, state, prior),
            Sampler::Flat { tau2, sigma } => gibbs_sweep_flat(rng, a, state, *tau2, sigma),
        }
    }

    pub fn mode(&self) -> ChainMode {
        match self {
            Sampler::Hierarchical(_) => ChainMode::Hierarchical,
            Sampler::Flat { .. } => ChainMode::Flat,
        }
    }
}

/// Scalar summaries recorded for every saved iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub sigma2: f64,
    pub theta_norm2: f64,
    pub neg2loglik: f64,
}

#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub dims: Vec<usize>,
    pub rank: usize,
    pub mode: ChainMode,
    pub n_burn: usize,
    pub n_iter: usize,
    pub thin: usize,
    pub theta_sum: Vec<f64>,
    pub theta_sumsq: Vec<f64>,
    pub trace: Vec<TraceRow>,
    pub factor_draws: Vec<FactorSet>,
    pub theta_draws: Vec<Vec<f64>>,
    pub final_state: HierarchicalState,
}

#[derive(Debug, Serialize)]
struct ChainMeta<'a> {
    dims: &'a [usize],
    rank: usize,
    mode: ChainMode,
    n_burn: usize,
    n_iter: usize,
    thin: usize,
    count: usize,
    trace_columns: [&'static str; 4],
    final_sigma2: f64,
}

impl ChainOutput {
    pub fn new(dims: Vec<usize>, cfg: &ChainConfig, mode: ChainMode, init: HierarchicalState) -> Self {
        let n: usize = dims.iter().product();
        ChainOutput {
            rank: init.rank(),
            mode,
            n_burn: cfg.n_burn,
            n_iter: cfg.n_iter,
            thin: cfg.thin,
            theta_sum: vec![0.0; n],
            theta_sumsq: vec![0.0; n],
            trace: Vec::with_capacity(cfg.saved_count()),
            factor_draws: Vec::new(),
            theta_draws: Vec::new(),
            final_state: init,
            dims,
        }
    }

    pub fn count(&self) -> usize {
        self.trace.len()
    }

    /// Adds one saved draw: `rss` is the residual sum of squares of `theta`
    /// over the `n_obs` observed cells.
    pub fn record(&mut self, iteration: usize, theta: &MultiwayArray, sigma2: f64, rss: f64, n_obs: usize) {
        for ((s, q), &t) in self.theta_sum.iter_mut().zip(self.theta_sumsq.iter_mut()).zip(theta.data()) {
            *s += t;
            *q += t * t;
        }
        self.trace.push(TraceRow {
            iteration,
            sigma2,
            theta_norm2: theta.data().iter().map(|t| t * t).sum(),
            neg2loglik: neg2_loglik(rss, n_obs, sigma2),
        });
    }

    pub fn posterior_theta(&self) -> Result<MultiwayArray> {
        let count = self.count();
        if count == 0 {
            return Err(Error::EmptyChain("no saved iterations".into()));
        }
        let c = count as f64;
        MultiwayArray::new(self.dims.clone(), self.theta_sum.iter().map(|s| s / c).collect())
    }

    /// Elementwise posterior variance of `Theta`.
    pub fn posterior_var(&self) -> Result<MultiwayArray> {
        let mean = self.posterior_theta()?;
        let c = self.count() as f64;
        let var = self
            .theta_sumsq
            .iter()
            .zip(mean.data())
            .map(|(q, m)| (q / c - m * m).max(0.0))
            .collect();
        MultiwayArray::new(self.dims.clone(), var)
    }

    pub fn sigma2_trace(&self) -> Vec<f64> {
        self.trace.iter().map(|t| t.sigma2).collect()
    }

    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.trace {
            out.serialize(row).map_err(|e| Error::Io(e.into()))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn metadata_json(&self) -> Result<String> {
        let meta = ChainMeta {
            dims: &self.dims,
            rank: self.rank,
            mode: self.mode,
            n_burn: self.n_burn,
            n_iter: self.n_iter,
            thin: self.thin,
            count: self.count(),
            trace_columns: ["iteration", "sigma2", "theta_norm2", "neg2loglik"],
            final_sigma2: self.final_state.sigma2,
        };
        Ok(serde_json::to_string_pretty(&meta)?)
    }
}

pub fn posterior_theta(c: &ChainOutput) -> Result<MultiwayArray> {
    c.posterior_theta()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dic {
    pub dic: f64,
    /// Effective number of parameters.
    pub p_d: f64,
    pub d_bar: f64,
    pub d_hat: f64,
    pub sigma2_hat: f64,
}

/// DIC with the plug-in at the posterior-mean array and `sigma^2 = RSS / n`.
pub fn dic(c: &ChainOutput, a: &MultiwayArray) -> Result<Dic> {
    let theta_hat = c.posterior_theta()?;
    let sigma2_hat = a.sq_dist(&theta_hat)? / a.n_observed() as f64;
    dic_with(c, a, &theta_hat, sigma2_hat)
}

pub fn dic_with(c: &ChainOutput, a: &MultiwayArray, theta_hat: &MultiwayArray, sigma2_hat: f64) -> Result<Dic> {
    if c.trace.is_empty() {
        return Err(Error::EmptyChain("no log-likelihood trace".into()));
    }
    if !(sigma2_hat > 0.0) {
        return Err(Error::InvalidParameter(format!("plug-in variance must be positive, got {sigma2_hat}")));
    }
    let d_bar = c.trace.iter().map(|t| t.neg2loglik).sum::<f64>() / c.trace.len() as f64;
    let d_hat = neg2_loglik(a.sq_dist(theta_hat)?, a.n_observed(), sigma2_hat);
    let p_d = d_bar - d_hat;
    Ok(Dic {
        dic: d_bar + p_d,
        p_d,
        d_bar,
        d_hat,
        sigma2_hat,
    })
}

/// Sampler and starting state from a least-squares fit: the chain starts at
/// the column-balanced fit with `sigma^2` at its residual mean square, and
/// the hierarchical prior is the unit-information prior of that fit.
pub fn prepare_chain(a: &MultiwayArray, cfg: &ChainConfig, fit: &AlsResult) -> Result<(Sampler, HierarchicalState)> {
    let mut prior = HierPrior::unit_information(a, fit)?;
    prior.psi_scatter = cfg.psi_scatter;
    let n = a.n_observed().max(1) as f64;
    let floor = 1e-12 * (a.sq_norm() / n).max(1.0);
    let sigma2 = (fit.rss / n).max(floor);
    if prior.sigma.sigma0_sq <= 0.0 {
        prior.sigma.sigma0_sq = floor;
    }
    let init = HierarchicalState::new(balance_columns(&fit.factors), prior.tau0_sq, sigma2)?;
    let sampler = match cfg.mode {
        ChainMode::Hierarchical => Sampler::Hierarchical(prior),
        ChainMode::Flat => Sampler::Flat {
            tau2: cfg.flat_tau2,
            sigma: prior.sigma,
        },
    };
    Ok((sampler, init))
}

/// Runs a chain initialized at the best of `cfg.als_starts` least-squares fits.
pub fn run_chain(a: &MultiwayArray, cfg: &ChainConfig) -> Result<ChainOutput> {
    cfg.validate()?;
    let als_cfg = AlsConfig {
        n_starts: cfg.als_starts,
        ..AlsConfig::new(cfg.rank).with_seed(cfg.seed)
    };
    let fit = als_fit(a, &als_cfg)?;
    let (sampler, init) = prepare_chain(a, cfg, &fit)?;
    let mut rng = RngStream::new(cfg.seed).substream(&[0x0063_6861_696e]);
    run_chain_from(a, cfg, &sampler, init, &mut rng)
}

pub fn run_chain_from(
    a: &MultiwayArray,
    cfg: &ChainConfig,
    sampler: &Sampler,
    init: HierarchicalState,
    rng: &mut RngStream,
) -> Result<ChainOutput> {
    cfg.validate()?;
    if init.factors.dims() != a.dims() {
        return Err(Error::Shape(format!(
            "initial factors {:?} for an array of dims {:?}",
            init.factors.dims(),
            a.dims()
        )));
    }
    let n_obs = a.n_observed();
    let mut out = ChainOutput::new(a.dims().to_vec(), cfg, sampler.mode(), init.clone());
    let mut state = init;
    for t in 1..=cfg.n_burn + cfg.n_iter {
        let theta = sampler.sweep(rng, a, &mut state)?;
        if t <= cfg.n_burn || !(t - cfg.n_burn).is_multiple_of(cfg.thin) {
            continue;
        }
        let rss = a.sq_dist(&theta)?;
        out.record(t - cfg.n_burn, &theta, state.sigma2, rss, n_obs);
        if cfg.keep_factors {
            out.factor_draws.push(state.factors.clone());
        }
        if cfg.keep_theta {
            out.theta_draws.push(theta.into_data());
        }
    }
    out.final_state = state;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::std_normal;

    fn noisy_rank_one(seed: u64) -> MultiwayArray {
        let mut rng = RngStream::new(seed);
        let f = FactorSet::from_fn(&[5, 4, 3], 1, |_, _, _| std_normal(&mut rng)).unwrap();
        let theta = f.compose();
        MultiwayArray::from_fn(vec![5, 4, 3], |idx| theta.get(idx).unwrap() + 0.3 * std_normal(&mut rng)).unwrap()
    }

    fn short(rank: usize) -> ChainConfig {
        ChainConfig {
            n_burn: 50,
            n_iter: 200,
            ..ChainConfig::new(rank)
        }
    }

    #[test]
    fn saved_count_follows_thinning() {
        let cfg = ChainConfig {
            n_burn: 2000,
            n_iter: 20_000,
            thin: 10,
            ..ChainConfig::new(1)
        };
        assert_eq!(cfg.saved_count(), 2000);
        let a = noisy_rank_one(1);
        let cfg = ChainConfig {
            n_burn: 5,
            n_iter: 23,
            thin: 4,
            ..ChainConfig::new(1)
        };
        let out = run_chain(&a, &cfg).unwrap();
        assert_eq!(out.count(), 5);
        assert_eq!(out.trace.iter().map(|t| t.iteration).collect::<Vec<_>>(), vec![4, 8, 12, 16, 20]);
    }

    #[test]
    fn empty_chain_is_an_error() {
        let a = noisy_rank_one(1);
        let cfg = ChainConfig {
            n_iter: 0,
            ..short(1)
        };
        assert!(matches!(run_chain(&a, &cfg), Err(Error::EmptyChain(_))));
    }

    #[test]
    fn streaming_mean_matches_stored_draws() {
        let a = noisy_rank_one(2);
        let cfg = ChainConfig {
            keep_theta: true,
            ..short(2)
        };
        let out = run_chain(&a, &cfg).unwrap();
        let mean = out.posterior_theta().unwrap();
        let c = out.theta_draws.len() as f64;
        for (i, &m) in mean.data().iter().enumerate() {
            let mut s = 0.0;
            for d in &out.theta_draws {
                s += d[i];
            }
            assert_eq!(m, s / c);
        }
    }

    #[test]
    fn single_draw_and_degenerate_chain() {
        let a = noisy_rank_one(3);
        let f = FactorSet::from_fn(&[5, 4, 3], 1, |k, i, _| (k + i) as f64 * 0.5 - 1.0).unwrap();
        let theta = f.compose();
        let rss = a.sq_dist(&theta).unwrap();
        let n = a.n_observed();
        let sigma2 = rss / n as f64;
        let state = HierarchicalState::new(f, 1.0, sigma2).unwrap();
        let mut out = ChainOutput::new(a.dims().to_vec(), &short(1), ChainMode::Flat, state);
        out.record(1, &theta, sigma2, rss, n);
        assert_eq!(out.posterior_theta().unwrap().data(), theta.data());
        for t in 2..=10 {
            out.record(t, &theta, sigma2, rss, n);
        }
        let mean = out.posterior_theta().unwrap();
        for (x, y) in mean.data().iter().zip(theta.data()) {
            assert!((x - y).abs() < 1e-14);
        }
        let d = dic(&out, &a).unwrap();
        assert!(d.p_d.abs() < 1e-9 * d.d_bar.abs());
    }

    #[test]
    fn effective_parameters_nonnegative() {
        for (seed, mode) in [(4, ChainMode::Hierarchical), (5, ChainMode::Flat)] {
            let a = noisy_rank_one(seed);
            for rank in 1..=3 {
                let cfg = ChainConfig {
                    mode,
                    seed,
                    ..short(rank)
                };
                let out = run_chain(&a, &cfg).unwrap();
                let d = dic(&out, &a).unwrap();
                assert!(d.p_d >= -1e-6 * d.d_bar.abs(), "rank {rank}: {d:?}");
                assert!((d.dic - (d.d_bar + d.p_d)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn chain_is_deterministic() {
        let a = noisy_rank_one(6);
        let x = run_chain(&a, &short(2)).unwrap();
        let y = run_chain(&a, &short(2)).unwrap();
        assert_eq!(x.theta_sum, y.theta_sum);
        assert_eq!(x.trace, y.trace);
    }

    #[test]
    fn trace_csv_and_metadata() {
        let a = noisy_rank_one(7);
        let out = run_chain(
            &a,
            &ChainConfig {
                n_iter: 3,
                ..short(1)
            },
        )
        .unwrap();
        let mut buf = Vec::new();
        out.write_trace_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "iteration,sigma2,theta_norm2,neg2loglik");
        assert_eq!(text.lines().count(), 4);
        let meta: serde_json::Value = serde_json::from_str(&out.metadata_json().unwrap()).unwrap();
        assert_eq!(meta["count"], 3);
        assert_eq!(meta["mode"], "hierarchical");
    }
}
