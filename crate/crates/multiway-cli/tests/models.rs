use multiway::als::{als_fit, AlsConfig};
use multiway::extensions::means::means_array;
use multiway::extensions::probit::ProbitState;
use multiway::extensions::{means_fit, probit_fit, probit_gibbs_sweep, MeansConfig, OrdinalPanel, ProbitConfig, ProbitPrior};
use multiway::RngStream;
use multiway_cli::sim::{crosstab_sample, panel_sample};
use statrs::function::erf::erfc;

fn phi_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Ordered-probit log-likelihood with parameters `(beta, c_1, log gaps)`.
fn loglik(panel: &OrdinalPanel, par: &[f64]) -> f64 {
    let q = panel.q();
    let mut cut = vec![par[q]];
    for g in &par[q + 1..] {
        cut.push(cut.last().unwrap() + g.exp());
    }
    let mut ll = 0.0;
    for (n, c) in panel.cells().iter().enumerate() {
        let eta: f64 = (0..q).map(|j| panel.x()[(n, j)] * par[j]).sum();
        let lo = if c.y == 0 { f64::NEG_INFINITY } else { cut[c.y - 1] };
        let hi = if c.y == cut.len() { f64::INFINITY } else { cut[c.y] };
        ll += (phi_cdf(hi - eta) - phi_cdf(lo - eta)).max(1e-300).ln();
    }
    ll
}

/// Gradient ascent with numerical gradients and backtracking.
fn mle(panel: &OrdinalPanel) -> Vec<f64> {
    let q = panel.q();
    let n_cut = panel.n_categories() - 1;
    let mut par = vec![0.0; q + n_cut];
    par[q] = -1.0;
    let mut f = loglik(panel, &par);
    for _ in 0..5000 {
        let h = 1e-6;
        let grad: Vec<f64> = (0..par.len())
            .map(|i| {
                let mut a = par.clone();
                let mut b = par.clone();
                a[i] += h;
                b[i] -= h;
                (loglik(panel, &a) - loglik(panel, &b)) / (2.0 * h)
            })
            .collect();
        let gn: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gn < 1e-7 {
            break;
        }
        let mut step = 1.0 / gn.max(1.0);
        loop {
            let cand: Vec<f64> = par.iter().zip(&grad).map(|(p, g)| p + step * g).collect();
            let fc = loglik(panel, &cand);
            if fc > f {
                par = cand;
                f = fc;
                break;
            }
            step /= 2.0;
            if step < 1e-14 {
                return par;
            }
        }
    }
    par
}

#[test]
fn probit_posterior_mean_matches_mle_without_factors() {
    let mut rng = RngStream::new(41);
    let s = panel_sample(12, 4, 1, &[0.8, -0.5], &[-0.5, 0.6], 0, 0.0, &mut rng).unwrap();
    let panel = s.panel;
    let cfg = ProbitConfig {
        rank: 0,
        n_burn: 500,
        n_iter: 10_000,
        thin: 5,
        seed: 3,
        ..ProbitConfig::default()
    };
    let fit = probit_fit(&panel, &cfg).unwrap();
    let m = mle(&panel);
    for (j, &mle_j) in m.iter().take(panel.q()).enumerate() {
        let diff = (fit.beta_mean[j] - mle_j).abs();
        assert!(
            diff < 3.0 * fit.beta_sd[j],
            "coef {j}: posterior {} (sd {}) vs mle {mle_j}",
            fit.beta_mean[j],
            fit.beta_sd[j],
        );
    }
}

#[test]
fn latent_draws_stay_in_their_category() {
    let mut rng = RngStream::new(8);
    let s = panel_sample(8, 3, 2, &[0.5], &[-1.0, 0.0, 1.0, 2.0], -3, 1.0, &mut rng).unwrap();
    let prior = ProbitPrior::new(2, 1.0);
    let mut state = ProbitState::initial(&s.panel, &prior, &mut rng).unwrap();
    for _ in 0..200 {
        probit_gibbs_sweep(&mut rng, &s.panel, &mut state, &prior).unwrap();
        assert!(state.cutoffs.windows(2).all(|w| w[0] < w[1]));
        for (n, c) in s.panel.cells().iter().enumerate() {
            assert_eq!(state.category_of(state.z[n]), c.y);
        }
        let z = state.latent_array(&s.panel).unwrap();
        for c in s.panel.cells() {
            assert_eq!(z.get(&[c.i, c.j, c.t]).unwrap(), z.get(&[c.j, c.i, c.t]).unwrap());
        }
    }
}

#[test]
fn means_model_beats_least_squares_on_cell_means() {
    // Same data for both: the model fit on raw observations, the baseline on
    // empirical cell means with empty cells masked.
    let levels = [5, 4, 3];
    let p = 3;
    let n_rep = 10;
    let (mut sum_hb, mut sum_ls, mut wins) = (0.0, 0.0, 0);
    for seed in 1..=n_rep as u64 {
        let mut rng = RngStream::new(seed);
        let s = crosstab_sample(&levels, p, 2, 0.05, 1.0, 8, &mut rng).unwrap();
        let truth = means_array(&levels, &s.beta).unwrap();
        let cfg = MeansConfig {
            rank: 2,
            n_burn: 1000,
            n_iter: 4000,
            thin: 5,
            seed,
            standardize: false,
            ..MeansConfig::default()
        };
        let fit = means_fit(&s.data, &cfg).unwrap();
        let hb = fit.b_hat.compose();
        let summary = s.data.summary();
        let mut ybar = means_array(&levels, &summary.means).unwrap();
        let cells: usize = levels.iter().product();
        for (c, &n) in summary.counts.iter().enumerate() {
            if n == 0 {
                for j in 0..p {
                    ybar.mask_cell(c + cells * j).unwrap();
                }
            }
        }
        let ls = als_fit(&ybar, &AlsConfig::new(2).with_seed(seed)).unwrap().theta();
        let err_hb = hb.sq_dist(&truth).unwrap() / truth.sq_norm();
        let err_ls = truth.sq_dist(&ls).unwrap() / truth.sq_norm();
        println!("seed {seed}: model {err_hb:.4} least squares {err_ls:.4}");
        sum_hb += err_hb;
        sum_ls += err_ls;
        wins += (err_hb < err_ls) as usize;
    }
    assert!(sum_hb < sum_ls, "mean error {} vs {}", sum_hb / n_rep as f64, sum_ls / n_rep as f64);
    assert!(2 * wins > n_rep, "{wins}/{n_rep}");
}
