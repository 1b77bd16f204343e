use multiway::als::{als_from, random_factors, AlsConfig};
use multiway::dist::{invwishart_sample, std_normal, trunc_norm_sample};
use multiway::extensions::symmetric_compose;
use multiway::linalg::spd_solve;
use multiway::{FactorSet, MultiwayArray, RngStream, Spd};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn dims_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 2..5)
}

fn factors(dims: &[usize], rank: usize, seed: u64) -> FactorSet {
    let mut rng = RngStream::new(seed);
    random_factors(dims, rank, &mut rng).unwrap()
}

fn close(a: &MultiwayArray, b: &MultiwayArray, rel: f64) -> bool {
    let scale = a.sq_norm().sqrt().max(1e-300);
    a.sq_dist(b).unwrap().sqrt() <= rel * scale
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn compose_is_multilinear(dims in dims_strategy(), seed in any::<u64>(), c in 0.1f64..10.0, r in 0usize..3) {
        let f = factors(&dims, 3, seed);
        let mut g = f.clone();
        g.scale_column(0, r, c);
        g.scale_column(dims.len() - 1, r, 1.0 / c);
        prop_assert!(close(&f.compose(), &g.compose(), 1e-12));
    }

    #[test]
    fn joint_column_permutation_leaves_compose_unchanged(dims in dims_strategy(), seed in any::<u64>()) {
        let f = factors(&dims, 3, seed);
        let perm = [2usize, 0, 1];
        let permuted: Vec<DMatrix<f64>> = f
            .factors()
            .iter()
            .map(|u| DMatrix::from_columns(&perm.iter().map(|&r| u.column(r)).collect::<Vec<_>>()))
            .collect();
        let g = FactorSet::new(permuted).unwrap();
        prop_assert!(close(&f.compose(), &g.compose(), 1e-12));
    }

    #[test]
    fn two_way_compose_is_matrix_product(m in 1usize..7, n in 1usize..7, rank in 1usize..4, seed in any::<u64>()) {
        let f = factors(&[m, n], rank, seed);
        let want = f.factor(0) * f.factor(1).transpose();
        let got = f.compose();
        for i in 0..m {
            for j in 0..n {
                prop_assert_eq!(got.get(&[i, j]).unwrap(), want[(i, j)]);
            }
        }
    }

    #[test]
    fn fibers_round_trip(dims in dims_strategy(), seed in any::<u64>(), mode_pick in 0usize..8) {
        let mut rng = RngStream::new(seed);
        let a = MultiwayArray::from_fn(dims.clone(), |_| std_normal(&mut rng)).unwrap();
        let mode = mode_pick % dims.len();
        let f = a.fibers(mode).unwrap();
        let b = MultiwayArray::from_fibers(dims, mode, &f).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn cholesky_solve_residual(p in 1usize..8, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        let x = DMatrix::from_fn(p + 3, p, |_, _| std_normal(&mut rng));
        let a = x.transpose() * &x + DMatrix::identity(p, p) * 1e-3;
        let b = DVector::from_fn(p, |_, _| std_normal(&mut rng));
        let sol = spd_solve(&a, &b).unwrap();
        prop_assert!((&a * sol - &b).norm() <= 1e-8 * b.norm());
    }

    #[test]
    fn invwishart_draws_are_spd(p in 1usize..6, extra in 0.5f64..20.0, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        let x = DMatrix::from_fn(p + 2, p, |_, _| std_normal(&mut rng));
        let s = Spd::new(x.transpose() * &x + DMatrix::identity(p, p)).unwrap();
        let draw = invwishart_sample(&mut rng, &s, p as f64 - 1.0 + extra).unwrap();
        prop_assert!(draw.matrix().iter().all(|v| v.is_finite()));
        prop_assert!(Spd::new(draw.into_matrix()).is_ok());
    }

    #[test]
    fn als_rss_never_increases(dims in prop::collection::vec(2usize..6, 3), rank in 1usize..5, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        let a = MultiwayArray::from_fn(dims.clone(), |_| std_normal(&mut rng)).unwrap();
        let init = random_factors(&dims, rank, &mut rng).unwrap();
        let cfg = AlsConfig { max_sweeps: 200, ..AlsConfig::new(rank) };
        let r = als_from(&a, init, &cfg).unwrap();
        let tol = 1e-9 * r.rss_trace[0];
        for w in r.rss_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + tol, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn masked_values_never_read(seed in any::<u64>(), holes in prop::collection::btree_set(0usize..60, 1..10)) {
        let mut rng = RngStream::new(seed);
        let dims = vec![5, 4, 3];
        let mut a = MultiwayArray::from_fn(dims.clone(), |_| std_normal(&mut rng)).unwrap();
        for &h in &holes {
            a.data_mut()[h] = f64::NAN;
        }
        let a = a.with_mask(holes.iter().copied()).unwrap();
        let init = random_factors(&dims, 2, &mut rng).unwrap();
        let r = als_from(&a, init, &AlsConfig { max_sweeps: 50, ..AlsConfig::new(2) }).unwrap();
        prop_assert!(r.rss.is_finite());
        prop_assert!(r.factors.factors().iter().all(|u| u.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn truncated_normal_stays_inside(mean in -30.0f64..30.0, lo in -10.0f64..10.0, width in 1e-3f64..5.0, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        for _ in 0..20 {
            let z = trunc_norm_sample(&mut rng, mean, lo, lo + width).unwrap();
            prop_assert!(z > lo && z < lo + width, "{z} outside ({lo}, {})", lo + width);
        }
    }

    #[test]
    fn symmetric_compose_is_symmetric(m in 2usize..7, rank in 1usize..4, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        let u = DMatrix::from_fn(m, rank, |_, _| std_normal(&mut rng));
        let v = DVector::from_fn(rank, |_, _| std_normal(&mut rng));
        let g = symmetric_compose(&u, &v).unwrap();
        for i in 0..m {
            prop_assert!(!g.is_observed(g.linear_index(&[i, i]).unwrap()));
            for j in 0..m {
                prop_assert_eq!(g.get(&[i, j]).unwrap(), g.get(&[j, i]).unwrap());
            }
        }
    }
}
