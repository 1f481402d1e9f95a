use std::sync::OnceLock;

use oprenew_core::correlate::{correlation_mc, sample_induced, CellSampler, McConfig, Observable};
use oprenew_core::fit::log_grid;
use oprenew_core::maps::{
    build_return_partition, induced_apply, skew_induced_apply, FiberMap, IntervalMapSpec, ReturnPartition,
    SkewProduct,
};
use oprenew_core::norms::{estimate_norms, LeafFunction, TestFamily};
use oprenew_core::renewal::{operator_renewal, pair_series, scalar_renewal};
use oprenew_core::tails::{fit_tail, renewal_constant, TailData};
use oprenew_core::transfer::{DiscretizedOperator, Grid, OperatorOptions};
use proptest::prelude::*;

const ALPHAS: [f64; 3] = [0.5, 1.0, 4.0 / 3.0];

fn partitions() -> &'static Vec<ReturnPartition> {
    static P: OnceLock<Vec<ReturnPartition>> = OnceLock::new();
    P.get_or_init(|| ALPHAS.iter().map(|&a| build_return_partition(&IntervalMapSpec::lsv(a).unwrap(), 2000).unwrap()).collect())
}

fn lsv_op() -> &'static (DiscretizedOperator, Vec<f64>) {
    static O: OnceLock<(DiscretizedOperator, Vec<f64>)> = OnceLock::new();
    O.get_or_init(|| {
        let part = build_return_partition(&IntervalMapSpec::lsv(4.0 / 3.0).unwrap(), 5000).unwrap();
        let op = DiscretizedOperator::build(&part, Grid::new(256).unwrap(), OperatorOptions { exact_depth: 128 }).unwrap();
        let h = op.stationary(1e-14, 10_000).unwrap();
        (op, h)
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn return_time_matches_partition(k in 0usize..3, t in 1e-9f64..1.0) {
        let part = &partitions()[k];
        let x = 0.5 + 0.5 * t;
        let (_, n) = induced_apply(&part.map, x, 10_000_000).unwrap();
        let from_cells = part.return_time(x).unwrap();
        if n as usize <= part.n_max {
            prop_assert_eq!(n as usize, from_cells);
        } else {
            prop_assert_eq!(from_cells, part.n_max + 1);
        }
    }

    #[test]
    fn skew_base_is_the_induced_map(k in 0usize..3, t in 1e-6f64..1.0, y in 0.0f64..=1.0) {
        let map = IntervalMapSpec::lsv(ALPHAS[k]).unwrap();
        let sp = SkewProduct::new(map.clone(), FiberMap::Stacked).unwrap();
        let x = 0.5 + 0.5 * t;
        let (base, n) = induced_apply(&map, x, 10_000_000).unwrap();
        let ((bx, by), m) = skew_induced_apply(&sp, x, y, 10_000_000).unwrap();
        prop_assert_eq!(base.to_bits(), bx.to_bits());
        prop_assert_eq!(n, m);
        prop_assert!((0.0..=1.0).contains(&by));
    }

    #[test]
    fn fibers_contract_by_half_per_return(t in 1e-3f64..1.0, y0 in 0.0f64..=1.0, y1 in 0.0f64..=1.0, returns in 1usize..12) {
        let sp = SkewProduct::new(IntervalMapSpec::lsv(4.0 / 3.0).unwrap(), FiberMap::Stacked).unwrap();
        let (mut a, mut b) = ((0.5 + 0.5 * t, y0), (0.5 + 0.5 * t, y1));
        for _ in 0..returns {
            a = skew_induced_apply(&sp, a.0, a.1, 100_000_000).unwrap().0;
            b = skew_induced_apply(&sp, b.0, b.1, 100_000_000).unwrap().0;
        }
        prop_assert_eq!(a.0, b.0);
        prop_assert!((a.1 - b.1).abs() <= (y0 - y1).abs() * 0.5f64.powi(returns as i32) + 1e-15);
    }

    #[test]
    fn tails_strictly_decrease(masses in prop::collection::vec(1e-6f64..1.0, 2..200)) {
        let total: f64 = masses.iter().sum();
        let p: Vec<f64> = masses.iter().map(|m| m / total).collect();
        let d = TailData::from_masses(p).unwrap();
        for n in 1..d.n_max() {
            prop_assert!(d.tail(n) < d.tail(n - 1));
        }
    }

    #[test]
    fn renewal_constant_is_symmetric(beta in 0.01f64..0.99) {
        let a = renewal_constant(beta).unwrap().d0;
        let b = renewal_constant(1.0 - beta).unwrap().d0;
        prop_assert!((a - b).abs() <= 1e-14);
    }

    #[test]
    fn pure_power_tail_is_recovered(beta in 0.3f64..0.95, ell in 0.2f64..2.0) {
        // masses with tail exactly ell n^-beta
        let n_max = 20_000;
        let tail = |n: usize| if n == 0 { 1.0 } else { (ell * (n as f64).powf(-beta)).min(1.0) };
        let masses: Vec<f64> = (1..=n_max).map(|n| tail(n - 1) - tail(n)).collect();
        let d = TailData::from_masses(masses).unwrap();
        let fit = fit_tail(&d, beta, 100, 10_000).unwrap();
        prop_assert!((fit.beta_hat - beta).abs() < 1e-6, "beta_hat {}", fit.beta_hat);
        prop_assert!((fit.c_pinned / ell - 1.0).abs() < 1e-6);
    }

    #[test]
    fn operator_conserves_mass_and_positivity(v in prop::collection::vec(0.0f64..1.0, 256)) {
        let (op, _) = lsv_op();
        let r = op.operator();
        let mut out = vec![0.0; 256];
        r.matvec(&v, &mut out);
        let (a, b): (f64, f64) = (v.iter().sum(), out.iter().sum());
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        prop_assert!(out.iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn slice_mass_bounded_by_cell_mass(v in prop::collection::vec(-1.0f64..1.0, 256), n in 1usize..2000) {
        let (op, h) = lsv_op();
        // mass leaving through slice n is at most sup|v / h| times p_n
        let vh: Vec<f64> = v.iter().zip(h).map(|(a, b)| a * b).collect();
        let mut out = vec![0.0; 256];
        op.apply_slice_add(n, &vh, &mut out);
        let mut hn = vec![0.0; 256];
        op.apply_slice_add(n, h, &mut hn);
        let pn: f64 = hn.iter().sum();
        let sup = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        prop_assert!(out.iter().sum::<f64>().abs() <= sup * pn * (1.0 + 1e-12) + 1e-300);
    }

    #[test]
    fn renewal_sequences_are_nonnegative_and_dominated(v in prop::collection::vec(0.0f64..1.0, 256)) {
        let (op, _) = lsv_op();
        let n = 60;
        let t = operator_renewal(op, &v, n).unwrap();
        let mass_v: f64 = v.iter().sum();
        let s = pair_series(&t, &vec![1.0; 256]);
        for k in 0..=n {
            prop_assert!(t[k].iter().all(|x| *x >= 0.0));
            // mass of the points that are in Y at time k
            prop_assert!(s[k] <= mass_v * (1.0 + 1e-12));
        }
    }

    #[test]
    fn truncation_only_lowers_scalar_renewal(masses in prop::collection::vec(0.0f64..1.0, 10..80), cut in 1usize..10) {
        let total: f64 = masses.iter().sum::<f64>() + 1e-9;
        let p: Vec<f64> = masses.iter().map(|m| m / total).collect();
        let full = scalar_renewal(&p, 100).unwrap();
        let short = scalar_renewal(&p[..p.len() - cut], 100).unwrap();
        for (a, b) in short.iter().zip(&full) {
            prop_assert!(*a <= *b + 1e-15);
        }
    }

    #[test]
    fn sampler_stays_on_the_induced_space(seed in 0u64..1000) {
        let (op, h) = lsv_op();
        let s = CellSampler::new(op.grid, h).unwrap();
        for (x, y) in sample_induced(&s, 500, seed) {
            prop_assert!(x > 0.5 && x <= 1.0);
            prop_assert!((0.0..=1.0).contains(&y));
        }
    }
}

fn leaf(values: &[f64]) -> LeafFunction {
    LeafFunction::new(4, 129, values.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn norm_estimates_grow_with_the_basis(values in prop::collection::vec(-1.0f64..1.0, 4 * 129)) {
        let h = leaf(&values);
        let mut last: Option<(f64, f64, f64)> = None;
        for levels in 1..=TestFamily::max_levels(129) {
            let fam = TestFamily::with_levels(12, levels, 129, 0.5).unwrap();
            let e = estimate_norms(&h, &fam, 2).unwrap();
            prop_assert!(e.weak <= e.strong_stable + 1e-12);
            if let Some((w, s, u)) = last {
                prop_assert!(e.weak >= w - 1e-14);
                prop_assert!(e.strong_stable >= s - 1e-14);
                prop_assert!(e.unstable >= u - 1e-14);
            }
            last = Some((e.weak, e.strong_stable, e.unstable));
        }
    }
}

#[test]
fn monte_carlo_is_seed_deterministic() {
    let (op, h) = lsv_op();
    let sp = SkewProduct::new(IntervalMapSpec::lsv(4.0 / 3.0).unwrap(), FiberMap::Stacked).unwrap();
    let obs = vec![
        Observable::bump("v", 0.55, 0.95, 1.0, vec![1.0, 1.0]).unwrap(),
        Observable::indicator_y("1Y"),
    ];
    let s = CellSampler::new(op.grid, h).unwrap();
    let cfg = McConfig { lags: log_grid(1, 200, 10), samples: 20_000, seed: 9, block_size: 3000 };
    let a = correlation_mc(&sp, &s, &obs, &[(0, 1), (1, 1)], &cfg).unwrap();
    let b = correlation_mc(&sp, &s, &obs, &[(0, 1), (1, 1)], &cfg).unwrap();
    for (x, y) in a.iter().zip(&b) {
        let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x.estimates), bits(&y.estimates));
        assert_eq!(bits(&x.std_errors), bits(&y.std_errors));
    }
    let other = correlation_mc(&sp, &s, &obs, &[(0, 1)], &McConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a[0].estimates, other[0].estimates);
}

#[test]
fn observables_vanish_off_y() {
    let v = Observable::bump("v", 0.55, 0.95, 2.0, vec![1.0, -3.0]).unwrap();
    for k in 0..=500 {
        let x = 0.5 * k as f64 / 500.0;
        assert_eq!(v.eval(x, 0.3), 0.0);
    }
    assert!(Observable::bump("bad", 0.4, 0.9, 1.0, vec![1.0]).is_err());
}
