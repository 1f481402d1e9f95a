// Values computed here by independent means: closed forms, statrs special
// functions, long orbits.

use approx::assert_relative_eq;
use oprenew_core::correlate::{sample_induced, CellSampler};
use oprenew_core::fit::{line_fit, log_grid};
use oprenew_core::maps::{
    boundary_sequence, build_return_partition, check_hyperbolicity, induced_apply, left_branch_preimage, lsv_apply,
    FiberMap, IntervalMapSpec, SkewProduct,
};
use oprenew_core::renewal::{operator_renewal, pair_series, scalar_renewal};
use oprenew_core::tails::{cell_masses, eigenvalue_prefactor, fit_tail, renewal_constant};
use oprenew_core::transfer::{DiscretizedOperator, Grid, OperatorOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::gamma;

fn induced(alpha: f64, n_max: usize, m: usize, depth: usize) -> (DiscretizedOperator, Vec<f64>) {
    let part = build_return_partition(&IntervalMapSpec::lsv(alpha).unwrap(), n_max).unwrap();
    let op = DiscretizedOperator::build(&part, Grid::new(m).unwrap(), OperatorOptions { exact_depth: depth }).unwrap();
    let h = op.stationary(1e-15, 20_000).unwrap();
    (op, h)
}

#[test]
fn d0_against_statrs_gamma() {
    for beta in [0.1, 0.25, 0.5, 0.6, 0.75, 0.9] {
        let d0 = renewal_constant(beta).unwrap().d0;
        assert_relative_eq!(d0, 1.0 / (gamma(beta) * gamma(1.0 - beta)), max_relative = 1e-12);
        assert_relative_eq!(eigenvalue_prefactor(beta, 0.7), gamma(1.0 - beta) * 0.7, max_relative = 1e-12);
    }
    assert_relative_eq!(renewal_constant(0.6).unwrap().d0, 0.302731, epsilon = 1e-6);
}

#[test]
fn preimage_of_one_half_is_the_quadratic_root() {
    // x (1 + 2x) = 1/2
    let root = (-1.0 + 5f64.sqrt()) / 4.0;
    assert!((left_branch_preimage(0.5, 1.0).unwrap() - root).abs() <= 1e-12);
    let part = build_return_partition(&IntervalMapSpec::lsv(1.0).unwrap(), 3).unwrap();
    let y2: Vec<_> = part.cells(2).collect();
    assert_eq!(y2.len(), 1);
    assert!((y2[0].lo() - (root + 1.0) / 2.0).abs() <= 1e-12);
    assert!((y2[0].hi() - 0.75).abs() <= 1e-15);
    assert!((y2[0].lo() - 0.6545085).abs() < 1e-7);
}

#[test]
fn a_point_of_y2() {
    assert_relative_eq!(lsv_apply(0.7, 1.0).unwrap(), 0.4, epsilon = 1e-15);
    let (x, n) = induced_apply(&IntervalMapSpec::lsv(1.0).unwrap(), 0.7, 100).unwrap();
    assert_eq!(n, 2);
    assert_relative_eq!(x, 0.72, epsilon = 1e-14);
}

#[test]
fn boundary_points_decay_like_n_to_minus_beta() {
    // dz/dn = -2^alpha z^(1 + alpha) gives z_n ~ (alpha 2^alpha n)^-beta, so
    // log z_n / log n itself sits near -0.83 at n = 1e5; the slope is -beta
    let alpha = 4.0 / 3.0;
    let beta = 1.0 / alpha;
    let z = boundary_sequence(alpha, 100_000).unwrap();
    assert!(z.windows(2).all(|w| w[1] < w[0] && w[1] > 0.0));
    let slope = (z[100_000] / z[10_000]).ln() / 10f64.ln();
    assert!((slope + beta).abs() < 0.02, "slope {slope}");
    let n = 100_000f64;
    assert_relative_eq!(z[100_000] * (alpha * 2f64.powf(alpha) * n).powf(beta), 1.0, max_relative = 0.01);
    let ratio = z[100_000].ln() / n.ln();
    let offset = -beta * (alpha * 2f64.powf(alpha)).ln() / n.ln();
    assert!((ratio - (-beta + offset)).abs() < 0.005, "log z_n / log n = {ratio}");
}

#[test]
fn cell_lengths_decay_like_n_to_minus_beta_minus_one() {
    let part = build_return_partition(&IntervalMapSpec::lsv(4.0 / 3.0).unwrap(), 100_000).unwrap();
    let len = part.lebesgue_lengths();
    let ns = log_grid(100, 100_000, 80);
    let lx: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ly: Vec<f64> = ns.iter().map(|&n| len[n - 1].ln()).collect();
    let (_, slope, _, _) = line_fit(&lx, &ly).unwrap();
    assert!((slope + 1.75).abs() < 0.03, "slope {slope}");
}

#[test]
fn truncated_mass_and_tail_exponents() {
    let (op, h) = induced(4.0 / 3.0, 100_000, 2048, 512);
    let d = cell_masses(&op, &h).unwrap();
    let kept: f64 = d.masses.iter().sum();
    assert!((0.99..=1.0 + 1e-12).contains(&kept), "retained {kept}");
    let fit = fit_tail(&d, 0.75, 100, 10_000).unwrap();
    assert!((fit.beta_hat - 0.75).abs() < 0.02);

    let (op, h) = induced(2.0, 100_000, 2048, 512);
    let fit = fit_tail(&cell_masses(&op, &h).unwrap(), 0.5, 100, 10_000).unwrap();
    assert!((fit.beta_hat - 0.5).abs() < 0.02, "beta_hat {}", fit.beta_hat);
}

/// `n` returns of the induced map from a Lebesgue-random start.
fn induced_orbit(map: &IntervalMapSpec, rng: &mut ChaCha8Rng, burn: usize, n: usize, mut visit: impl FnMut(f64)) {
    let mut x = 0.5 + 0.5 * rng.random::<f64>();
    for k in 0..burn + n {
        x = induced_apply(map, x, u64::MAX).unwrap().0;
        if k >= burn {
            visit(x);
        }
    }
}

#[test]
fn p1_matches_orbit_occupation() {
    // alpha = 1: {phi = 1} = (3/4, 1]
    let (op, h) = induced(1.0, 100_000, 1024, 512);
    let p1 = cell_masses(&op, &h).unwrap().mass(1);
    let map = IntervalMapSpec::lsv(1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batches: Vec<f64> = (0..200)
        .map(|_| {
            let mut hits = 0usize;
            induced_orbit(&map, &mut rng, 20, 2000, |x| hits += (x > 0.75) as usize);
            hits as f64 / 2000.0
        })
        .collect();
    let mean = batches.iter().sum::<f64>() / batches.len() as f64;
    let var = batches.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (batches.len() - 1) as f64;
    let se = (var / batches.len() as f64).sqrt();
    assert!((mean - p1).abs() <= 3.0 * se, "occupation {mean} +- {se}, p1 {p1}");
}

#[test]
fn stationary_vector_matches_orbit_histogram() {
    let (_, h) = induced(4.0 / 3.0, 100_000, 1024, 512);
    let total: f64 = h.iter().sum();
    let bins = 64;
    let per = 1024 / bins;
    let expect: Vec<f64> = h.chunks(per).map(|c| c.iter().sum::<f64>() / total).collect();
    let map = IntervalMapSpec::lsv(4.0 / 3.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts = vec![0usize; bins];
    let mut n = 0usize;
    // restart often: single returns can take very long
    for _ in 0..2000 {
        induced_orbit(&map, &mut rng, 10, 250, |x| {
            counts[(((x - 0.5) * 2.0 * bins as f64) as usize).min(bins - 1)] += 1;
            n += 1;
        });
    }
    let l1: f64 = counts.iter().zip(&expect).map(|(c, e)| (*c as f64 / n as f64 - e).abs()).sum();
    assert!(l1 <= 0.02, "L1 distance {l1}");
}

#[test]
fn sampler_passes_chi_square() {
    let (op, h) = induced(4.0 / 3.0, 10_000, 1024, 256);
    let s = CellSampler::new(op.grid, &h).unwrap();
    let total: f64 = h.iter().sum();
    let count = 1_000_000;
    let mut hist = vec![0usize; 1024];
    for (x, _) in sample_induced(&s, count, 11) {
        hist[op.grid.cell_of(x - 0.5)] += 1;
    }
    let chi2: f64 = hist
        .iter()
        .zip(&h)
        .map(|(&o, &m)| {
            let e = count as f64 * m / total;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    let p = 1.0 - ChiSquared::new(1023.0).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi2 {chi2}, p {p}");
}

#[test]
fn power_iteration_reaches_the_stationary_vector() {
    let (op, h) = induced(4.0 / 3.0, 100_000, 1024, 512);
    let r = op.operator();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut v: Vec<f64> = (0..1024).map(|_| rng.random::<f64>()).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    let hs: f64 = h.iter().sum();
    let mut w = vec![0.0; 1024];
    for _ in 0..200 {
        r.matvec(&v, &mut w);
        std::mem::swap(&mut v, &mut w);
    }
    let err = v.iter().zip(&h).map(|(a, b)| (a - b / hs).abs()).fold(0.0, f64::max);
    assert!(err < 1e-6, "{err}");
}

#[test]
fn operator_returns_differ_from_scalar_renewal_of_masses() {
    let (op, h) = induced(4.0 / 3.0, 10_000, 256, 128);
    let d = cell_masses(&op, &h).unwrap();
    let u = scalar_renewal(&d.masses, 10).unwrap();
    let v = vec![1.0 / 256.0; 256];
    let t = pair_series(&operator_renewal(&op, &v, 10).unwrap(), &vec![1.0; 256]);
    assert!((t[10] - u[10]).abs() > 1e-6, "{} vs {}", t[10], u[10]);
}

#[test]
fn skew_products_are_hyperbolic() {
    for map in [IntervalMapSpec::lsv(4.0 / 3.0).unwrap(), IntervalMapSpec::non_markov(4.0 / 3.0).unwrap()] {
        let sp = SkewProduct::new(map, FiberMap::Stacked).unwrap();
        let hy = check_hyperbolicity(&sp, 2000).unwrap();
        assert!(hy.holds && hy.max_contraction <= 0.5 + 1e-12 && hy.min_expansion > 1.0, "{hy:?}");
    }
}
