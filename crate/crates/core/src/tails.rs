//! Return-time distribution under the invariant measure on Y and the
//! constants of its regularly varying tail.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::fit::{least_squares, line_fit, log_grid};
use crate::math::{self, KahanSum};
use crate::transfer::DiscretizedOperator;

/// Masses `p_n = mu_Y(phi = n)` for `n = 1..=n_max`, plus the lumped rest.
#[derive(Debug, Clone, PartialEq)]
pub struct TailData {
    /// `masses[n - 1] = p_n`
    pub masses: Vec<f64>,
    /// `mu_Y(phi > n_max)`
    pub overflow: f64,
    /// `tails[n] = mu_Y(phi > n)` for `n = 0..=n_max`
    pub tails: Vec<f64>,
    /// Fraction of mass carried by return times up to `n_max`.
    pub coverage: f64,
    /// Coverage is below 99.9%.
    pub low_coverage: bool,
}

impl TailData {
    pub fn n_max(&self) -> usize {
        self.masses.len()
    }

    pub fn mass(&self, n: usize) -> f64 {
        if n == 0 || n > self.masses.len() {
            0.0
        } else {
            self.masses[n - 1]
        }
    }

    pub fn tail(&self, n: usize) -> f64 {
        if n < self.tails.len() {
            self.tails[n]
        } else {
            0.0
        }
    }

    /// `sum_n n p_n`, counting the overflow at `n_max + 1`.
    pub fn mean_return_time(&self) -> f64 {
        let mut s = KahanSum::new();
        for (k, p) in self.masses.iter().enumerate() {
            s.add((k + 1) as f64 * p);
        }
        s.add((self.masses.len() + 1) as f64 * self.overflow);
        s.value()
    }

    /// Build from masses given directly (the overflow is whatever is missing
    /// from one).
    pub fn from_masses(masses: Vec<f64>) -> Result<Self> {
        if masses.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
            bail!(InvalidParameter, "masses must be finite and non-negative");
        }
        let total = math::kahan_sum(masses.iter().copied());
        if total > 1.0 + 1e-12 {
            bail!(InvalidParameter, "masses sum to {total} > 1");
        }
        let overflow = (1.0 - total).max(0.0);
        Ok(Self::assemble(masses, overflow))
    }

    fn assemble(masses: Vec<f64>, overflow: f64) -> Self {
        let n_max = masses.len();
        let mut tails = alloc::vec![0.0; n_max + 1];
        let mut acc = KahanSum::new();
        acc.add(overflow);
        tails[n_max] = acc.value();
        for n in (0..n_max).rev() {
            acc.add(masses[n]);
            tails[n] = acc.value();
        }
        let coverage = 1.0 - overflow / tails[0].max(f64::MIN_POSITIVE);
        Self { masses, overflow, tails, coverage, low_coverage: coverage < 0.999 }
    }
}

/// Masses of the return-time cells under the piecewise-constant density given
/// by cell masses `stationary` on the operator's grid.
pub fn cell_masses(op: &DiscretizedOperator, stationary: &[f64]) -> Result<TailData> {
    let grid = op.grid;
    if stationary.len() != grid.cells {
        bail!(InvalidParameter, "stationary vector has {} entries, grid has {}", stationary.len(), grid.cells);
    }
    let h = grid.width();
    let n_max = op.partition.n_max;
    let mut acc = alloc::vec![KahanSum::new(); n_max + 1];
    for p in &op.partition.pieces {
        let mut c = grid.cell_above(p.ulo);
        loop {
            let (clo, chi) = (grid.edge(c), grid.edge(c + 1));
            let seg = p.uhi.min(chi) - p.ulo.max(clo);
            if seg > 0.0 {
                acc[p.n - 1].add(seg * stationary[c] / h);
            }
            if chi >= p.uhi || c + 1 >= grid.cells {
                break;
            }
            c += 1;
        }
    }
    let vals: Vec<f64> = acc.iter().map(|a| a.value()).collect();
    let total = math::kahan_sum(vals.iter().copied());
    if !(total > 0.0 && total.is_finite()) {
        bail!(NonFinite, "cell masses do not sum to a positive finite value");
    }
    let masses: Vec<f64> = vals[..n_max].iter().map(|v| v / total).collect();
    let overflow = vals[n_max] / total;
    Ok(TailData::assemble(masses, overflow))
}

/// Fit of `mu(phi > n) ~ c n^{-beta}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TailModel {
    pub beta_hat: f64,
    pub beta_se: f64,
    pub c_hat: f64,
    /// `c` refitted with `beta` pinned at the value implied by the map
    pub c_pinned: f64,
    /// fitted slope of `log |mu(phi > n) - c n^{-beta}|` (beta pinned)
    pub residual_exponent: f64,
    pub residual_se: f64,
    /// `(n, n^beta mu(phi > n))` on the fit grid
    pub ell_profile: Vec<(usize, f64)>,
    pub window: (usize, usize),
}

/// Log-log regression of the tail over `[lo, hi]`. `beta` is the exponent the
/// map predicts; it is used for the pinned constant and the residual.
pub fn fit_tail(data: &TailData, beta: f64, lo: usize, hi: usize) -> Result<TailModel> {
    if !(beta > 0.0 && beta.is_finite()) {
        bail!(InvalidParameter, "beta must be positive, got {beta}");
    }
    if lo < 1 || hi <= lo || hi > data.n_max() {
        bail!(InvalidParameter, "fit window [{lo}, {hi}] must lie inside [1, {}]", data.n_max());
    }
    let grid = log_grid(lo, hi, 200);
    let mut lx = Vec::with_capacity(grid.len());
    let mut ly = Vec::with_capacity(grid.len());
    for &n in &grid {
        let t = data.tail(n);
        if !(t > 0.0) {
            bail!(Domain, "tail vanishes at n = {n}");
        }
        lx.push(math::ln(n as f64));
        ly.push(math::ln(t));
    }
    let (a, b, _, se_b) = line_fit(&lx, &ly)?;
    let beta_hat = -b;
    let c_hat = math::exp(a);

    // pinned constant: extrapolate n^beta tail(n) in 1/n from the top decade
    let top: Vec<usize> = log_grid((hi / 10).max(lo), hi, 60);
    let inv: Vec<f64> = top.iter().map(|&n| 1.0 / n as f64).collect();
    let ell: Vec<f64> = top.iter().map(|&n| math::powf(n as f64, beta) * data.tail(n)).collect();
    let f = least_squares(&[alloc::vec![1.0; top.len()], inv], &ell, None)?;
    let c_pinned = f.coef[0];

    // correction term below the fit window, where it dominates fit error
    let rlo = (lo / 10).max(2);
    let rgrid = log_grid(rlo, lo.max(rlo + 1), 80);
    let mut rx = Vec::new();
    let mut ry = Vec::new();
    for &n in &rgrid {
        let r = data.tail(n) - c_pinned * math::powf(n as f64, -beta);
        if r != 0.0 {
            rx.push(math::ln(n as f64));
            ry.push(math::ln(math::abs(r)));
        }
    }
    let (residual_exponent, residual_se) = if rx.len() >= 3 {
        let (_, s, _, se) = line_fit(&rx, &ry)?;
        (s, se)
    } else {
        (f64::NAN, f64::NAN)
    };
    let ell_profile = grid.iter().map(|&n| (n, math::powf(n as f64, beta_hat) * data.tail(n))).collect();
    Ok(TailModel {
        beta_hat,
        beta_se: se_b,
        c_hat,
        c_pinned,
        residual_exponent,
        residual_se,
        ell_profile,
        window: (lo, hi),
    })
}

/// `d0 = sin(pi beta) / pi = 1 / (Gamma(beta) Gamma(1 - beta))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenewalConstant {
    pub d0: f64,
    /// the same constant through the Gamma function
    pub via_gamma: f64,
}

pub fn renewal_constant(beta: f64) -> Result<RenewalConstant> {
    if !(beta > 0.0 && beta < 1.0) {
        bail!(Domain, "beta must lie in (0, 1), got {beta}");
    }
    let d0 = math::sin(math::PI * beta) / math::PI;
    let via_gamma = 1.0 / (math::gamma(beta) * math::gamma(1.0 - beta));
    if math::abs(d0 - via_gamma) > 1e-12 * d0 {
        bail!(CheckFailed, "sine and Gamma forms disagree: {d0} vs {via_gamma}");
    }
    Ok(RenewalConstant { d0, via_gamma })
}

/// Number of correction terms `q = max { j : (j+1) beta - j > 0 }`.
pub fn expansion_order(beta: f64) -> Result<usize> {
    if !(beta > 0.0 && beta < 1.0) {
        bail!(Domain, "beta must lie in (0, 1), got {beta}");
    }
    let mut j = 0usize;
    while ((j + 2) as f64) * beta - ((j + 1) as f64) > 0.0 {
        j += 1;
    }
    Ok(j)
}

/// `Gamma(1 - beta) c`, the predicted constant in
/// `1 - lambda(e^{-u}) ~ Gamma(1 - beta) c u^beta`.
pub fn eigenvalue_prefactor(beta: f64, c: f64) -> f64 {
    math::gamma(1.0 - beta) * c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::{build_return_partition, IntervalMapSpec};
    use crate::transfer::{Grid, OperatorOptions};

    #[test]
    fn renewal_constant_values() {
        let r = renewal_constant(0.5).unwrap();
        assert!((r.d0 - 1.0 / core::f64::consts::PI).abs() < 1e-15);
        let r = renewal_constant(0.75).unwrap();
        assert!((r.d0 - (0.75 * core::f64::consts::PI).sin() / core::f64::consts::PI).abs() < 1e-15);
        assert!(renewal_constant(1.0).is_err());
        assert!(renewal_constant(-0.2).is_err());
    }

    #[test]
    fn expansion_orders() {
        assert_eq!(expansion_order(0.75).unwrap(), 2);
        assert_eq!(expansion_order(0.6).unwrap(), 1);
        assert_eq!(expansion_order(0.55).unwrap(), 1);
        assert_eq!(expansion_order(0.8).unwrap(), 3);
        assert_eq!(expansion_order(0.5).unwrap(), 0);
        assert_eq!(expansion_order(0.9).unwrap(), 8);
    }

    #[test]
    fn synthetic_tail_is_recovered() {
        // p_n = n^{-1.75} - (n+1)^{-1.75} has tail exactly (n+1)^{-0.75}
        let masses: Vec<f64> = (1..=50_000).map(|n| (n as f64).powf(-0.75) - ((n + 1) as f64).powf(-0.75)).collect();
        let d = TailData::from_masses(masses).unwrap();
        assert!((d.tail(99) - 100f64.powf(-0.75)).abs() < 1e-14);
        let m = fit_tail(&d, 0.75, 1000, 40_000).unwrap();
        assert!((m.beta_hat - 0.75).abs() < 1e-3);
        assert!((m.c_pinned - 1.0).abs() < 1e-4);
        // (n+1)^{-b} - n^{-b} ~ -b n^{-b-1}
        assert!((m.residual_exponent + 1.75).abs() < 0.05, "{}", m.residual_exponent);
    }

    #[test]
    fn lsv_tail_exponent() {
        let map = IntervalMapSpec::lsv(4.0 / 3.0).unwrap();
        let part = build_return_partition(&map, 100_000).unwrap();
        let op = DiscretizedOperator::build(&part, Grid::new(512).unwrap(), OperatorOptions { exact_depth: 64 }).unwrap();
        let h = op.stationary(1e-13, 5000).unwrap();
        let d = cell_masses(&op, &h).unwrap();
        assert!((d.tails[0] - 1.0).abs() < 1e-12);
        assert!(!d.low_coverage);
        let m = fit_tail(&d, 0.75, 100, 10_000).unwrap();
        assert!((m.beta_hat - 0.75).abs() < 0.02, "{}", m.beta_hat);
        assert!((m.c_hat / m.c_pinned - 1.0).abs() < 0.05);
    }
}
