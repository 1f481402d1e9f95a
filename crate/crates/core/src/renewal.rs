//! Scalar and operator renewal sequences and their asymptotics.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::fit::{least_squares, line_fit, log_grid};
use crate::math;
use crate::tails::renewal_constant;
use crate::transfer::DiscretizedOperator;

/// A family of slices `R_j`, `j = 1..=max_return_time()`, acting on
/// vectors of length `dim()`.
pub trait SliceFamily {
    fn dim(&self) -> usize;
    fn max_return_time(&self) -> usize;
    /// `out += R_j v`
    fn apply_slice_add(&self, j: usize, v: &[f64], out: &mut [f64]);

    /// `out = sum_{j=1}^{n} R_j history[n - j]` with `n = history.len()`.
    fn convolve_step(&self, history: &[Vec<f64>], out: &mut [f64]) {
        let n = history.len();
        for v in out.iter_mut() {
            *v = 0.0;
        }
        for j in 1..=n.min(self.max_return_time()) {
            self.apply_slice_add(j, &history[n - j], out);
        }
    }
}

impl SliceFamily for DiscretizedOperator {
    fn dim(&self) -> usize {
        DiscretizedOperator::dim(self)
    }
    fn max_return_time(&self) -> usize {
        DiscretizedOperator::max_return_time(self)
    }
    fn apply_slice_add(&self, j: usize, v: &[f64], out: &mut [f64]) {
        DiscretizedOperator::apply_slice_add(self, j, v, out)
    }
    fn convolve_step(&self, history: &[Vec<f64>], out: &mut [f64]) {
        DiscretizedOperator::convolve_step(self, history, out)
    }
}

/// `R_j = p_j * r l^T`: the operator recursion collapses to the scalar one.
#[derive(Debug, Clone)]
pub struct RankOneFamily {
    pub masses: Vec<f64>,
    pub right: Vec<f64>,
    pub left: Vec<f64>,
}

impl SliceFamily for RankOneFamily {
    fn dim(&self) -> usize {
        self.right.len()
    }
    fn max_return_time(&self) -> usize {
        self.masses.len()
    }
    fn apply_slice_add(&self, j: usize, v: &[f64], out: &mut [f64]) {
        if j == 0 || j > self.masses.len() {
            return;
        }
        let c: f64 = self.left.iter().zip(v).map(|(l, x)| l * x).sum::<f64>() * self.masses[j - 1];
        for (o, r) in out.iter_mut().zip(&self.right) {
            *o += c * r;
        }
    }
}

#[inline]
fn dot_reversed(p: &[f64], u: &[f64]) -> f64 {
    // sum_k p[k] u[len-1-k] with four independent accumulators
    let n = p.len();
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let k = 4 * c;
        acc[0] += p[k] * u[n - 1 - k];
        acc[1] += p[k + 1] * u[n - 2 - k];
        acc[2] += p[k + 2] * u[n - 3 - k];
        acc[3] += p[k + 3] * u[n - 4 - k];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..n {
        s += p[k] * u[n - 1 - k];
    }
    s
}

/// `u_0 = 1`, `u_n = sum_{j=1}^{n} p_j u_{n-j}` for `n = 1..=n`, exact O(N^2).
/// `masses[j - 1] = p_j`; masses past the end count as zero.
pub fn scalar_renewal(masses: &[f64], n: usize) -> Result<Vec<f64>> {
    if masses.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
        bail!(InvalidParameter, "masses must be finite and non-negative");
    }
    let total = math::kahan_sum(masses.iter().copied());
    if total > 1.0 + 1e-12 {
        bail!(InvalidParameter, "masses sum to {total} > 1");
    }
    let mut u = Vec::with_capacity(n + 1);
    u.push(1.0);
    for k in 1..=n {
        let m = k.min(masses.len());
        // p_1..p_m against u_{k-1}..u_{k-m}
        let s = dot_reversed(&masses[..m], &u[k - m..k]);
        u.push(s);
    }
    Ok(u)
}

/// `t_0 = v`, `t_n = sum_{j=1}^{n} R_j t_{n-j}` for `n = 1..=n`.
pub fn operator_renewal<S: SliceFamily + ?Sized>(family: &S, v: &[f64], n: usize) -> Result<Vec<Vec<f64>>> {
    if v.len() != family.dim() {
        bail!(InvalidParameter, "vector has {} entries, operator dimension is {}", v.len(), family.dim());
    }
    let mut hist: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    hist.push(v.to_vec());
    let mut out = vec![0.0; v.len()];
    for k in 1..=n {
        family.convolve_step(&hist, &mut out);
        if out.iter().any(|x| !x.is_finite()) {
            bail!(NonFinite, "renewal sequence blew up at n = {k}");
        }
        hist.push(out.clone());
    }
    Ok(hist)
}

/// `<w, t_n>` for every `n`.
pub fn pair_series(series: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
    series.iter().map(|t| t.iter().zip(w).map(|(a, b)| a * b).sum()).collect()
}

/// `e_n = c n^{1-beta} s_n - d0 * target` over a window.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstOrderReport {
    pub d0: f64,
    pub target: f64,
    /// `(n, c n^{1-beta} s_n / (d0 target))`
    pub normalized: Vec<(usize, f64)>,
    pub max_rel_err: f64,
    /// mean relative error over the upper half of the window is below that
    /// of the lower half
    pub decreasing: bool,
    /// slope of log(rel err) against log n (NaN if not defined)
    pub error_slope: f64,
}

/// Compare `s_n = <w, T_n v>` with `d0 / c * n^{beta-1} <w, P v>`.
pub fn first_order_check(s: &[f64], target: f64, beta: f64, c: f64, lo: usize, hi: usize) -> Result<FirstOrderReport> {
    let d0 = renewal_constant(beta)?.d0;
    if hi >= s.len() || lo == 0 || lo >= hi {
        bail!(InvalidParameter, "window [{lo}, {hi}] does not fit a series of length {}", s.len());
    }
    if target == 0.0 {
        bail!(InvalidParameter, "<w, P v> vanishes; pick observables with non-zero means");
    }
    let grid = log_grid(lo, hi, 64);
    let mut normalized = Vec::with_capacity(grid.len());
    let mut errs = Vec::with_capacity(grid.len());
    for &n in &grid {
        let r = c * math::powf(n as f64, 1.0 - beta) * s[n] / (d0 * target);
        normalized.push((n, r));
        errs.push(math::abs(r - 1.0));
    }
    let max_rel_err = errs.iter().cloned().fold(0.0, f64::max);
    let half = errs.len() / 2;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let decreasing = mean(&errs[half..]) < mean(&errs[..half]);
    let (lx, ly): (Vec<f64>, Vec<f64>) = grid
        .iter()
        .zip(&errs)
        .filter(|(_, e)| **e > 0.0)
        .map(|(n, e)| (math::ln(*n as f64), math::ln(*e)))
        .unzip();
    let error_slope = if lx.len() >= 3 { line_fit(&lx, &ly).map(|f| f.1).unwrap_or(f64::NAN) } else { f64::NAN };
    Ok(FirstOrderReport { d0, target, normalized, max_rel_err, decreasing, error_slope })
}

/// Coefficients of `c s_n / target = sum_{j=0}^{q} d_j n^{(j+1)(beta-1)}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionFit {
    pub coefficients: Vec<f64>,
    pub stderr: Vec<f64>,
    pub condition: f64,
    pub rms_residual: f64,
    pub window: (usize, usize),
}

/// Least-squares fit of the expansion over `[lo, hi]`. Fails if the design
/// condition number exceeds `max_condition`.
#[allow(clippy::too_many_arguments)]
pub fn higher_order_fit(
    s: &[f64],
    target: f64,
    beta: f64,
    c: f64,
    q: usize,
    lo: usize,
    hi: usize,
    max_condition: f64,
) -> Result<ExpansionFit> {
    if hi >= s.len() || lo == 0 || lo >= hi {
        bail!(InvalidParameter, "window [{lo}, {hi}] does not fit a series of length {}", s.len());
    }
    let grid = log_grid(lo, hi, 400);
    if grid.len() <= q + 1 {
        bail!(InvalidParameter, "window too short for {} coefficients", q + 1);
    }
    let cols: Vec<Vec<f64>> = (0..=q)
        .map(|j| grid.iter().map(|&n| math::powf(n as f64, (j + 1) as f64 * (beta - 1.0))).collect())
        .collect();
    let y: Vec<f64> = grid.iter().map(|&n| c * s[n] / target).collect();
    let f = least_squares(&cols, &y, None)?;
    if !(f.condition <= max_condition) {
        bail!(IllConditioned, "expansion design has condition {:.3e}; reduce q or widen the window", f.condition);
    }
    let rms_residual = math::sqrt(f.rss / grid.len() as f64);
    Ok(ExpansionFit { coefficients: f.coef, stderr: f.stderr, condition: f.condition, rms_residual, window: (lo, hi) })
}

/// Leading term left over after the expansion, as `A n^gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct RemainderFit {
    pub gamma: f64,
    pub amplitude: f64,
    /// expansion coefficients refitted alongside the extra term
    pub coefficients: Vec<f64>,
    pub rss_expansion: f64,
    pub rss_augmented: f64,
    /// minimum sits on the edge of the searched range
    pub at_boundary: bool,
    /// `(gamma, rss)` on the coarse scan
    pub profile: Vec<(f64, f64)>,
}

/// The plain residual of a least-squares fit oscillates through zero, so its
/// log-log slope means nothing. Instead add one free power `A n^gamma` to the
/// expansion and profile the RSS over gamma (variable projection). Exponents
/// within `0.05` of an expansion exponent are skipped; the design is singular
/// there.
#[allow(clippy::too_many_arguments)]
pub fn remainder_fit(
    s: &[f64],
    target: f64,
    beta: f64,
    c: f64,
    q: usize,
    lo: usize,
    hi: usize,
    range: (f64, f64),
) -> Result<RemainderFit> {
    if hi >= s.len() || lo == 0 || lo >= hi {
        bail!(InvalidParameter, "window [{lo}, {hi}] does not fit a series of length {}", s.len());
    }
    if !(range.0 < range.1) {
        bail!(InvalidParameter, "empty exponent range");
    }
    let grid = log_grid(lo, hi, 400);
    if grid.len() <= q + 2 {
        bail!(InvalidParameter, "window too short for {} coefficients", q + 2);
    }
    let exps: Vec<f64> = (0..=q).map(|j| (j + 1) as f64 * (beta - 1.0)).collect();
    let mut cols: Vec<Vec<f64>> = exps.iter().map(|e| grid.iter().map(|&n| math::powf(n as f64, *e)).collect()).collect();
    let y: Vec<f64> = grid.iter().map(|&n| c * s[n] / target).collect();
    let rss_expansion = least_squares(&cols, &y, None)?.rss;

    let eval = |g: f64, cols: &mut Vec<Vec<f64>>| -> Option<crate::fit::LinearFit> {
        if exps.iter().any(|e| math::abs(e - g) < 0.05) {
            return None;
        }
        cols.push(grid.iter().map(|&n| math::powf(n as f64, g)).collect());
        let f = least_squares(cols, &y, None).ok();
        cols.pop();
        f
    };
    let steps = math::floor((range.1 - range.0) / 0.01) as usize;
    let mut profile = Vec::with_capacity(steps + 1);
    let mut best: Option<(usize, f64)> = None;
    for k in 0..=steps {
        let g = range.0 + 0.01 * k as f64;
        if let Some(f) = eval(g, &mut cols) {
            profile.push((g, f.rss));
            if best.is_none_or(|(_, r)| f.rss < r) {
                best = Some((profile.len() - 1, f.rss));
            }
        }
    }
    let Some((ib, _)) = best else {
        bail!(IllConditioned, "no admissible exponent in [{}, {}]", range.0, range.1);
    };
    let at_boundary = ib == 0 || ib + 1 == profile.len();
    // golden-section polish inside the neighbouring scan points
    let (mut a, mut b) = (profile[ib.saturating_sub(1)].0, profile[(ib + 1).min(profile.len() - 1)].0);
    let phi = 0.5 * (math::sqrt(5.0) - 1.0);
    let rss = |g: f64, cols: &mut Vec<Vec<f64>>| eval(g, cols).map_or(f64::INFINITY, |f| f.rss);
    for _ in 0..40 {
        let x1 = b - phi * (b - a);
        let x2 = a + phi * (b - a);
        if rss(x1, &mut cols) < rss(x2, &mut cols) {
            b = x2;
        } else {
            a = x1;
        }
    }
    let polished = 0.5 * (a + b);
    let (gamma, f) = match eval(polished, &mut cols) {
        Some(f) if f.rss <= profile[ib].1 => (polished, f),
        _ => (profile[ib].0, eval(profile[ib].0, &mut cols).expect("scan point was admissible")),
    };
    Ok(RemainderFit {
        gamma,
        amplitude: f.coef[q + 1],
        coefficients: f.coef[..=q].to_vec(),
        rss_expansion,
        rss_augmented: f.rss,
        at_boundary,
        profile,
    })
}

/// Partial sums `S_n = sum_{j<=n} s_j` against `d0 / (c beta) n^beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct CesaroReport {
    pub slope: f64,
    pub slope_se: f64,
    /// `S_n / (d0 / (c beta) n^beta)` at the top of the window (NaN in the
    /// finite-mean case)
    pub prefactor_ratio: f64,
}

/// `beta >= 1` means finite mean: the slope should be one.
pub fn cesaro_check(s: &[f64], beta: f64, c: f64, lo: usize, hi: usize) -> Result<CesaroReport> {
    if hi >= s.len() || lo == 0 || lo >= hi {
        bail!(InvalidParameter, "window [{lo}, {hi}] does not fit a series of length {}", s.len());
    }
    let mut partial = Vec::with_capacity(s.len());
    let mut acc = math::KahanSum::new();
    for v in s {
        acc.add(*v);
        partial.push(acc.value());
    }
    let grid = log_grid(lo, hi, 200);
    let lx: Vec<f64> = grid.iter().map(|&n| math::ln(n as f64)).collect();
    let ly: Vec<f64> = grid.iter().map(|&n| math::ln(partial[n])).collect();
    let (_, slope, _, slope_se) = line_fit(&lx, &ly)?;
    let prefactor_ratio = if beta < 1.0 {
        let d0 = renewal_constant(beta)?.d0;
        partial[hi] / (d0 / (c * beta) * math::powf(hi as f64, beta))
    } else {
        f64::NAN
    };
    Ok(CesaroReport { slope, slope_se, prefactor_ratio })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_renewal_is_constant() {
        // p_1 = 1 gives u_n = 1
        let u = scalar_renewal(&[1.0], 50).unwrap();
        assert!(u.iter().all(|v| (*v - 1.0).abs() < 1e-15));
        // p = (1/2, 1/2): u_n = 2/3 + (1/3)(-1/2)^n
        let u = scalar_renewal(&[0.5, 0.5], 40).unwrap();
        for (n, v) in u.iter().enumerate() {
            let exact = 2.0 / 3.0 + (-0.5f64).powi(n as i32) / 3.0;
            assert!((v - exact).abs() < 1e-15);
        }
    }

    #[test]
    fn dot_reversed_matches_naive() {
        let p: Vec<f64> = (0..37).map(|i| (i as f64 * 0.3).sin()).collect();
        let u: Vec<f64> = (0..37).map(|i| (i as f64 * 0.7).cos()).collect();
        let naive: f64 = (0..37).map(|k| p[k] * u[36 - k]).sum();
        assert!((dot_reversed(&p, &u) - naive).abs() < 1e-13);
    }

    #[test]
    fn rank_one_family_reduces_to_scalar() {
        let masses: Vec<f64> = (1..=300).map(|n| (n as f64).powf(-1.6) / 2.7).collect();
        let right = vec![0.25, 0.5, 0.25];
        let left = vec![1.0, 1.0, 1.0];
        let fam = RankOneFamily { masses: masses.clone(), right: right.clone(), left };
        let v = vec![0.2, 0.3, 0.5];
        let t = operator_renewal(&fam, &v, 300).unwrap();
        let u = scalar_renewal(&masses, 300).unwrap();
        for n in 1..=300 {
            for i in 0..3 {
                assert!((t[n][i] - u[n] * right[i]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn remainder_exponent_of_synthetic_series() {
        let beta = 0.75;
        let s: Vec<f64> = (0..=5000)
            .map(|n| {
                let n = (n.max(1)) as f64;
                0.225 * n.powf(-0.25) + 0.02 * n.powf(-0.5) - 0.01 * n.powf(-0.75) + 0.3 * n.powf(-1.4)
            })
            .collect();
        let f = remainder_fit(&s, 1.0, beta, 1.0, 2, 50, 5000, (-3.0, -0.3)).unwrap();
        assert!((f.gamma + 1.4).abs() < 1e-3, "{}", f.gamma);
        assert!((f.amplitude - 0.3).abs() < 1e-3);
        assert!((f.coefficients[1] - 0.02).abs() < 1e-5);
        assert!(!f.at_boundary);
        assert!(f.rss_augmented < 1e-6 * f.rss_expansion);
    }

    #[test]
    fn rejects_bad_masses() {
        assert!(scalar_renewal(&[0.7, 0.6], 10).is_err());
        assert!(scalar_renewal(&[-0.1], 10).is_err());
    }
}
