//! Monte Carlo correlations `int v . w o f^n` for skew products, started
//! from the product of the induced density and Lebesgue measure on the
//! fiber, and the checks of their asymptotics.
//!
//! Sample blocks draw from independent ChaCha streams keyed by
//! `(seed, block)`, and block sums are merged in block order, so results do
//! not depend on how blocks are scheduled.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Error, Result};
use crate::fit::{least_squares, line_fit};
use crate::maps::{FiberMap, SkewProduct};
use crate::math;
use crate::sparse::CscMatrix;
use crate::tails::{renewal_constant, TailData};
use crate::transfer::{DiscretizedOperator, Grid};

/// Horizontal factor of an observable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum XProfile {
    /// `exp(1 - 1/(1 - s^2))` on `(lo, hi)` with `s` the affine image in (-1, 1)
    Bump { lo: f64, hi: f64 },
    /// indicator of Y
    IndicatorY,
}

impl XProfile {
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            XProfile::Bump { lo, hi } => {
                if x <= lo || x >= hi {
                    0.0
                } else {
                    let s = (2.0 * x - (lo + hi)) / (hi - lo);
                    math::exp(1.0 - 1.0 / (1.0 - s * s))
                }
            }
            XProfile::IndicatorY => {
                if x > 0.5 && x <= 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// `v(x, y) = amplitude * X(x) * P(y)` with `P` a polynomial (coefficients in
/// increasing degree). Supported in Y by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Observable {
    pub id: String,
    pub x: XProfile,
    pub amplitude: f64,
    pub y_poly: Vec<f64>,
}

impl Observable {
    /// Smooth bump in `x` on `(lo, hi)`, which must sit inside Y.
    pub fn bump(id: &str, lo: f64, hi: f64, amplitude: f64, y_poly: Vec<f64>) -> Result<Self> {
        if !(lo > 0.5 && hi < 1.0 && lo < hi) {
            bail!(InvalidParameter, "bump support ({lo}, {hi}) is not inside the interior of Y");
        }
        if y_poly.is_empty() || y_poly.iter().any(|c| !c.is_finite()) || !amplitude.is_finite() {
            bail!(InvalidParameter, "observable coefficients must be finite and non-empty");
        }
        Ok(Self { id: id.into(), x: XProfile::Bump { lo, hi }, amplitude, y_poly })
    }

    pub fn indicator_y(id: &str) -> Self {
        Self { id: id.into(), x: XProfile::IndicatorY, amplitude: 1.0, y_poly: vec![1.0] }
    }

    #[inline]
    pub fn y_factor(&self, y: f64) -> f64 {
        let mut acc = 0.0;
        for c in self.y_poly.iter().rev() {
            acc = acc * y + c;
        }
        acc
    }

    #[inline]
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let a = self.x.eval(x);
        if a == 0.0 {
            0.0
        } else {
            self.amplitude * a * self.y_factor(y)
        }
    }

    pub fn is_y_independent(&self) -> bool {
        self.y_poly.iter().skip(1).all(|c| *c == 0.0)
    }

    /// `int_0^1 P(y) dy`
    pub fn y_mean(&self) -> f64 {
        self.y_poly.iter().enumerate().map(|(k, c)| c / (k + 1) as f64).sum()
    }

    /// Cell averages of `amplitude * X` on the grid.
    pub fn x_averages(&self, grid: &Grid) -> Vec<f64> {
        match self.x {
            XProfile::IndicatorY => vec![self.amplitude; grid.cells],
            XProfile::Bump { .. } => {
                // 4-point Gauss-Legendre on sub-cells keeps the bump's steep
                // flanks resolved on coarse grids
                let sub = 4;
                let h = grid.width();
                let nodes = [
                    (-0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
                    (-0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
                    (0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
                    (0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
                ];
                (0..grid.cells)
                    .map(|c| {
                        let lo = 0.5 + grid.edge(c);
                        let mut acc = 0.0;
                        for s in 0..sub {
                            let mid = lo + (s as f64 + 0.5) * h / sub as f64;
                            for (t, w) in nodes {
                                acc += w * self.x.eval(mid + 0.5 * t * h / sub as f64);
                            }
                        }
                        self.amplitude * acc / (2.0 * sub as f64)
                    })
                    .collect()
            }
        }
    }
}

/// Inverse-CDF sampler for a piecewise-constant density on the grid,
/// uniform on the fiber.
#[derive(Debug, Clone)]
pub struct CellSampler {
    grid: Grid,
    cum: Vec<f64>,
}

impl CellSampler {
    pub fn new(grid: Grid, masses: &[f64]) -> Result<Self> {
        if masses.len() != grid.cells {
            bail!(InvalidParameter, "{} masses for {} cells", masses.len(), grid.cells);
        }
        if masses.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
            bail!(InvalidParameter, "masses must be finite and non-negative");
        }
        let mut cum = Vec::with_capacity(masses.len());
        let mut acc = math::KahanSum::new();
        for m in masses {
            acc.add(*m);
            cum.push(acc.value());
        }
        let total = *cum.last().unwrap();
        if !(total > 0.0) {
            bail!(InvalidParameter, "masses sum to zero");
        }
        for c in cum.iter_mut() {
            *c /= total;
        }
        Ok(Self { grid, cum })
    }

    pub fn uniform(grid: Grid) -> Self {
        let m = grid.cells;
        Self { grid, cum: (1..=m).map(|i| i as f64 / m as f64).collect() }
    }

    /// Three uniforms per point: cell, position in the cell, fiber.
    #[inline]
    pub fn sample<R: Rng>(&self, rng: &mut R) -> (f64, f64) {
        let a: f64 = rng.random();
        let b: f64 = rng.random();
        let y: f64 = rng.random();
        let c = self.cum.partition_point(|v| *v <= a).min(self.grid.cells - 1);
        // (1 - b) lies in (0, 1], matching left-open cells
        let x = 0.5 + self.grid.edge(c) + (1.0 - b) * self.grid.width();
        (x.min(1.0), y)
    }
}

/// Points drawn from the sampler with the block-keyed RNG.
pub fn sample_induced(sampler: &CellSampler, count: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = block_rng(seed, 0);
    (0..count).map(|_| sampler.sample(&mut rng)).collect()
}

fn block_rng(seed: u64, block: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    /// strictly increasing
    pub lags: Vec<usize>,
    pub samples: u64,
    pub seed: u64,
    pub block_size: u64,
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lags.is_empty() || self.lags.windows(2).any(|w| w[0] >= w[1]) {
            bail!(InvalidParameter, "lags must be non-empty and strictly increasing");
        }
        if self.samples < 2 || self.block_size == 0 {
            bail!(InvalidParameter, "need at least two samples and a positive block size");
        }
        Ok(())
    }

    pub fn blocks(&self) -> u64 {
        self.samples.div_ceil(self.block_size)
    }
}

/// Per-block sums for every `(pair, lag)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSums {
    pub count: u64,
    pub sum: Vec<f64>,
    pub sumsq: Vec<f64>,
}

const LANES: usize = 8;

/// Run one block. `pairs` index into `observables` as `(v, w)`.
pub fn correlation_block(
    sp: &SkewProduct,
    sampler: &CellSampler,
    observables: &[Observable],
    pairs: &[(usize, usize)],
    cfg: &McConfig,
    block: u64,
) -> Result<BlockSums> {
    cfg.validate()?;
    if pairs.iter().any(|&(a, b)| a >= observables.len() || b >= observables.len()) {
        bail!(InvalidParameter, "pair index out of range");
    }
    let start = block * cfg.block_size;
    if start >= cfg.samples {
        bail!(InvalidParameter, "block {block} is past the last sample");
    }
    let count = cfg.block_size.min(cfg.samples - start);
    let nl = cfg.lags.len();
    let mut out = BlockSums { count, sum: vec![0.0; pairs.len() * nl], sumsq: vec![0.0; pairs.len() * nl] };
    let mut rng = block_rng(cfg.seed, block);
    let nv = pairs.len();
    let mut xs = [0.0f64; LANES];
    let mut ys = [0.0f64; LANES];
    let mut vs = vec![0.0f64; LANES * nv];
    let mut filled = 0usize;
    for _ in 0..count {
        let (x, y) = sampler.sample(&mut rng);
        let mut any = false;
        for (p, &(vi, _)) in pairs.iter().enumerate() {
            let v = observables[vi].eval(x, y);
            vs[filled * nv + p] = v;
            any |= v != 0.0;
        }
        if !any {
            continue;
        }
        xs[filled] = x;
        ys[filled] = y;
        filled += 1;
        if filled == LANES {
            run_lanes(sp, observables, pairs, cfg, &mut xs, &mut ys, &vs, filled, &mut out)?;
            filled = 0;
        }
    }
    if filled > 0 {
        run_lanes(sp, observables, pairs, cfg, &mut xs, &mut ys, &vs, filled, &mut out)?;
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn run_lanes(
    sp: &SkewProduct,
    observables: &[Observable],
    pairs: &[(usize, usize)],
    cfg: &McConfig,
    xs: &mut [f64; LANES],
    ys: &mut [f64; LANES],
    vs: &[f64],
    lanes: usize,
    out: &mut BlockSums,
) -> Result<()> {
    let nv = pairs.len();
    let nl = cfg.lags.len();
    let mut li = 0usize;
    let mut step = 0usize;
    loop {
        while li < nl && cfg.lags[li] == step {
            for k in 0..lanes {
                let (x, y) = (xs[k], ys[k]);
                let in_y = x > 0.5 && x <= 1.0;
                for (p, &(_, wi)) in pairs.iter().enumerate() {
                    let w = observables[wi].eval(x, y);
                    if w != 0.0 && !in_y {
                        return Err(Error::SupportViolation(alloc::format!(
                            "observable {} is {w} at ({x}, {y}) outside Y",
                            observables[wi].id
                        )));
                    }
                    let prod = vs[k * nv + p] * w;
                    out.sum[p * nl + li] += prod;
                    out.sumsq[p * nl + li] += prod * prod;
                }
            }
            li += 1;
        }
        if li >= nl {
            return Ok(());
        }
        for k in 0..lanes {
            let (x, y) = sp.apply(xs[k], ys[k]);
            xs[k] = x;
            ys[k] = y;
        }
        step += 1;
    }
}

/// Correlation estimates for one `(v, w)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationSeries {
    pub v_id: String,
    pub w_id: String,
    pub lags: Vec<usize>,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub sample_count: u64,
    pub seed: u64,
}

/// Merge block sums in the order given.
pub fn merge_blocks<'a, I: IntoIterator<Item = &'a BlockSums>>(
    observables: &[Observable],
    pairs: &[(usize, usize)],
    cfg: &McConfig,
    blocks: I,
) -> Result<Vec<CorrelationSeries>> {
    let nl = cfg.lags.len();
    let mut sum = vec![0.0; pairs.len() * nl];
    let mut sumsq = vec![0.0; pairs.len() * nl];
    let mut count = 0u64;
    for b in blocks {
        if b.sum.len() != sum.len() {
            bail!(InvalidParameter, "block layout does not match the pair/lag layout");
        }
        count += b.count;
        for i in 0..sum.len() {
            sum[i] += b.sum[i];
            sumsq[i] += b.sumsq[i];
        }
    }
    if count != cfg.samples {
        bail!(InvalidParameter, "merged {count} samples, expected {}", cfg.samples);
    }
    let n = count as f64;
    let mut out = Vec::with_capacity(pairs.len());
    for (p, &(vi, wi)) in pairs.iter().enumerate() {
        let mut est = Vec::with_capacity(nl);
        let mut se = Vec::with_capacity(nl);
        for l in 0..nl {
            let m = sum[p * nl + l] / n;
            let var = ((sumsq[p * nl + l] - n * m * m) / (n - 1.0)).max(0.0);
            if !m.is_finite() || !var.is_finite() {
                bail!(NonFinite, "correlation estimate is not finite");
            }
            est.push(m);
            // a zero-variance lag still gets a positive floor
            se.push(math::sqrt(var / n).max(f64::MIN_POSITIVE));
        }
        out.push(CorrelationSeries {
            v_id: observables[vi].id.clone(),
            w_id: observables[wi].id.clone(),
            lags: cfg.lags.clone(),
            estimates: est,
            std_errors: se,
            sample_count: count,
            seed: cfg.seed,
        });
    }
    Ok(out)
}

/// Sequential driver over all blocks.
pub fn correlation_mc(
    sp: &SkewProduct,
    sampler: &CellSampler,
    observables: &[Observable],
    pairs: &[(usize, usize)],
    cfg: &McConfig,
) -> Result<Vec<CorrelationSeries>> {
    cfg.validate()?;
    let mut blocks = Vec::with_capacity(cfg.blocks() as usize);
    for b in 0..cfg.blocks() {
        blocks.push(correlation_block(sp, sampler, observables, pairs, cfg, b)?);
    }
    merge_blocks(observables, pairs, cfg, blocks.iter())
}

/// `int v d(nu)` for the starting measure: cell masses times Lebesgue on the
/// fiber.
pub fn initial_integral(obs: &Observable, grid: &Grid, masses: &[f64]) -> f64 {
    let xa = obs.x_averages(grid);
    xa.iter().zip(masses).map(|(a, m)| a * m).sum::<f64>() * obs.y_mean()
}

/// Fiber moments of the invariant measure of the return map of a stacked
/// skew product: `out[k][c] = int_{cell c} y^k d(mu)`, `k = 0..=degree`.
///
/// On a return piece with return time `n` and right branch `b`, the fiber
/// map is `y -> (y + b + 1) / B^n`, so the moments solve triangular linear
/// systems `m_k = sum_{n,b} B^{-nk} R_{n,b} sum_{j<=k} C(k,j) (b+1)^{k-j} m_j`.
pub fn invariant_fiber_moments(
    op: &DiscretizedOperator,
    sp: &SkewProduct,
    stationary: &[f64],
    degree: usize,
) -> Result<Vec<Vec<f64>>> {
    if sp.fiber != FiberMap::Stacked {
        bail!(InvalidParameter, "invariant fiber moments need the stacked fiber map");
    }
    if stationary.len() != op.dim() {
        bail!(InvalidParameter, "stationary vector does not match the grid");
    }
    let count = sp.map.branch_count() as f64;
    let branches = sp.map.right.len();
    let m = op.dim();
    let mut moments: Vec<Vec<f64>> = vec![stationary.to_vec()];
    for k in 1..=degree {
        let ops: Vec<CscMatrix<f64>> = (0..branches)
            .map(|b| {
                op.weighted_operator(|n, bb| if bb == b { math::powf(count, -((n * k) as f64)) } else { 0.0 })
            })
            .collect();
        let mut rhs = vec![0.0; m];
        let mut tmp = vec![0.0; m];
        for (b, a) in ops.iter().enumerate() {
            let shift = (b + 1) as f64;
            let mut src = vec![0.0; m];
            for j in 0..k {
                let coef = binomial(k, j) * math::powf(shift, (k - j) as f64);
                for c in 0..m {
                    src[c] += coef * moments[j][c];
                }
            }
            a.matvec(&src, &mut tmp);
            for c in 0..m {
                rhs[c] += tmp[c];
            }
        }
        // fixed point: the operator norm is at most B^{-k}
        let mut x = rhs.clone();
        let mut converged = false;
        for _ in 0..500 {
            let mut next = rhs.clone();
            for a in &ops {
                a.matvec(&x, &mut tmp);
                for c in 0..m {
                    next[c] += tmp[c];
                }
            }
            let diff: f64 = next.iter().zip(&x).map(|(a, b)| math::abs(a - b)).sum();
            let size: f64 = next.iter().map(|v| math::abs(*v)).sum();
            x = next;
            if diff <= 1e-15 * size {
                converged = true;
                break;
            }
        }
        if !converged {
            bail!(NoConvergence, "fiber moment {k} did not converge");
        }
        moments.push(x);
    }
    Ok(moments)
}

fn binomial(n: usize, k: usize) -> f64 {
    let mut r = 1.0;
    for i in 0..k {
        r = r * (n - i) as f64 / (i + 1) as f64;
    }
    r
}

/// `int w d(mu)` under the invariant measure of the return map.
pub fn invariant_integral(obs: &Observable, grid: &Grid, moments: &[Vec<f64>]) -> Result<f64> {
    if obs.y_poly.len() > moments.len() {
        bail!(InvalidParameter, "observable has fiber degree {} but only {} moments", obs.y_poly.len() - 1, moments.len());
    }
    let xa = obs.x_averages(grid);
    let mut s = 0.0;
    for (k, coef) in obs.y_poly.iter().enumerate() {
        if *coef != 0.0 {
            s += coef * xa.iter().zip(&moments[k]).map(|(a, m)| a * m).sum::<f64>();
        }
    }
    Ok(s)
}

/// Per-lag and fitted comparison of a correlation series with
/// `d0 / c * n^{beta-1} Iv Iw`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingReport {
    pub d0: f64,
    pub iv: f64,
    pub iw: f64,
    /// `(n, c n^{1-beta} est / (d0 Iv Iw), its se, signal above 3 se)`
    pub normalized: Vec<(usize, f64, f64, bool)>,
    /// max |normalized - 1| over lags with signal
    pub max_dev: f64,
    /// fitted coefficients of `est = sum_j a_j n^{(j+1)(beta-1)}` and errors
    pub coefficients: Vec<f64>,
    pub coefficient_se: Vec<f64>,
    /// `c a_0 / (Iv Iw)`, to compare with d0
    pub d0_hat: f64,
    pub inconclusive: bool,
}

pub fn mixing_rate_check(series: &CorrelationSeries, beta: f64, c: f64, iv: f64, iw: f64, q: usize) -> Result<MixingReport> {
    let d0 = renewal_constant(beta)?.d0;
    let scale = d0 * iv * iw;
    let mut normalized = Vec::with_capacity(series.lags.len());
    let mut max_dev = 0.0f64;
    let mut any_signal = false;
    let (mut cols, mut y, mut wts) = (vec![Vec::new(); q + 1], Vec::new(), Vec::new());
    for ((&n, &e), &s) in series.lags.iter().zip(&series.estimates).zip(&series.std_errors) {
        let signal = math::abs(e) > 3.0 * s;
        let f = c * math::powf(n as f64, 1.0 - beta);
        let (r, rse) = if scale != 0.0 { (f * e / scale, f * s / math::abs(scale)) } else { (f64::NAN, f64::NAN) };
        if signal && n > 0 {
            any_signal = true;
            max_dev = max_dev.max(math::abs(r - 1.0));
        }
        normalized.push((n, r, rse, signal));
        if n > 0 {
            for (j, col) in cols.iter_mut().enumerate() {
                col.push(math::powf(n as f64, (j + 1) as f64 * (beta - 1.0)));
            }
            y.push(e);
            wts.push(1.0 / (s * s));
        }
    }
    let (coefficients, coefficient_se) = if y.len() > q + 1 {
        let f = least_squares(&cols, &y, Some(&wts))?;
        (f.coef, f.stderr)
    } else {
        (vec![f64::NAN; q + 1], vec![f64::NAN; q + 1])
    };
    let d0_hat = if iv * iw != 0.0 { c * coefficients[0] / (iv * iw) } else { f64::NAN };
    Ok(MixingReport {
        d0,
        iv,
        iw,
        normalized,
        max_dev,
        coefficients,
        coefficient_se,
        d0_hat,
        inconclusive: !any_signal,
    })
}

/// Largest `|est - prediction| / se` over the lags.
pub fn quotient_agreement(series: &CorrelationSeries, prediction: &[f64]) -> Result<f64> {
    if prediction.len() != series.lags.len() {
        bail!(InvalidParameter, "prediction has {} lags, series has {}", prediction.len(), series.lags.len());
    }
    Ok(series
        .estimates
        .iter()
        .zip(&series.std_errors)
        .zip(prediction)
        .map(|((e, s), p)| math::abs(e - p) / s)
        .fold(0.0, f64::max))
}

/// `c0` in `sum_{k>n} mu(phi > k) ~ c0 n^{1-beta}` for a finite-mean tail,
/// with `mu` the invariant probability on the whole space (so the induced
/// tail is divided by the mean return time). Extrapolated in `1/n` over
/// `[lo, hi]`.
pub fn finite_tail_constant(data: &TailData, beta: f64, lo: usize, hi: usize) -> Result<f64> {
    if !(beta > 1.0) {
        bail!(Domain, "finite-mean tail needs beta > 1, got {beta}");
    }
    if lo == 0 || hi <= lo || hi > data.n_max() {
        bail!(InvalidParameter, "window [{lo}, {hi}] outside the tail data");
    }
    let mean = data.mean_return_time();
    // suffix sums of the tail
    let nm = data.n_max();
    let mut suffix = vec![0.0; nm + 2];
    let mut acc = math::KahanSum::new();
    // remainder past n_max from the power-law tail
    acc.add(data.tail(nm) * nm as f64 / (beta - 1.0));
    for k in (1..=nm).rev() {
        acc.add(data.tail(k));
        suffix[k] = acc.value();
    }
    let grid = crate::fit::log_grid(lo, hi, 40);
    let inv: Vec<f64> = grid.iter().map(|&n| 1.0 / n as f64).collect();
    let vals: Vec<f64> =
        grid.iter().map(|&n| math::powf(n as f64, beta - 1.0) * suffix[n + 1] / mean).collect();
    let f = least_squares(&[vec![1.0; grid.len()], inv], &vals, None)?;
    Ok(f.coef[0])
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDecayReport {
    /// exponent of the weighted power-law fit `corr - limit ~ A n^s`
    pub slope: f64,
    pub slope_se: f64,
    /// slope of log |corr - limit| on lags with signal above 3 se only;
    /// biased towards zero once the signal nears the noise floor
    pub loglog_slope: f64,
    /// fitted `A` with the exponent pinned at `1 - beta`, probability
    /// normalization
    pub prefactor: f64,
    /// `c0 Iv Iw`, probability normalization
    pub predicted_prefactor: f64,
    pub signal_lags: Vec<usize>,
    pub inconclusive: bool,
}

/// Finite-measure decay. Inputs are in the induced normalization
/// (`mu(Y) = 1`); they are converted to the invariant probability with the
/// mean return time. The deviation from the limit is fitted on the linear
/// scale with weights `1/se^2` over every lag in `[lo, hi]`, so lags near the
/// noise floor neither drop out nor get log-transformed.
#[allow(clippy::too_many_arguments)]
pub fn finite_decay_check(
    series: &CorrelationSeries,
    iv_y: f64,
    iw_y: f64,
    mean_return: f64,
    beta: f64,
    c0: f64,
    lo: usize,
    hi: usize,
) -> Result<FiniteDecayReport> {
    if !(mean_return >= 1.0 && mean_return.is_finite()) {
        bail!(InvalidParameter, "mean return time must be finite and at least 1");
    }
    let limit_y = iv_y * iw_y / mean_return;
    let predicted_prefactor = c0 * iv_y * iw_y / (mean_return * mean_return);
    let (mut ns, mut ds, mut ws) = (Vec::new(), Vec::new(), Vec::new());
    let (mut lx, mut ly, mut signal) = (Vec::new(), Vec::new(), Vec::new());
    for ((&n, &e), &s) in series.lags.iter().zip(&series.estimates).zip(&series.std_errors) {
        if n < lo || n > hi || n == 0 {
            continue;
        }
        let d = (e - limit_y) / mean_return;
        let se = s / mean_return;
        ns.push(n as f64);
        ds.push(d);
        ws.push(1.0 / (se * se));
        if math::abs(d) > 3.0 * se {
            lx.push(math::ln(n as f64));
            ly.push(math::ln(math::abs(d)));
            signal.push(n);
        }
    }
    let nan = FiniteDecayReport {
        slope: f64::NAN,
        slope_se: f64::NAN,
        loglog_slope: f64::NAN,
        prefactor: f64::NAN,
        predicted_prefactor,
        signal_lags: signal.clone(),
        inconclusive: true,
    };
    if signal.len() < 3 || ns.len() < 4 {
        return Ok(nan);
    }
    let (_, loglog_slope, _, _) = line_fit(&lx, &ly)?;

    // pinned-exponent amplitude: linear in A
    let pinned_col: Vec<f64> = ns.iter().map(|n| math::powf(*n, 1.0 - beta)).collect();
    let prefactor = least_squares(&[pinned_col], &ds, Some(&ws))?.coef[0];

    // Gauss-Newton for (A, s) from the log-log start
    let mut s = loglog_slope;
    let mut amp = {
        let col: Vec<f64> = ns.iter().map(|n| math::powf(*n, s)).collect();
        least_squares(&[col], &ds, Some(&ws))?.coef[0]
    };
    let mut slope_se = f64::NAN;
    let mut converged = false;
    for _ in 0..100 {
        let f: Vec<f64> = ns.iter().map(|n| math::powf(*n, s)).collect();
        let ja = f.clone();
        let js: Vec<f64> = ns.iter().zip(&f).map(|(n, v)| amp * v * math::ln(*n)).collect();
        let r: Vec<f64> = ds.iter().zip(&f).map(|(d, v)| d - amp * v).collect();
        let step = least_squares(&[ja, js], &r, Some(&ws))?;
        amp += step.coef[0];
        // damp large exponent moves
        let ds_ = step.coef[1].clamp(-0.5, 0.5);
        s += ds_;
        slope_se = step.stderr[1];
        if math::abs(ds_) < 1e-10 && math::abs(step.coef[0]) <= 1e-10 * math::abs(amp) {
            converged = true;
            break;
        }
    }
    if !converged || !s.is_finite() {
        return Ok(FiniteDecayReport { loglog_slope, prefactor, ..nan });
    }
    Ok(FiniteDecayReport {
        slope: s,
        slope_se,
        loglog_slope,
        prefactor,
        predicted_prefactor,
        signal_lags: signal,
        inconclusive: false,
    })
}

/// Default lag grid: `per_decade` log-spaced integers in `[lo, hi]`.
pub fn lag_grid(lo: usize, hi: usize, per_decade: usize) -> Vec<usize> {
    if lo == 0 || hi < lo {
        return Vec::new();
    }
    let decades = math::ln(hi as f64 / lo as f64) / math::ln(10.0);
    let count = (libm::ceil(decades * per_decade as f64) as usize).max(1) + 1;
    crate::fit::log_grid(lo, hi, count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::IntervalMapSpec;

    fn lsv_skew(alpha: f64) -> SkewProduct {
        SkewProduct::new(IntervalMapSpec::lsv(alpha).unwrap(), FiberMap::Stacked).unwrap()
    }

    #[test]
    fn bump_observable_support() {
        let o = Observable::bump("b", 0.6, 0.9, 2.0, vec![1.0, 1.0]).unwrap();
        assert_eq!(o.eval(0.55, 0.3), 0.0);
        assert_eq!(o.eval(0.3, 0.3), 0.0);
        assert!((o.eval(0.75, 0.5) - 3.0).abs() < 1e-15);
        assert!(Observable::bump("b", 0.4, 0.9, 1.0, vec![1.0]).is_err());
        assert!((o.y_mean() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn uniform_sampler_is_uniform() {
        let s = CellSampler::uniform(Grid::new(64).unwrap());
        let pts = sample_induced(&s, 200_000, 7);
        let mut hist = [0usize; 10];
        for (x, y) in &pts {
            assert!(*x > 0.5 && *x <= 1.0 && (0.0..1.0).contains(y));
            hist[((x - 0.5) * 20.0).min(9.0) as usize] += 1;
        }
        for h in hist {
            assert!((h as f64 - 20_000.0).abs() < 5.0 * 20_000f64.sqrt());
        }
    }

    #[test]
    fn lag_zero_is_quadrature() {
        let grid = Grid::new(64).unwrap();
        let sampler = CellSampler::uniform(grid);
        let v = Observable::bump("v", 0.55, 0.95, 1.0, vec![1.0]).unwrap();
        let obs = vec![v.clone()];
        let cfg = McConfig { lags: vec![0, 1], samples: 200_000, seed: 3, block_size: 50_000 };
        let sp = lsv_skew(0.75);
        let s = &correlation_mc(&sp, &sampler, &obs, &[(0, 0)], &cfg).unwrap()[0];
        // int v^2 against the uniform density 2 on Y
        let exact: f64 = (0..20_000).map(|i| 0.5 + (i as f64 + 0.5) / 40_000.0).map(|x| v.eval(x, 0.0).powi(2)).sum::<f64>() / 20_000.0;
        assert!((s.estimates[0] - exact).abs() < 3.0 * s.std_errors[0]);
    }

    #[test]
    fn block_layout_does_not_change_results() {
        let grid = Grid::new(32).unwrap();
        let sampler = CellSampler::uniform(grid);
        let obs = vec![Observable::bump("v", 0.55, 0.95, 1.0, vec![1.0, 0.5]).unwrap()];
        let sp = lsv_skew(0.75);
        let cfg = McConfig { lags: vec![1, 5, 20], samples: 10_000, seed: 11, block_size: 1000 };
        let a = correlation_mc(&sp, &sampler, &obs, &[(0, 0)], &cfg).unwrap();
        let b = correlation_mc(&sp, &sampler, &obs, &[(0, 0)], &cfg).unwrap();
        assert_eq!(a, b);
        let blocks: Vec<BlockSums> = (0..cfg.blocks()).map(|k| correlation_block(&sp, &sampler, &obs, &[(0, 0)], &cfg, k).unwrap()).collect();
        let c = merge_blocks(&obs, &[(0, 0)], &cfg, blocks.iter()).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn indicator_correlation_does_not_grow() {
        // int_Y 1_Y o f^n d(mu_Y) decreases in the infinite-measure case
        let sp = lsv_skew(4.0 / 3.0);
        let sampler = CellSampler::uniform(Grid::new(64).unwrap());
        let obs = vec![Observable::indicator_y("1Y")];
        let cfg = McConfig { lags: lag_grid(10, 1000, 6), samples: 40_000, seed: 5, block_size: 10_000 };
        let s = &correlation_mc(&sp, &sampler, &obs, &[(0, 0)], &cfg).unwrap()[0];
        for k in 1..s.lags.len() {
            assert!(s.estimates[k] <= s.estimates[k - 1] + 3.0 * (s.std_errors[k] + s.std_errors[k - 1]));
        }
        assert!(s.estimates.last().unwrap() < &s.estimates[0]);
    }

    #[test]
    fn stacked_fiber_moments_on_the_doubling_table() {
        // branches landing straight in Y: G(x, y) = (y + b + 1) / 3 for the
        // two right branches, so the invariant fiber mean solves
        // m = (m + 1.5) / 3 averaged over branches
        let map = IntervalMapSpec::custom(
            1.0,
            vec![
                crate::maps::AffineBranch::new(0.5, 0.75, 2.0, -0.5),
                crate::maps::AffineBranch::new(0.75, 1.0, 2.0, -1.0),
            ],
        )
        .unwrap();
        let sp = SkewProduct::new(map, FiberMap::Stacked).unwrap();
        let part = crate::maps::build_return_partition(&sp.map, 10).unwrap();
        let op = DiscretizedOperator::build(&part, Grid::new(16).unwrap(), crate::transfer::OperatorOptions { exact_depth: 4 }).unwrap();
        let h = vec![1.0 / 16.0; 16];
        let mo = invariant_fiber_moments(&op, &sp, &h, 2).unwrap();
        let m1: f64 = mo[1].iter().sum();
        // E y = (E y + 1.5)/3  =>  E y = 3/4
        assert!((m1 - 0.75).abs() < 1e-13, "{m1}");
        // E y^2 = E (y + b)^2 / 9 with b uniform on {1, 2}
        // = (E y^2 + 3 E y + 2.5) / 9  =>  E y^2 = (2.25 + 2.5) / 8
        let m2: f64 = mo[2].iter().sum();
        assert!((m2 - 4.75 / 8.0).abs() < 1e-13, "{m2}");
    }

    #[test]
    fn finite_tail_constant_synthetic() {
        // tail(n) = (n+1)^{-2}: sum_{k>n} tail(k) ~ 1/n
        let masses: Vec<f64> = (1..=100_000).map(|n| (n as f64).powi(-2) - ((n + 1) as f64).powi(-2)).collect();
        let d = TailData::from_masses(masses).unwrap();
        let c0 = finite_tail_constant(&d, 2.0, 1000, 10_000).unwrap();
        let mean = d.mean_return_time();
        assert!((c0 * mean - 1.0).abs() < 1e-3, "{}", c0 * mean);
    }
}
