//! The numerical experiments. Each one writes its CSV series, returns named
//! gates and notes, and is shared between the subcommands and `accept`.

use oprenew_core::correlate::{
    correlation_block, finite_decay_check, finite_tail_constant, initial_integral, invariant_fiber_moments,
    invariant_integral, lag_grid, merge_blocks, mixing_rate_check, quotient_agreement, BlockSums, CellSampler,
    CorrelationSeries, McConfig, Observable,
};
use oprenew_core::fit::{line_fit, log_grid};
use oprenew_core::maps::{build_return_partition, FiberMap, IntervalMapSpec, ReturnPartition, SkewProduct};
use oprenew_core::norms::{
    distortion_check, ly_audit, mixed_samples, slice_norm_slope, LeafFunction, LeafTransfer, LyAuditConfig, TestFamily,
};
use oprenew_core::renewal::{
    cesaro_check, first_order_check, higher_order_fit, operator_renewal, pair_series, remainder_fit, scalar_renewal,
    RankOneFamily,
};
use oprenew_core::tails::{cell_masses, eigenvalue_prefactor, expansion_order, fit_tail, renewal_constant, TailData};
use oprenew_core::transfer::{leading_eigen, spectral_projection_check, DiscretizedOperator, Grid, OperatorOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, MapConfig, MapKindConfig};
use crate::error::{LabError, Result};
use crate::output::RunDir;

#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Outcome {
    pub name: String,
    pub gates: Vec<Gate>,
    pub notes: Vec<String>,
}

impl Outcome {
    fn new(name: &str) -> Self {
        Self { name: name.into(), ..Self::default() }
    }

    pub fn pass(&self) -> bool {
        self.gates.iter().all(|g| g.pass)
    }

    pub(crate) fn gate(&mut self, name: &str, pass: bool, detail: String) {
        self.gates.push(Gate { name: name.into(), pass, detail });
    }

    pub(crate) fn note(&mut self, s: String) {
        self.notes.push(s);
    }

    /// Fold another outcome in, prefixing its gate names.
    pub(crate) fn absorb_as(&mut self, prefix: &str, other: Outcome) {
        for g in other.gates {
            self.gates.push(Gate { name: format!("{prefix}{}", g.name), ..g });
        }
        for n in other.notes {
            self.notes.push(format!("{prefix}{n}"));
        }
    }

    pub fn failed_gates(&self) -> Vec<&str> {
        self.gates.iter().filter(|g| !g.pass).map(|g| g.name.as_str()).collect()
    }
}

pub struct Ctx<'a> {
    pub cfg: &'a ExperimentConfig,
    pub dir: &'a RunDir,
    pub pool: &'a rayon::ThreadPool,
    /// prefix for CSV file names
    pub prefix: String,
}

impl Ctx<'_> {
    fn tol(&self, t: f64) -> f64 {
        t * self.cfg.gate_slack
    }

    fn csv<S: Serialize>(&self, name: &str, rows: impl IntoIterator<Item = S>) -> Result<()> {
        self.dir.write_csv(&format!("{}{name}.csv", self.prefix), rows)
    }
}

/// Partition, discretized return operator, its stationary vector and the
/// return-time masses, for one map and grid.
pub struct Induced {
    pub map: IntervalMapSpec,
    pub partition: ReturnPartition,
    pub op: DiscretizedOperator,
    pub stationary: Vec<f64>,
    pub tails: TailData,
}

impl Induced {
    pub fn build(map: &IntervalMapSpec, n_max: usize, m: usize, depth: usize) -> Result<Self> {
        let partition = build_return_partition(map, n_max)?;
        let op = DiscretizedOperator::build(&partition, Grid::new(m)?, OperatorOptions { exact_depth: depth })?;
        let stationary = op.stationary(1e-15, 20_000)?;
        let tails = cell_masses(&op, &stationary)?;
        Ok(Self { map: map.clone(), partition, op, stationary, tails })
    }

    pub fn grid(&self) -> Grid {
        self.op.grid
    }

    /// `c` in `mu(phi > n) ~ c n^{-beta}` with `beta = 1/alpha` pinned.
    pub fn tail_constant(&self, cfg: &ExperimentConfig) -> Result<f64> {
        let t = &cfg.tails;
        Ok(fit_tail(&self.tails, self.map.beta(), t.fit_lo, t.fit_hi)?.c_pinned)
    }

    /// Cell masses of `v h` for a y-independent observable.
    pub fn weighted(&self, obs: &Observable) -> Vec<f64> {
        obs.x_averages(&self.grid()).iter().zip(&self.stationary).map(|(a, b)| a * b).collect()
    }
}

fn fmt_pm(x: f64, target: f64, tol: f64) -> String {
    format!("{x:.4} (target {target:.4} +- {tol:.4})")
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol
}

fn rel_within(x: f64, target: f64, tol: f64) -> bool {
    target != 0.0 && ((x / target) - 1.0).abs() <= tol
}

fn bump(id: &str, lo: f64, hi: f64, y_poly: Vec<f64>) -> Result<Observable> {
    Ok(Observable::bump(id, lo, hi, 1.0, y_poly)?)
}

/// `zeta(s)` for `s > 1`, Euler-Maclaurin after 1000 terms.
pub fn zeta(s: f64) -> f64 {
    let n = 1000usize;
    let nf = n as f64;
    let head: f64 = (1..n).map(|k| (k as f64).powf(-s)).sum();
    head + nf.powf(1.0 - s) / (s - 1.0) + 0.5 * nf.powf(-s) + s * nf.powf(-s - 1.0) / 12.0
        - s * (s + 1.0) * (s + 2.0) * nf.powf(-s - 3.0) / 720.0
}

/// `p_n = n^{-1-b} / zeta(1+b)` for `n <= len` and its tail constant
/// `c = 1 / (b zeta(1+b))`.
pub fn zeta_masses(b: f64, len: usize) -> (Vec<f64>, f64) {
    let z = zeta(1.0 + b);
    let p = (1..=len).map(|n| (n as f64).powf(-1.0 - b) / z).collect();
    (p, 1.0 / (b * z))
}

#[derive(Serialize)]
struct TailRow {
    n: usize,
    tail: f64,
    fitted: f64,
    residual: f64,
    ell: f64,
}

#[derive(Serialize)]
struct PieceRow {
    n: usize,
    branch: usize,
    lo: f64,
    hi: f64,
    lebesgue_length: f64,
    mass: f64,
}

/// Invariant mass of every partition piece (same quadrature as the
/// return-time masses).
fn piece_masses(ind: &Induced) -> Vec<f64> {
    let g = ind.grid();
    let h = g.width();
    let total: f64 = ind.stationary.iter().sum();
    ind.partition
        .pieces
        .iter()
        .map(|p| {
            let mut s = 0.0;
            let mut c = g.cell_above(p.ulo);
            loop {
                let (lo, hi) = (g.edge(c), g.edge(c + 1));
                let seg = p.uhi.min(hi) - p.ulo.max(lo);
                if seg > 0.0 {
                    s += seg * ind.stationary[c] / h;
                }
                if hi >= p.uhi || c + 1 >= g.cells {
                    break;
                }
                c += 1;
            }
            s / total
        })
        .collect()
}

/// Tail law of the return time.
pub fn tail_law(ctx: &Ctx, map: &MapConfig, export_partition: bool) -> Result<Outcome> {
    let mut out = Outcome::new("tail law");
    let t = &ctx.cfg.tails;
    let beta = map.beta();
    let ind = Induced::build(&map.interval_map()?, t.n_max, t.m, t.exact_depth)?;
    let fit = fit_tail(&ind.tails, beta, t.fit_lo, t.fit_hi)?;
    let tol = ctx.tol(0.02);
    out.gate("beta_hat", within(fit.beta_hat, beta, tol), fmt_pm(fit.beta_hat, beta, tol));
    let retained = 1.0 - ind.tails.overflow;
    out.gate("retained mass", retained >= 0.99, format!("{retained:.6} (>= 0.99)"));
    let ell_ok = fit.ell_profile.iter().all(|(_, l)| *l > 0.0 && l.is_finite());
    out.gate("ell profile positive", ell_ok, format!("{} points", fit.ell_profile.len()));
    out.note(format!("beta_hat = {:.4} +- {:.4} on [{}, {}]", fit.beta_hat, fit.beta_se, t.fit_lo, t.fit_hi));
    out.note(format!("c_hat = {:.6}, c with beta pinned = {:.6}", fit.c_hat, fit.c_pinned));
    out.note(format!("residual exponent = {:.3} +- {:.3}", fit.residual_exponent, fit.residual_se));
    let rows = log_grid(1, t.n_max, 200).into_iter().map(|n| {
        let tail = ind.tails.tail(n);
        let fitted = fit.c_pinned * (n as f64).powf(-beta);
        TailRow { n, tail, fitted, residual: tail - fitted, ell: (n as f64).powf(beta) * tail }
    });
    ctx.csv("tails", rows)?;
    if export_partition {
        let masses = piece_masses(&ind);
        ctx.csv(
            "partition",
            ind.partition.pieces.iter().zip(&masses).map(|(p, m)| PieceRow {
                n: p.n,
                branch: p.branch,
                lo: p.lo(),
                hi: p.hi(),
                lebesgue_length: p.len(),
                mass: *m,
            }),
        )?;
    }
    Ok(out)
}

#[derive(Serialize)]
struct SpectrumRow {
    u: f64,
    lambda: f64,
    one_minus_lambda: f64,
    scaled: f64,
    predicted: f64,
    gap_ratio: f64,
    iterations: usize,
}

fn lambda_at(op: &DiscretizedOperator, u: f64) -> Result<oprenew_core::transfer::EigenData<f64>> {
    Ok(leading_eigen(&op.perturbed_real((-u).exp()), 1e-14, 20_000)?)
}

/// Leading eigenvalue of the perturbed operator near `z = 1`.
pub fn eigen_asymptotics(ctx: &Ctx, map: &MapConfig) -> Result<Outcome> {
    let mut out = Outcome::new("eigenvalue asymptotics");
    let s = &ctx.cfg.spectrum;
    let beta = map.beta();
    if beta >= 1.0 {
        return Err(LabError::Config("the eigenvalue asymptotics need alpha > 1".into()));
    }
    let spec = map.interval_map()?;
    let ind = Induced::build(&spec, ctx.cfg.tails.n_max, s.m, s.exact_depth)?;
    let c = ind.tail_constant(ctx.cfg)?;
    let pref = eigenvalue_prefactor(beta, c);

    let full = ind.op.operator();
    let e1 = leading_eigen(&full, 1e-14, 20_000)?;
    let tol = ctx.tol(1e-10);
    out.gate("lambda(1) = 1", (e1.value - 1.0).abs() <= tol, format!("|lambda - 1| = {:.2e} (<= {tol:.0e})", (e1.value - 1.0).abs()));
    out.gate("gap", e1.gap_ratio < 1.0, format!("|lambda_2 / lambda_1| ~ {:.4}", e1.gap_ratio));
    let pc = spectral_projection_check(&full, &e1);
    let tol = ctx.tol(1e-8);
    out.gate("projection idempotent", pc.idempotence <= tol, format!("{:.2e} (<= {tol:.0e})", pc.idempotence));

    let us: Vec<f64> = (0..s.points)
        .map(|k| s.u_lo * (s.u_hi / s.u_lo).powf(k as f64 / (s.points - 1) as f64))
        .collect();
    let mut rows = Vec::with_capacity(us.len());
    let (mut lx, mut ly) = (Vec::new(), Vec::new());
    for &u in &us {
        let e = lambda_at(&ind.op, u)?;
        let one = 1.0 - e.value;
        lx.push(u.ln());
        ly.push(one.ln());
        rows.push(SpectrumRow {
            u,
            lambda: e.value,
            one_minus_lambda: one,
            scaled: one / u.powf(beta),
            predicted: pref,
            gap_ratio: e.gap_ratio,
            iterations: e.iterations,
        });
    }
    ctx.csv("spectrum", rows)?;
    let (_, slope, _, se) = line_fit(&lx, &ly)?;
    let tol = ctx.tol(0.05);
    out.gate("slope of 1 - lambda", within(slope, beta, tol), fmt_pm(slope, beta, tol));
    out.note(format!("slope se = {se:.2e}"));

    let er = lambda_at(&ind.op, s.u_ref)?;
    out.gate("inside unit disk", er.value < 1.0, format!("lambda(e^-{}) = {:.10}", s.u_ref, er.value));
    let ratio = (1.0 - er.value) / s.u_ref.powf(beta);
    let tol = ctx.tol(0.10);
    out.gate(
        "prefactor",
        rel_within(ratio, pref, tol),
        format!("(1 - lambda) / u^beta = {ratio:.5} vs Gamma(1 - beta) c = {pref:.5} (+- {:.0}%)", 100.0 * tol),
    );

    // refinement consistency at u_ref
    let coarse = Induced::build(&spec, ctx.cfg.tails.n_max, s.refine_m, s.exact_depth)?;
    let fine = Induced::build(&spec, ctx.cfg.tails.n_max, 2 * s.refine_m, s.exact_depth)?;
    let d = (lambda_at(&coarse.op, s.u_ref)?.value - lambda_at(&fine.op, s.u_ref)?.value).abs();
    let tol = ctx.tol(1e-3);
    out.gate(
        "refinement",
        d < tol,
        format!("|lambda_{}(u) - lambda_{}(u)| = {d:.2e} (< {tol:.0e})", s.refine_m, 2 * s.refine_m),
    );
    Ok(out)
}

#[derive(Serialize)]
struct ScalarRow {
    n: usize,
    u: f64,
    normalized: f64,
}

/// Scalar renewal sequences against their closed forms and the
/// Garsia-Lamperti limit.
pub fn scalar_oracle(ctx: &Ctx) -> Result<Outcome> {
    let mut out = Outcome::new("scalar renewal");
    let r = &ctx.cfg.renewal;
    let b = r.scalar_beta;
    let d0 = renewal_constant(b)?.d0;

    // p_j = 2^-j gives u_n = 1/2; p_1 = 1 gives u_n = 1
    let geo: Vec<f64> = (1..=60).map(|j| 0.5f64.powi(j)).collect();
    let u = scalar_renewal(&geo, 200)?;
    let err = u[1..].iter().map(|v| (v - 0.5).abs()).fold(0.0, f64::max);
    let tol = ctx.tol(1e-12);
    out.gate("geometric masses", err <= tol, format!("max |u_n - 1/2| = {err:.2e} (<= {tol:.0e})"));
    let u = scalar_renewal(&[1.0], 50)?;
    let err = u.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
    out.gate("deterministic return", err <= tol, format!("max |u_n - 1| = {err:.2e}"));

    let (p, c) = zeta_masses(b, r.scalar_n);
    let u = scalar_renewal(&p, r.scalar_n)?;
    let norm = |n: usize| c * (n as f64).powf(1.0 - b) * u[n] / d0;
    let last = norm(r.scalar_n);
    let tol = ctx.tol(0.10);
    out.gate(
        "Garsia-Lamperti limit",
        (last - 1.0).abs() <= tol,
        format!("c n^(1-beta) u_n / d0 = {last:.4} at n = {} (1 +- {tol:.2})", r.scalar_n),
    );
    ctx.csv(
        "scalar",
        log_grid(1, r.scalar_n, 200).into_iter().map(|n| ScalarRow { n, u: u[n], normalized: norm(n) }),
    )?;
    Ok(out)
}

#[derive(Serialize)]
struct SeriesRow {
    series: &'static str,
    n: usize,
    value: f64,
    normalized: f64,
}

/// First-order asymptotics of the operator renewal sequence.
pub fn first_order(ctx: &Ctx, map: &MapConfig) -> Result<Outcome> {
    let mut out = Outcome::new("operator first order");
    let r = &ctx.cfg.renewal;
    let beta = map.beta();
    if beta >= 1.0 {
        return Err(LabError::Config("the first-order renewal check needs alpha > 1".into()));
    }
    let ind = Induced::build(&map.interval_map()?, ctx.cfg.tails.n_max, r.m, r.exact_depth)?;
    let c = ind.tail_constant(ctx.cfg)?;
    let g = ind.grid();
    let v = bump("v", 0.55, 0.95, vec![1.0])?;
    let w = bump("w", 0.6, 0.9, vec![1.0])?;
    let vh = ind.weighted(&v);
    let wa = w.x_averages(&g);
    let target: f64 = vh.iter().sum::<f64>() * wa.iter().zip(&ind.stationary).map(|(a, b)| a * b).sum::<f64>();
    let s = pair_series(&operator_renewal(&ind.op, &vh, r.n)?, &wa);
    let rep = first_order_check(&s, target, beta, c, r.n / 10, r.n)?;
    let tol = ctx.tol(0.10);
    out.gate(
        "bumps: relative error",
        rep.max_rel_err <= tol,
        format!("max over [{}, {}] = {:.4} (<= {tol:.2})", r.n / 10, r.n, rep.max_rel_err),
    );
    out.gate("bumps: error decreasing", rep.decreasing, format!("error slope {:.3}", rep.error_slope));

    // stationary start, w = 1: the scalar-like case
    let ones = vec![1.0; g.cells];
    let s1 = pair_series(&operator_renewal(&ind.op, &ind.stationary, r.n)?, &ones);
    let rep1 = first_order_check(&s1, 1.0, beta, c, r.n / 10, r.n)?;
    let at_n = (rep1.normalized.last().map(|x| x.1).unwrap_or(f64::NAN) - 1.0).abs();
    out.gate("stationary: relative error", at_n <= tol, format!("{at_n:.4} at n = {} (<= {tol:.2})", r.n));

    let mut rows = Vec::new();
    for (name, rep, ser) in [("bumps", &rep, &s), ("stationary", &rep1, &s1)] {
        for &(n, x) in &rep.normalized {
            rows.push(SeriesRow { series: name, n, value: ser[n], normalized: x });
        }
    }
    ctx.csv("first_order", rows)?;
    Ok(out)
}

#[derive(Serialize)]
struct RankOneRow {
    trial: usize,
    length: usize,
    max_abs_diff: f64,
}

/// Operator renewal with rank-one slices against the scalar recursion.
pub fn rank_one_oracle(ctx: &Ctx) -> Result<Outcome> {
    let mut out = Outcome::new("rank-one oracle");
    let r = &ctx.cfg.renewal;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
    let dim = 8;
    let mut rows = Vec::new();
    let mut worst = 0.0f64;
    for trial in 0..r.rank_one_trials {
        let raw: Vec<f64> = (0..r.rank_one_len).map(|_| rng.random::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let keep = 0.5 + 0.5 * rng.random::<f64>();
        let masses: Vec<f64> = raw.iter().map(|x| x * keep / total).collect();
        let right_raw: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
        let rs: f64 = right_raw.iter().sum();
        let right: Vec<f64> = right_raw.iter().map(|x| x / rs).collect();
        let v: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
        let mass_v: f64 = v.iter().sum();
        let fam = RankOneFamily { masses: masses.clone(), right: right.clone(), left: vec![1.0; dim] };
        let t = operator_renewal(&fam, &v, r.rank_one_len)?;
        let u = scalar_renewal(&masses, r.rank_one_len)?;
        let mut diff = 0.0f64;
        for n in 1..=r.rank_one_len {
            let tot: f64 = t[n].iter().sum();
            diff = diff.max((tot - u[n] * mass_v).abs());
            for i in 0..dim {
                diff = diff.max((t[n][i] - u[n] * mass_v * right[i]).abs());
            }
        }
        worst = worst.max(diff);
        rows.push(RankOneRow { trial, length: r.rank_one_len, max_abs_diff: diff });
    }
    ctx.csv("rank_one", rows)?;
    let tol = ctx.tol(1e-12);
    let pass = worst <= tol;
    out.gate("oracle equivalence", pass, format!("max |t_n - u_n r <v,1>| = {worst:.2e} (<= {tol:.0e})"));
    out.note(format!("oracle equivalence: {}", if pass { "PASS" } else { "FAIL" }));
    Ok(out)
}

#[derive(Serialize)]
struct RatesRow {
    n: usize,
    normalized: f64,
    expansion: f64,
    residual: f64,
}

#[derive(Serialize)]
struct ProfileRow {
    gamma: f64,
    rss: f64,
}

/// Higher-order expansion of the quotient series and the exponent of what
/// is left after it.
pub fn higher_order(ctx: &Ctx, map: &MapConfig) -> Result<Outcome> {
    let mut out = Outcome::new("higher-order expansion");
    let r = &ctx.cfg.renewal;
    let beta = map.beta();
    let spec = map.interval_map()?;
    if !spec.is_markov() || beta >= 1.0 {
        return Err(LabError::Config("higher-order fits need a Markov map with alpha > 1".into()));
    }
    let q = expansion_order(beta)?;
    let ind = Induced::build(&spec, ctx.cfg.tails.n_max, r.m, r.exact_depth)?;
    let c = ind.tail_constant(ctx.cfg)?;
    let g = ind.grid();
    let v = bump("v", 0.55, 0.95, vec![1.0])?;
    let w = bump("w", 0.6, 0.9, vec![1.0])?;
    let vh = ind.weighted(&v);
    let wa = w.x_averages(&g);
    let target: f64 = vh.iter().sum::<f64>() * wa.iter().zip(&ind.stationary).map(|(a, b)| a * b).sum::<f64>();
    let s = pair_series(&operator_renewal(&ind.op, &vh, r.rates_n)?, &wa);
    let d0 = renewal_constant(beta)?.d0;

    let fit = higher_order_fit(&s, target, beta, c, q, r.rates_lo, r.rates_n, 1e12)?;
    let tol = ctx.tol(0.05);
    out.gate(
        "d0",
        rel_within(fit.coefficients[0], d0, tol),
        format!("fitted {:.6} vs sin(pi beta)/pi = {d0:.6} (+- {:.0}%)", fit.coefficients[0], 100.0 * tol),
    );
    out.note(format!("q = {q}, coefficients {:?}, condition {:.2e}", fmt_vec(&fit.coefficients), fit.condition));

    let rem = remainder_fit(&s, target, beta, c, q, r.remainder_lo, r.rates_n, (-3.0, -0.3))?;
    let bound = -beta + ctx.tol(0.1);
    out.gate(
        "remainder exponent",
        rem.gamma <= bound && !rem.at_boundary,
        format!("{:.3} (<= {bound:.3}), rss ratio {:.2e}", rem.gamma, rem.rss_augmented / rem.rss_expansion),
    );
    out.note(format!("remainder amplitude {:.4e}, refitted coefficients {:?}", rem.amplitude, fmt_vec(&rem.coefficients)));

    let rows = log_grid(r.remainder_lo, r.rates_n, 200).into_iter().map(|n| {
        let y = c * s[n] / target;
        let e: f64 = (0..=q).map(|j| fit.coefficients[j] * (n as f64).powf((j + 1) as f64 * (beta - 1.0))).sum();
        RatesRow { n, normalized: y, expansion: e, residual: y - e }
    });
    ctx.csv("rates", rows)?;
    ctx.csv("remainder_profile", rem.profile.iter().map(|&(gamma, rss)| ProfileRow { gamma, rss }))?;
    Ok(out)
}

fn fmt_vec(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| format!("{x:.5}")).collect()
}

/// Block-parallel Monte Carlo; the result does not depend on the pool size.
pub fn run_mc(
    pool: &rayon::ThreadPool,
    sp: &SkewProduct,
    sampler: &CellSampler,
    obs: &[Observable],
    pairs: &[(usize, usize)],
    cfg: &McConfig,
) -> Result<Vec<CorrelationSeries>> {
    cfg.validate()?;
    let blocks: Vec<BlockSums> = pool.install(|| {
        (0..cfg.blocks())
            .into_par_iter()
            .map(|b| correlation_block(sp, sampler, obs, pairs, cfg, b))
            .collect::<std::result::Result<Vec<_>, _>>()
    })?;
    Ok(merge_blocks(obs, pairs, cfg, blocks.iter())?)
}

#[derive(Serialize)]
struct MixRow {
    pair: String,
    n: usize,
    estimate: f64,
    se: f64,
    asymptote: f64,
    normalized: f64,
    normalized_se: f64,
    quotient: Option<f64>,
    z: Option<f64>,
}

/// Correlations of the invertible skew product against the first-order
/// law, and for y-independent observables against the quotient operator.
pub fn mixing(ctx: &Ctx, map: &MapConfig, quotient: bool, name: &str) -> Result<Outcome> {
    let mut out = Outcome::new(name);
    let x = &ctx.cfg.mix;
    let beta = map.beta();
    if beta >= 1.0 {
        return Err(LabError::Config("the infinite-measure mixing check needs alpha > 1".into()));
    }
    let sp = map.skew_product()?;
    let ind = Induced::build(&sp.map, ctx.cfg.tails.n_max, x.m, x.exact_depth)?;
    let c = ind.tail_constant(ctx.cfg)?;
    let g = ind.grid();
    let d0 = renewal_constant(beta)?.d0;
    let q = expansion_order(beta)?;

    let mut obs = vec![bump("v", 0.55, 0.95, vec![1.0])?, bump("w", 0.6, 0.9, vec![1.0])?];
    let mut pairs = vec![(0, 1)];
    let stacked = sp.fiber == FiberMap::Stacked;
    if stacked {
        obs.push(bump("vy", 0.55, 0.95, vec![1.0, 1.0])?);
        obs.push(bump("wy", 0.6, 0.9, vec![0.5, 0.0, 3.0])?);
        pairs.push((2, 3));
    }
    let lags = lag_grid(x.lag_lo, x.lag_hi, x.per_decade);
    let mc = McConfig { lags: lags.clone(), samples: x.samples, seed: ctx.cfg.seed, block_size: x.block_size };
    let sampler = CellSampler::new(g, &ind.stationary)?;
    let series = run_mc(ctx.pool, &sp, &sampler, &obs, &pairs, &mc)?;

    // y-independent w: the x-marginal of the invariant measure is the
    // stationary density; otherwise use the invariant fiber moments
    let moments = if stacked { Some(invariant_fiber_moments(&ind.op, &sp, &ind.stationary, 2)?) } else { None };
    let prediction = if quotient {
        let t = operator_renewal(&ind.op, &ind.weighted(&obs[0]), x.lag_hi)?;
        let p = pair_series(&t, &obs[1].x_averages(&g));
        Some(lags.iter().map(|&n| p[n]).collect::<Vec<f64>>())
    } else {
        None
    };

    let tol = ctx.tol(0.15);
    let mut rows = Vec::new();
    for (k, &(a, b)) in pairs.iter().enumerate() {
        let ser = &series[k];
        let iv = initial_integral(&obs[a], &g, &ind.stationary);
        let iw = match &moments {
            Some(m) => invariant_integral(&obs[b], &g, m)?,
            None => initial_integral(&obs[b], &g, &ind.stationary),
        };
        let rep = mixing_rate_check(ser, beta, c, iv, iw, q)?;
        let label = format!("{}.{}", obs[a].id, obs[b].id);
        out.gate(
            &format!("{label}: first order"),
            !rep.inconclusive && rep.max_dev <= tol,
            format!("max |n^(1-beta) c corr / (d0 Iv Iw) - 1| = {:.4} (<= {tol:.2}) over lags with signal", rep.max_dev),
        );
        out.note(format!(
            "{label}: Iv = {iv:.6}, Iw = {iw:.6}, fitted d0 = {:.5} (closed form {d0:.5})",
            rep.d0_hat
        ));
        let pred = if k == 0 { prediction.as_deref() } else { None };
        if let Some(p) = pred {
            let zmax = quotient_agreement(ser, p)?;
            let bound = ctx.tol(3.0);
            out.gate(&format!("{label}: quotient"), zmax <= bound, format!("max |z| = {zmax:.3} (<= {bound:.2}) over {} lags", lags.len()));
        }
        for (i, &(n, r, rse, _)) in rep.normalized.iter().enumerate() {
            let qv = pred.map(|p| p[i]);
            rows.push(MixRow {
                pair: label.clone(),
                n,
                estimate: ser.estimates[i],
                se: ser.std_errors[i],
                asymptote: d0 / c * (n as f64).powf(beta - 1.0) * iv * iw,
                normalized: r,
                normalized_se: rse,
                quotient: qv,
                z: qv.map(|v| (ser.estimates[i] - v) / ser.std_errors[i]),
            });
        }
    }
    ctx.csv("mix", rows)?;
    Ok(out)
}

#[derive(Serialize)]
struct FiniteRow {
    pair: String,
    n: usize,
    estimate: f64,
    se: f64,
    limit: f64,
    deviation: f64,
}

/// Finite invariant measure: polynomial decay of correlations.
pub fn finite_decay(ctx: &Ctx, map: &MapConfig) -> Result<Outcome> {
    let mut out = Outcome::new("finite-measure decay");
    let x = &ctx.cfg.mix;
    let beta = map.beta();
    if beta <= 1.0 {
        return Err(LabError::Config("the finite-measure check needs alpha < 1".into()));
    }
    let sp = map.skew_product()?;
    let t = &ctx.cfg.tails;
    let ind = Induced::build(&sp.map, t.n_max, x.finite_m, x.finite_depth)?;
    let g = ind.grid();
    let mean = ind.tails.mean_return_time();
    let c0 = finite_tail_constant(&ind.tails, beta, t.fit_hi / 10, t.fit_hi)?;
    let obs = vec![bump("v", 0.55, 0.95, vec![1.0])?, bump("w", 0.6, 0.9, vec![1.0])?, Observable::indicator_y("1Y")];
    let pairs = [(0, 1), (2, 2)];
    let lags = lag_grid(x.finite_lag_lo, x.finite_lag_hi, x.per_decade);
    let mc = McConfig { lags, samples: x.finite_samples, seed: ctx.cfg.seed, block_size: x.block_size };
    let sampler = CellSampler::new(g, &ind.stationary)?;
    let series = run_mc(ctx.pool, &sp, &sampler, &obs, &pairs, &mc)?;
    out.note(format!("mean return time {mean:.6}, c0 = {c0:.6}"));
    let target = 1.0 - beta;
    let tol = ctx.tol(0.15);
    let mut rows = Vec::new();
    for (k, &(a, b)) in pairs.iter().enumerate() {
        let ser = &series[k];
        let iv = initial_integral(&obs[a], &g, &ind.stationary);
        let iw = initial_integral(&obs[b], &g, &ind.stationary);
        let rep = finite_decay_check(ser, iv, iw, mean, beta, c0, x.finite_lag_lo, x.finite_lag_hi)?;
        let label = format!("{}.{}", obs[a].id, obs[b].id);
        out.gate(
            &format!("{label}: slope"),
            !rep.inconclusive && within(rep.slope, target, tol),
            format!("{} +- {:.3} se, {} lags with signal", fmt_pm(rep.slope, target, tol), rep.slope_se, rep.signal_lags.len()),
        );
        let ptol = ctx.tol(0.30);
        out.gate(
            &format!("{label}: prefactor"),
            rel_within(rep.prefactor, rep.predicted_prefactor, ptol),
            format!("{:.5} vs c0 Iv Iw = {:.5} (+- {:.0}%)", rep.prefactor, rep.predicted_prefactor, 100.0 * ptol),
        );
        out.note(format!("{label}: log-log slope on signal lags {:.3}", rep.loglog_slope));
        let limit = iv * iw / mean;
        for i in 0..ser.lags.len() {
            rows.push(FiniteRow {
                pair: label.clone(),
                n: ser.lags[i],
                estimate: ser.estimates[i],
                se: ser.std_errors[i],
                limit,
                deviation: ser.estimates[i] - limit,
            });
        }
    }
    ctx.csv("finite", rows)?;
    Ok(out)
}

#[derive(Serialize)]
struct SliceRow {
    n: usize,
    max_column_sum: f64,
    total_mass: f64,
}

/// `sum_n R_n = R` entrywise and the decay of the slice norms.
pub fn slice_decay(ctx: &Ctx, map: &MapConfig) -> Result<Outcome> {
    let mut out = Outcome::new("slice decay");
    let nc = &ctx.cfg.norms;
    let beta = map.beta();
    let partition = build_return_partition(&map.interval_map()?, ctx.cfg.tails.n_max)?;
    let op = DiscretizedOperator::build(
        &partition,
        Grid::new(nc.slice_m)?,
        OperatorOptions { exact_depth: ctx.cfg.tails.exact_depth },
    )?;
    let m = nc.slice_m;
    let mut sum = vec![0.0f64; m * m];
    for n in 1..=op.max_return_time() {
        for (i, j, v) in op.slice(n).triplets() {
            sum[i * m + j] += v;
        }
    }
    let mut full = vec![0.0f64; m * m];
    for (i, j, v) in op.operator().triplets() {
        full[i * m + j] += v;
    }
    let diff = sum.iter().zip(&full).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let tol = ctx.tol(1e-12);
    out.gate("slices sum to the operator", diff <= tol, format!("max entry difference {diff:.2e} (<= {tol:.0e})"));

    let grid = log_grid(nc.slice_lo, nc.slice_hi, 60);
    let mut rows = Vec::with_capacity(grid.len());
    let (mut lx, mut ly, mut lt) = (Vec::new(), Vec::new(), Vec::new());
    for &n in &grid {
        let cs = op.slice(n).column_sums();
        let mx = cs.iter().cloned().fold(0.0, f64::max);
        let tot = cs.iter().sum::<f64>() / m as f64;
        lx.push((n as f64).ln());
        ly.push(mx.ln());
        lt.push(tot.ln());
        rows.push(SliceRow { n, max_column_sum: mx, total_mass: tot });
    }
    ctx.csv("slices", rows)?;
    let (_, slope, _, se) = line_fit(&lx, &ly)?;
    let target = -(beta + 1.0);
    let tol = ctx.tol(0.05);
    out.gate("slice mass slope", within(slope, target, tol), format!("{} se {se:.3}", fmt_pm(slope, target, tol)));
    let (_, st, _, _) = line_fit(&lx, &lt)?;
    out.note(format!("Lebesgue mass of the slices: slope {st:.4}"));
    Ok(out)
}

#[derive(Serialize)]
struct LyRow {
    id: String,
    n: usize,
    strong: f64,
    weak: f64,
    bound: f64,
    pass: bool,
    basis_change: f64,
}

#[derive(Serialize)]
struct RatioRow {
    id: String,
    ratio: f64,
    bound: f64,
}

#[derive(Serialize)]
struct SliceNormRow {
    n: usize,
    strong: f64,
}

#[derive(Serialize)]
struct DistortionRow {
    n: usize,
    domain: f64,
    image: f64,
}

/// Lasota-Yorke audit of the 2D transfer operator on anisotropic norm
/// estimates, plus slice-norm decay and distortion.
pub fn ly(ctx: &Ctx, map: &MapConfig) -> Result<Outcome> {
    let mut out = Outcome::new("Lasota-Yorke audit");
    let nc = &ctx.cfg.norms;
    if map.kind != MapKindConfig::Lsv {
        return Err(LabError::Config("the norm audit runs on the LSV skew product".into()));
    }
    let sp = map.skew_product()?;
    if sp.fiber != FiberMap::Stacked {
        return Err(LabError::Config("the norm audit needs the stacked fiber map".into()));
    }
    let tr = LeafTransfer::new(&sp, nc.mx, nc.my, nc.depth)?;
    let small = TestFamily::with_levels(nc.basis, nc.levels, nc.my, nc.q)?;
    let full = TestFamily::with_levels(nc.basis, nc.levels + 1, nc.my, nc.q)?;
    let samples = mixed_samples(nc.mx, nc.my, nc.samples)?;
    let audit = LyAuditConfig {
        transfer: &tr,
        small: &small,
        full: &full,
        powers: nc.powers,
        window: nc.window,
        lambda: nc.lambda,
        slack: nc.slack,
        basis_tolerance: ctx.tol(nc.basis_tolerance),
        ratio_slack: ctx.tol(nc.ratio_slack),
    };
    let rep = ly_audit(&audit, &samples)?;
    let fails = rep.records.iter().filter(|r| !r.pass).count();
    out.gate(
        "inequality",
        rep.inequality_holds,
        format!("C = {:.4}, slack {}, {fails} of {} records above the bound", rep.c_fit, rep.slack, rep.records.len()),
    );
    out.gate(
        "basis stabilized",
        rep.basis_stable,
        format!(
            "max change {:.4} (<= {:.3}) between {} and {} test functions",
            rep.max_basis_change,
            audit.basis_tolerance,
            small.len(),
            full.len()
        ),
    );
    let worst = rep.ratios.iter().map(|r| r.1).fold(0.0, f64::max);
    out.gate(
        "strong contraction",
        rep.ratios_ok && !rep.ratios.is_empty(),
        format!("worst ratio {worst:.4} (<= {:.4}) over {} mean-free samples", rep.ratio_bound, rep.ratios.len()),
    );
    ctx.csv(
        "ly",
        rep.records.iter().map(|r| LyRow {
            id: r.id.clone(),
            n: r.n,
            strong: r.strong,
            weak: r.weak,
            bound: r.bound,
            pass: r.pass,
            basis_change: r.basis_change,
        }),
    )?;
    ctx.csv("ly_ratios", rep.ratios.iter().map(|(id, ratio)| RatioRow { id: id.clone(), ratio: *ratio, bound: rep.ratio_bound }))?;

    // strong norm of the slice pushforwards
    let h = LeafFunction::from_fn(nc.mx, nc.my, |_, y| if y > 0.5 { 1.0 } else { -1.0 })?;
    let times = log_grid(100, 2000, 16);
    let (slope, se, pts) = slice_norm_slope(&tr, &h, &full, nc.window, &times)?;
    let target = -(map.beta() + 1.0);
    let tol = ctx.tol(0.1);
    out.gate("slice norm slope", within(slope, target, tol), format!("{} se {se:.3}", fmt_pm(slope, target, tol)));
    ctx.csv("slice_norms", pts.iter().map(|&(n, strong)| SliceNormRow { n, strong }))?;

    let dist = distortion_check(&sp, 400, 200)?;
    let tol = ctx.tol(0.05);
    out.gate(
        "distortion",
        dist.finite && dist.refinement_change <= tol,
        format!(
            "image-form bound {:.4} (refined {:.4}), change {:.2e} (<= {tol:.2})",
            dist.max_image, dist.refined_max_image, dist.refinement_change
        ),
    );
    out.note(format!(
        "domain-form bound {:.3e} grows with the return time (refined {:.3e})",
        dist.max_domain, dist.refined_max_domain
    ));
    ctx.csv("distortion", dist.per_branch.iter().map(|&(n, domain, image)| DistortionRow { n, domain, image }))?;
    Ok(out)
}

#[derive(Serialize)]
struct CesaroRow {
    n: usize,
    partial_sum: f64,
    predicted: f64,
}

/// Growth of the partial sums of a scalar renewal sequence.
pub fn cesaro(ctx: &Ctx) -> Result<Outcome> {
    let mut out = Outcome::new("Cesaro growth");
    let r = &ctx.cfg.renewal;
    let b = r.scalar_beta;
    let n = r.scalar_n;
    let d0 = renewal_constant(b)?.d0;
    let (p, c) = zeta_masses(b, n);
    let u = scalar_renewal(&p, n)?;
    let rep = cesaro_check(&u, b, c, n / 10, n)?;
    let tol = ctx.tol(0.03);
    out.gate("slope", within(rep.slope, b, tol), fmt_pm(rep.slope, b, tol));
    let ptol = ctx.tol(0.10);
    out.gate(
        "prefactor",
        (rep.prefactor_ratio - 1.0).abs() <= ptol,
        format!("S_n / (d0 n^beta / (c beta)) = {:.4} (1 +- {ptol:.2})", rep.prefactor_ratio),
    );

    // finite mean: linear growth
    let geo: Vec<f64> = (1..=60).map(|j| 0.5f64.powi(j)).collect();
    let ug = scalar_renewal(&geo, n)?;
    let rg = cesaro_check(&ug, 2.0, 1.0, n / 10, n)?;
    let tol = ctx.tol(0.01);
    out.gate("finite mean", within(rg.slope, 1.0, tol), fmt_pm(rg.slope, 1.0, tol));

    let mut acc = 0.0;
    let mut partial = Vec::with_capacity(u.len());
    for x in &u {
        acc += x;
        partial.push(acc);
    }
    ctx.csv(
        "cesaro",
        log_grid(1, n, 200).into_iter().map(|k| CesaroRow {
            n: k,
            partial_sum: partial[k],
            predicted: d0 / (c * b) * (k as f64).powf(b),
        }),
    )?;
    Ok(out)
}
