//! Experiment configuration: a TOML file whose every field has a default, so
//! an empty file is the shipped acceptance configuration.

use std::path::{Path, PathBuf};

use oprenew_core::maps::{AffineBranch, FiberMap, IntervalMapSpec, SkewProduct};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKindConfig {
    Lsv,
    NonMarkov,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FiberKind {
    Stacked,
    Sheared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapConfig {
    pub kind: MapKindConfig,
    pub alpha: f64,
    /// custom maps only: rows `[lo, hi, slope, intercept]` on (1/2, 1]
    pub branches: Vec<[f64; 4]>,
    pub fiber: FiberKind,
    /// shear amplitude for the sheared fiber
    pub shear: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self { kind: MapKindConfig::Lsv, alpha: 4.0 / 3.0, branches: Vec::new(), fiber: FiberKind::Stacked, shear: 0.0 }
    }
}

impl MapConfig {
    pub fn lsv(alpha: f64) -> Self {
        Self { alpha, ..Self::default() }
    }

    pub fn non_markov(alpha: f64) -> Self {
        Self { kind: MapKindConfig::NonMarkov, alpha, ..Self::default() }
    }

    pub fn beta(&self) -> f64 {
        1.0 / self.alpha
    }

    pub fn interval_map(&self) -> Result<IntervalMapSpec> {
        let m = match self.kind {
            MapKindConfig::Lsv => IntervalMapSpec::lsv(self.alpha),
            MapKindConfig::NonMarkov => IntervalMapSpec::non_markov(self.alpha),
            MapKindConfig::Custom => IntervalMapSpec::custom(
                self.alpha,
                self.branches.iter().map(|r| AffineBranch::new(r[0], r[1], r[2], r[3])).collect(),
            ),
        };
        m.map_err(|e| LabError::Config(format!("map: {e}")))
    }

    pub fn skew_product(&self) -> Result<SkewProduct> {
        let fiber = match self.fiber {
            FiberKind::Stacked => FiberMap::Stacked,
            FiberKind::Sheared => FiberMap::Sheared { eps: self.shear },
        };
        SkewProduct::new(self.interval_map()?, fiber).map_err(|e| LabError::Config(format!("map: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TailsConfig {
    pub n_max: usize,
    pub m: usize,
    pub exact_depth: usize,
    pub fit_lo: usize,
    pub fit_hi: usize,
}

impl Default for TailsConfig {
    fn default() -> Self {
        Self { n_max: 100_000, m: 2048, exact_depth: 512, fit_lo: 100, fit_hi: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumConfig {
    pub m: usize,
    pub exact_depth: usize,
    pub u_lo: f64,
    pub u_hi: f64,
    pub points: usize,
    /// where the prefactor and the refinement change are read off
    pub u_ref: f64,
    /// refinement pair `(refine_m, 2 refine_m)`
    pub refine_m: usize,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self { m: 4096, exact_depth: 512, u_lo: 1e-4, u_hi: 1e-2, points: 9, u_ref: 1e-3, refine_m: 1024 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenewalConfig {
    pub m: usize,
    pub exact_depth: usize,
    /// operator series length for the first-order check
    pub n: usize,
    /// operator series length for the higher-order fit
    pub rates_n: usize,
    /// start of the expansion fit window (end is `rates_n`)
    pub rates_lo: usize,
    /// start of the window for the remainder exponent
    pub remainder_lo: usize,
    /// scalar series with `p_n` proportional to `n^{-1 - scalar_beta}`
    pub scalar_beta: f64,
    pub scalar_n: usize,
    pub rank_one_trials: usize,
    pub rank_one_len: usize,
}

impl Default for RenewalConfig {
    fn default() -> Self {
        Self {
            m: 2048,
            exact_depth: 512,
            n: 2000,
            rates_n: 10_000,
            rates_lo: 1000,
            remainder_lo: 100,
            scalar_beta: 0.6,
            scalar_n: 100_000,
            rank_one_trials: 5,
            rank_one_len: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixConfig {
    pub m: usize,
    pub exact_depth: usize,
    pub samples: u64,
    pub block_size: u64,
    pub lag_lo: usize,
    pub lag_hi: usize,
    pub per_decade: usize,
    /// the finite-measure experiment
    pub finite_alpha: f64,
    pub finite_m: usize,
    pub finite_depth: usize,
    pub finite_samples: u64,
    pub finite_lag_lo: usize,
    pub finite_lag_hi: usize,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            m: 2048,
            exact_depth: 512,
            samples: 10_000_000,
            block_size: 100_000,
            lag_lo: 50,
            lag_hi: 800,
            per_decade: 24,
            finite_alpha: 0.5,
            finite_m: 8192,
            finite_depth: 64,
            finite_samples: 10_000_000,
            finite_lag_lo: 20,
            finite_lag_hi: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormsConfig {
    pub mx: usize,
    pub my: usize,
    /// ladder depth of the 2D transfer
    pub depth: usize,
    pub q: f64,
    pub lambda: f64,
    pub powers: usize,
    /// dyadic levels of the small test family; the full one has one more
    pub levels: usize,
    pub basis: usize,
    pub window: usize,
    pub samples: usize,
    pub slack: f64,
    pub basis_tolerance: f64,
    pub ratio_slack: f64,
    /// grid for the slice identity and slice masses
    pub slice_m: usize,
    pub slice_lo: usize,
    pub slice_hi: usize,
}

impl Default for NormsConfig {
    fn default() -> Self {
        Self {
            mx: 128,
            my: 513,
            depth: 2000,
            q: 0.5,
            lambda: 2.0,
            powers: 6,
            levels: 7,
            basis: 37,
            window: 4,
            samples: 20,
            slack: 1.25,
            basis_tolerance: 0.02,
            ratio_slack: 0.1,
            slice_m: 1024,
            slice_lo: 100,
            slice_hi: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// worker threads; results do not depend on it
    pub threads: usize,
    pub out: PathBuf,
    /// multiplies every numerical tolerance
    pub gate_slack: f64,
    /// acceptance criteria to run
    pub criteria: Vec<u8>,
    pub map: MapConfig,
    pub tails: TailsConfig,
    pub spectrum: SpectrumConfig,
    pub renewal: RenewalConfig,
    pub mix: MixConfig,
    pub norms: NormsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            threads: 1,
            out: PathBuf::from("runs/default"),
            gate_slack: 1.0,
            criteria: (1..=12).collect(),
            map: MapConfig::default(),
            tails: TailsConfig::default(),
            spectrum: SpectrumConfig::default(),
            renewal: RenewalConfig::default(),
            mix: MixConfig::default(),
            norms: NormsConfig::default(),
        }
    }
}

fn need(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(LabError::Config(msg()))
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical text: every field, fixed order.
    pub fn to_canonical(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        // TOML integers are signed
        need(self.seed <= i64::MAX as u64, || format!("seed {} exceeds {}", self.seed, i64::MAX))?;
        need(self.threads >= 1, || "threads must be at least 1".into())?;
        need(self.gate_slack.is_finite() && self.gate_slack > 0.0, || "gate_slack must be positive".into())?;
        need(!self.out.as_os_str().is_empty(), || "out must name a directory".into())?;
        need(self.criteria.iter().all(|c| (1..=12).contains(c)), || "criteria are numbered 1 to 12".into())?;
        need(self.map.alpha.is_finite() && self.map.alpha > 0.0, || "map.alpha must be positive".into())?;
        need(self.map.kind != MapKindConfig::Custom || !self.map.branches.is_empty(), || {
            "custom maps need a branch table".into()
        })?;
        self.map.skew_product()?;

        let t = &self.tails;
        need(t.n_max >= 2 && t.m >= 2 && t.exact_depth >= 2, || "tails sizes must be at least 2".into())?;
        need(t.fit_lo >= 1 && t.fit_hi <= t.n_max && t.fit_hi >= 10 * t.fit_lo, || {
            format!("tails fit window [{}, {}] needs hi <= n_max and hi >= 10 lo", t.fit_lo, t.fit_hi)
        })?;

        let s = &self.spectrum;
        need(s.m >= 2 && s.refine_m >= 2 && s.exact_depth >= 2 && s.points >= 3, || "spectrum sizes too small".into())?;
        need(0.0 < s.u_lo && s.u_lo < s.u_hi && s.u_hi < 1.0, || "spectrum needs 0 < u_lo < u_hi < 1".into())?;
        need(s.u_ref > 0.0 && s.u_ref < 1.0, || "spectrum.u_ref must lie in (0, 1)".into())?;

        let r = &self.renewal;
        need(r.m >= 2 && r.exact_depth >= 2, || "renewal grid too small".into())?;
        need(r.n >= 20 && r.n <= t.n_max, || "renewal.n must lie in [20, tails.n_max]".into())?;
        need(r.rates_n <= t.n_max && r.rates_lo >= 1 && r.rates_lo * 2 <= r.rates_n, || {
            "renewal rates window is empty or beyond n_max".into()
        })?;
        need(r.remainder_lo >= 1 && r.remainder_lo * 10 <= r.rates_n, || "renewal.remainder_lo too large".into())?;
        need(r.scalar_beta > 0.0 && r.scalar_beta < 1.0, || "renewal.scalar_beta must lie in (0, 1)".into())?;
        need(r.scalar_n >= 100, || "renewal.scalar_n must be at least 100".into())?;
        need(r.rank_one_trials >= 1 && r.rank_one_len >= 2, || "rank-one trials need a length".into())?;

        let x = &self.mix;
        need(x.m >= 2 && x.exact_depth >= 2 && x.finite_m >= 2 && x.finite_depth >= 2, || "mix grids too small".into())?;
        need(x.samples >= 2 && x.finite_samples >= 2 && x.block_size >= 1, || "mix sample counts too small".into())?;
        need(x.lag_lo >= 1 && x.lag_lo < x.lag_hi && x.per_decade >= 1, || "mix lag grid is empty".into())?;
        need(x.finite_lag_lo >= 1 && x.finite_lag_lo < x.finite_lag_hi, || "finite lag grid is empty".into())?;
        need(x.finite_alpha > 0.0 && x.finite_alpha < 1.0, || "mix.finite_alpha must lie in (0, 1)".into())?;

        let n = &self.norms;
        need(n.mx >= 2 && n.my >= 65 && n.depth >= 2, || "norms grid too small (my >= 65)".into())?;
        need(n.q > 0.0 && n.q < 1.0 && n.lambda > 1.0, || "norms needs q in (0, 1) and lambda > 1".into())?;
        need(n.powers >= 1 && n.samples >= 1 && n.window >= 1 && n.basis >= 8, || "norms audit sizes too small".into())?;
        need(n.levels < oprenew_core::norms::TestFamily::max_levels(n.my), || {
            format!("norms.levels + 1 dyadic levels do not fit a {}-node leaf", n.my)
        })?;
        // R^n h carries structure on dyadic scales down to 2^-n
        need(n.levels >= n.powers, || "norms.levels must be at least norms.powers".into())?;
        need(n.slack >= 1.0 && n.basis_tolerance > 0.0 && n.ratio_slack >= 0.0, || "norms slacks invalid".into())?;
        need(n.slice_m >= 2 && n.slice_lo >= 1 && n.slice_hi <= t.n_max && n.slice_lo * 10 <= n.slice_hi, || {
            "norms slice window invalid".into()
        })?;
        Ok(())
    }
}
