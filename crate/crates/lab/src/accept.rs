//! The twelve-criterion acceptance suite.

use std::fs;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use crate::checks::{self, Ctx, Outcome};
use crate::config::{ExperimentConfig, MapConfig};
use crate::error::{LabError, Result};
use crate::output::{csv_files, Manifest, ManifestCheck, RunDir};

#[derive(Debug, Clone)]
pub struct CriterionResult {
    pub id: u8,
    pub title: &'static str,
    pub pass: bool,
    pub outcome: Outcome,
    pub seconds: f64,
    /// wall-clock budget in seconds
    pub budget: f64,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        let status = if self.pass { "PASS" } else { "FAIL" };
        let failed = self.outcome.failed_gates();
        let why = if failed.is_empty() { String::new() } else { format!(" [failed: {}]", failed.join(", ")) };
        format!("criterion {:2} {status}  {}  ({:.1} s){why}", self.id, self.title, self.seconds)
    }
}

#[derive(Debug, Clone)]
pub struct AcceptanceReport {
    pub criteria: Vec<CriterionResult>,
}

impl AcceptanceReport {
    pub fn pass(&self) -> bool {
        self.criteria.iter().all(|c| c.pass)
    }

    pub fn get(&self, id: u8) -> Option<&CriterionResult> {
        self.criteria.iter().find(|c| c.id == id)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for c in &self.criteria {
            s.push_str(&c.line());
            s.push('\n');
            for g in &c.outcome.gates {
                s.push_str(&format!("    {} {}: {}\n", if g.pass { "ok  " } else { "FAIL" }, g.name, g.detail));
            }
            for n in &c.outcome.notes {
                s.push_str(&format!("    note: {n}\n"));
            }
        }
        let passed = self.criteria.iter().filter(|c| c.pass).count();
        s.push_str(&format!("{passed} of {} criteria pass\n", self.criteria.len()));
        s
    }
}

pub const TITLES: [(u8, &str, f64); 12] = [
    (1, "tail law", 60.0),
    (2, "eigenvalue asymptotics", 300.0),
    (3, "scalar renewal oracle", 60.0),
    (4, "operator first-order mixing", 600.0),
    (5, "rank-one oracle", 60.0),
    (6, "higher-order structure", 600.0),
    (7, "invertible mixing", 1200.0),
    (8, "finite-measure decay", 600.0),
    (9, "slice identity and slice decay", 120.0),
    (10, "Lasota-Yorke audit", 600.0),
    (11, "Cesaro growth", 60.0),
    (12, "determinism", f64::INFINITY),
];

fn run_one(ctx: &Ctx, id: u8) -> Result<Outcome> {
    let cfg = ctx.cfg;
    let map = &cfg.map;
    match id {
        1 => checks::tail_law(ctx, map, true),
        2 => checks::eigen_asymptotics(ctx, map),
        3 => checks::scalar_oracle(ctx),
        4 => checks::first_order(ctx, map),
        5 => checks::rank_one_oracle(ctx),
        6 => checks::higher_order(ctx, map),
        7 => {
            let mut out = checks::mixing(ctx, map, true, "invertible mixing")?;
            let nm = MapConfig { kind: crate::config::MapKindConfig::NonMarkov, branches: Vec::new(), ..map.clone() };
            let sub = Ctx { prefix: format!("{}non_markov_", ctx.prefix), ..*ctx };
            out.absorb_as("non-Markov ", checks::mixing(&sub, &nm, false, "non-Markov mixing")?);
            Ok(out)
        }
        8 => checks::finite_decay(ctx, &MapConfig::lsv(cfg.mix.finite_alpha)),
        9 => checks::slice_decay(ctx, map),
        10 => checks::ly(ctx, map),
        11 => checks::cesaro(ctx),
        _ => Err(LabError::Config(format!("unknown criterion {id}"))),
    }
}

fn criteria_1_to_11(cfg: &ExperimentConfig, dir: &RunDir, pool: &rayon::ThreadPool) -> Result<Vec<CriterionResult>> {
    let mut out = Vec::new();
    for &(id, title, budget) in TITLES.iter().filter(|t| t.0 <= 11 && cfg.criteria.contains(&t.0)) {
        let ctx = Ctx { cfg, dir, pool, prefix: format!("c{id:02}_") };
        let t = Instant::now();
        let mut outcome = run_one(&ctx, id)?;
        let seconds = t.elapsed().as_secs_f64();
        outcome.note(format!("runtime budget {budget:.0} s"));
        let pass = outcome.pass() && seconds < budget;
        if seconds >= budget {
            outcome.gate("runtime", false, format!("{seconds:.1} s over the {budget:.0} s budget"));
        }
        out.push(CriterionResult { id, title, pass, outcome, seconds, budget });
    }
    Ok(out)
}

/// Compare every CSV in `a` with the file of the same name in `b`.
pub fn compare_csv_dirs(a: &Path, b: &Path) -> Result<(usize, Vec<String>)> {
    let (na, nb) = (csv_files(a)?, csv_files(b)?);
    let mut differ = Vec::new();
    for name in na.iter().filter(|n| !nb.contains(n)).chain(nb.iter().filter(|n| !na.contains(n))) {
        differ.push(format!("{name} (missing on one side)"));
    }
    for name in na.iter().filter(|n| nb.contains(n)) {
        let x = fs::read(a.join(name)).map_err(|e| LabError::io(a.join(name), e))?;
        let y = fs::read(b.join(name)).map_err(|e| LabError::io(b.join(name), e))?;
        if x != y {
            differ.push(name.clone());
        }
    }
    Ok((na.len(), differ))
}

pub fn make_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| LabError::Pool(e.to_string()))
}

/// Run the suite into `out`. Criterion 12 repeats criteria 1-11 into
/// `out/rerun` and compares the CSVs byte for byte.
pub fn run_acceptance(cfg: &ExperimentConfig, out: &Path) -> Result<AcceptanceReport> {
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let t0 = Instant::now();
    let dir = RunDir::create(out)?;
    let pool = make_pool(cfg.threads)?;
    let mut criteria = criteria_1_to_11(cfg, &dir, &pool)?;

    if cfg.criteria.contains(&12) {
        let t = Instant::now();
        let rerun = RunDir::create(out.join("rerun"))?;
        criteria_1_to_11(cfg, &rerun, &pool)?;
        let (count, differ) = compare_csv_dirs(dir.root(), rerun.root())?;
        let mut outcome = Outcome { name: "determinism".into(), ..Outcome::default() };
        let detail = if differ.is_empty() {
            format!("{count} CSV files byte-identical across two runs")
        } else {
            format!("{} of {count} differ: {}", differ.len(), differ.join(", "))
        };
        outcome.gate("byte-identical CSVs", differ.is_empty() && count > 0, detail);
        let pass = outcome.pass();
        criteria.push(CriterionResult {
            id: 12,
            title: TITLES[11].1,
            pass,
            outcome,
            seconds: t.elapsed().as_secs_f64(),
            budget: f64::INFINITY,
        });
    }

    let report = AcceptanceReport { criteria };
    dir.write_text("summary.txt", &report.summary())?;
    Manifest {
        command: "accept".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        threads: cfg.threads,
        gate_slack: cfg.gate_slack,
        started_unix: started,
        total_seconds: t0.elapsed().as_secs_f64(),
        config: cfg.to_canonical()?,
        checks: report
            .criteria
            .iter()
            .map(|c| ManifestCheck { name: format!("{} {}", c.id, c.title), pass: c.pass, seconds: c.seconds })
            .collect(),
    }
    .write(&dir)?;
    Ok(report)
}
