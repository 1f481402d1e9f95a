//! Experiments on top of `oprenew-core`: configuration, CSV output, the
//! acceptance suite and the `oprenew` command line.

pub mod accept;
pub mod checks;
pub mod config;
pub mod error;
pub mod output;

use std::time::{Instant, SystemTime, UNIX_EPOCH};

use checks::{Ctx, Outcome};
use config::{ExperimentConfig, FiberKind, MapKindConfig};
use error::{LabError, Result};
use output::{Manifest, ManifestCheck, RunDir};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Tails,
    Spectrum,
    Renewal,
    Mix,
    Rates,
    Norms,
    Accept,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Self::Tails => "tails",
            Self::Spectrum => "spectrum",
            Self::Renewal => "renewal",
            Self::Mix => "mix",
            Self::Rates => "rates",
            Self::Norms => "norms",
            Self::Accept => "accept",
        }
    }
}

/// What a run produced: overall verdict and the text of `summary.txt`.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub pass: bool,
    pub summary: String,
}

fn summarize(outcomes: &[Outcome]) -> String {
    let mut s = String::new();
    for o in outcomes {
        s.push_str(&format!("{} {}\n", if o.pass() { "PASS" } else { "FAIL" }, o.name));
        for g in &o.gates {
            s.push_str(&format!("    {} {}: {}\n", if g.pass { "ok  " } else { "FAIL" }, g.name, g.detail));
        }
        for n in &o.notes {
            s.push_str(&format!("    note: {n}\n"));
        }
    }
    s
}

fn experiments(ctx: &Ctx, sub: Subcommand) -> Result<Vec<Outcome>> {
    let map = &ctx.cfg.map;
    let markov = map.interval_map()?.is_markov();
    Ok(match sub {
        Subcommand::Tails => vec![checks::tail_law(ctx, map, true)?],
        Subcommand::Spectrum => vec![checks::eigen_asymptotics(ctx, map)?],
        Subcommand::Renewal => {
            let mut v = vec![checks::scalar_oracle(ctx)?, checks::rank_one_oracle(ctx)?, checks::cesaro(ctx)?];
            if map.beta() < 1.0 {
                v.insert(2, checks::first_order(ctx, map)?);
            }
            v
        }
        Subcommand::Mix if map.beta() < 1.0 => vec![checks::mixing(ctx, map, markov, "invertible mixing")?],
        Subcommand::Mix => vec![checks::finite_decay(ctx, map)?],
        Subcommand::Rates if markov => vec![checks::higher_order(ctx, map)?],
        Subcommand::Rates => return Err(LabError::Config("`rates` needs a Markov map".into())),
        Subcommand::Norms => {
            if map.kind != MapKindConfig::Lsv || map.fiber != FiberKind::Stacked {
                return Err(LabError::Config("`norms` runs on the LSV map with the stacked fiber".into()));
            }
            vec![checks::slice_decay(ctx, map)?, checks::ly(ctx, map)?]
        }
        Subcommand::Accept => unreachable!(),
    })
}

/// Run one subcommand into `cfg.out`.
pub fn run(sub: Subcommand, cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    if sub == Subcommand::Accept {
        let r = accept::run_acceptance(cfg, &cfg.out)?;
        return Ok(RunReport { pass: r.pass(), summary: r.summary() });
    }
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let t0 = Instant::now();
    let dir = RunDir::create(&cfg.out)?;
    let pool = accept::make_pool(cfg.threads)?;
    let ctx = Ctx { cfg, dir: &dir, pool: &pool, prefix: String::new() };
    let outcomes = experiments(&ctx, sub)?;
    let summary = summarize(&outcomes);
    dir.write_text("summary.txt", &summary)?;
    Manifest {
        command: sub.name().into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        threads: cfg.threads,
        gate_slack: cfg.gate_slack,
        started_unix: started,
        total_seconds: t0.elapsed().as_secs_f64(),
        config: cfg.to_canonical()?,
        checks: outcomes.iter().map(|o| ManifestCheck { name: o.name.clone(), pass: o.pass(), seconds: 0.0 }).collect(),
    }
    .write(&dir)?;
    Ok(RunReport { pass: outcomes.iter().all(Outcome::pass), summary })
}
