//! `mvspde` command-line driver.
//!
//! Every subcommand parses and validates the configuration before any
//! computation. Exit codes: 0 on success, 2 on a configuration or
//! assumption failure, 1 on any other error.

pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand};
use mvspde::coefficients::validate_model;
use mvspde::experiments::{
    auxiliary_gap_study, ergodicity_study, hoelder_study, persist, picard_study, rate_study, ExperimentResult,
    GridPoint, RateStudy,
};
use mvspde::multiscale::{AveragedDrift, ErgodicSettings};
use mvspde::solver::{moment_bound_check, simulate_mkv};
use mvspde::spectral::ValidationReport;

pub use config::{ConfigError, ConfigFile};

#[derive(Debug, Parser)]
#[command(name = "mvspde", version, about = "Spectral Galerkin simulator for McKean-Vlasov SPDEs with stable noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `sim.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `study.out_dir` (default `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Check the model assumptions and print the report.
    Validate,
    /// Run the interacting particle system and record its moment curve.
    Simulate,
    /// Picard iteration on law flows.
    Picard,
    /// Relaxation of the frozen fast equation.
    Ergodicity,
    /// Strong averaging error over an eps grid.
    RateStudy,
    /// Time increments and auxiliary-process gap over a delta grid.
    HoelderStudy,
}

impl Command {
    /// Assumptions a subcommand relies on.
    fn required(self) -> &'static [&'static str] {
        match self {
            Command::Simulate | Command::Picard => &["A1", "A2", "A3"],
            _ => &["A1", "A2", "A3", "B1", "B2", "B3"],
        }
    }
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn classify(err: anyhow::Error) -> Self {
        let usage = err.downcast_ref::<ConfigError>().is_some()
            || err.downcast_ref::<mvspde::Error>().is_some_and(|e| e.is_assumption());
        if usage {
            Failure::Usage(err)
        } else {
            Failure::Runtime(err)
        }
    }
}

fn print_report(report: &ValidationReport) {
    for c in &report.checks {
        println!("{} {}: {}", c.id, if c.passed { "pass" } else { "FAIL" }, c.detail);
    }
}

fn gate(report: &ValidationReport, ids: &[&str]) -> Result<(), Failure> {
    match report.checks.iter().find(|c| !c.passed && ids.contains(&c.id.as_str())) {
        Some(c) => Err(Failure::Usage(anyhow::anyhow!("assumption {} failed: {}: {}", c.id, c.id, c.detail))),
        None => Ok(()),
    }
}

fn save(result: ExperimentResult, config: &ConfigFile, out: &Path) -> anyhow::Result<PathBuf> {
    let result = result.with_config(config.canonical());
    let path = persist(&result, out)?;
    for flag in &result.flags {
        eprintln!("note: {flag}");
    }
    if let Some(s) = result.fitted_slope {
        eprintln!(
            "{}: fitted slope {:.4} (reference {})",
            result.kind,
            s,
            result.reference_slope.map_or("none".to_string(), |r| format!("{r:.4}"))
        );
    }
    Ok(path)
}

fn execute(command: Command, config: &ConfigFile, out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let m = config.study.m.unwrap_or(1.0);
    match command {
        Command::Validate => Ok(Vec::new()),
        Command::Simulate => {
            let sim = config.sim_config()?;
            let ens = simulate_mkv(&sim)?;
            let p = sim.spec.p;
            let report = moment_bound_check(&ens, m.max(p), p, sim.spec.alpha)?;
            let mut result = ExperimentResult::new("simulate");
            result.grid = ens
                .times()
                .iter()
                .zip(&report.values)
                .map(|(&t, &v)| GridPoint { param: t, error: v, stderr: 0.0 })
                .collect();
            result.seeds.push(sim.seed);
            if !report.stable {
                result.flags.push("moment curve still growing at the horizon".into());
            }
            Ok(vec![save(result, config, out)?])
        }
        Command::Picard => {
            let sim = config.sim_config()?;
            let n_iters = config.study.n_iters.unwrap_or(8);
            let result = picard_study(&sim, n_iters, config.study.lambda_weight)?;
            Ok(vec![save(result, config, out)?])
        }
        Command::Ergodicity => {
            let grid = config.grid("ergodicity")?;
            let sim = config.sim_config()?;
            let drift = AveragedDrift::best_available(
                &sim.spec,
                &sim.coeffs,
                ErgodicSettings { seed: sim.seed, ..Default::default() },
            )?;
            let inputs = config.frozen_inputs()?;
            let replicas = config.study.replicas.unwrap_or(sim.m);
            let result = ergodicity_study(&inputs, &drift, &sim.coeffs, grid, replicas, sim.seed)?;
            Ok(vec![save(result, config, out)?])
        }
        Command::RateStudy => {
            let grid = config.grid("rate-study")?.to_vec();
            let template = config.multiscale_config(grid[0])?;
            let mut study = RateStudy::new(template, grid, m);
            if let Some(k) = config.study.fast_steps_per_eps {
                study.fast_steps_per_eps = k;
            }
            let result = rate_study(&study)?;
            Ok(vec![save(result, config, out)?])
        }
        Command::HoelderStudy => {
            let grid = config.grid("hoelder-study")?;
            let eps = config.study.epsilon.unwrap_or(1.0 / 64.0);
            let cfg = config.multiscale_config(eps)?;
            let hoelder = hoelder_study(&cfg, grid)?;
            let aux = auxiliary_gap_study(&cfg, grid)?;
            Ok(vec![save(hoelder, config, out)?, save(aux, config, out)?])
        }
    }
}

fn run_parsed(cli: Cli) -> Result<(), Failure> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Failure::Usage(anyhow::anyhow!("--config is required")))?;
    let mut config = ConfigFile::load(path).map_err(Failure::classify)?;
    if let Some(seed) = cli.seed {
        config.sim.seed = seed;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| config.study.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));

    let sim = config.sim_config().map_err(Failure::classify)?;
    let report = validate_model(&sim.spec, &sim.coeffs)
        .context("validating the model")
        .map_err(Failure::classify)?;
    if matches!(cli.command, Command::Validate) {
        print_report(&report);
        return gate(&report, &report.checks.iter().map(|c| c.id.as_str()).collect::<Vec<_>>());
    }
    gate(&report, cli.command.required())?;

    let work = || execute(cli.command, &config, &out).map_err(Failure::classify);
    let paths = match cli.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Failure::Runtime(e.into()))?
            .install(work)?,
        None => work()?,
    };
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run_parsed(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
