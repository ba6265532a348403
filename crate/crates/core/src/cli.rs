//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
//! arguments, 3 infinite value function, 4 missing solve artifacts.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::config::{Format, RunConfig};
use crate::io::{self, IoError};
use crate::montecarlo::{evaluate_strategy, simulate_paths, MonteCarloError, SimConfig, Strategy};
use crate::run::{prepare, RunError};
use crate::solver::{check_finiteness, smooth_fit_report, SolveError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_INFINITE: i32 = 3;
pub const EXIT_MISSING: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "optstop", version, about = "Optimal stopping of one-dimensional diffusions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve for the value function and write value.csv, solution.json and
    /// smoothfit.json.
    Solve { config: PathBuf },
    /// Estimate the discounted reward of a stopping strategy by simulation.
    Simulate {
        config: PathBuf,
        /// tau_star | never | immediate | two_sided:LO,HI | pasted:FILE
        #[arg(long, default_value = "tau_star")]
        strategy: String,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// An exit code with its message.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub msg: String,
}

impl Failure {
    fn new(code: i32, msg: impl Into<String>) -> Failure {
        Failure { code, msg: msg.into() }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Failure::new(EXIT_FAILURE, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::new(EXIT_FAILURE, e.to_string())
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        let code = match &e {
            RunError::Model(_) => EXIT_INVALID,
            RunError::Solve(SolveError::InfiniteValue { .. }) => EXIT_INFINITE,
            _ => EXIT_FAILURE,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<MonteCarloError> for Failure {
    fn from(e: MonteCarloError) -> Self {
        let code = match e {
            MonteCarloError::InvalidStrategy(_) | MonteCarloError::NotInterior(_) | MonteCarloError::Config(_) => {
                EXIT_INVALID
            }
            _ => EXIT_FAILURE,
        };
        Failure::new(code, e.to_string())
    }
}

/// Parses arguments and runs one command; returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    let res = match &cli.command {
        Command::Solve { config } => cmd_solve(config, out, err),
        Command::Simulate {
            config,
            strategy,
            paths,
            dt,
            seed,
        } => cmd_simulate(config, strategy, *paths, *dt, *seed, out),
    };
    match res {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.msg);
            f.code
        }
    }
}

fn load(path: &Path) -> Result<RunConfig, Failure> {
    RunConfig::load(path).map_err(|m| Failure::new(EXIT_INVALID, m))
}

fn out_dir(cfg: &RunConfig, path: &Path) -> Result<PathBuf, Failure> {
    let dir = cfg.output_dir(path);
    fs::create_dir_all(&dir).map_err(|e| Failure::new(EXIT_FAILURE, format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

pub fn cmd_solve(path: &Path, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), Failure> {
    let cfg = load(path)?;
    let prep = prepare(&cfg)?;
    let dir = out_dir(&cfg, path)?;
    let json_out = cfg.outputs.formats.contains(&Format::Json);
    let csv_out = cfg.outputs.formats.contains(&Format::Csv);
    let sol = match prep.solve(cfg.solve.tol_contact) {
        Ok(s) => s,
        Err(SolveError::InfiniteValue { lim_a, lim_b }) => {
            if json_out {
                let fin = check_finiteness(&prep.fp, &prep.reward);
                io::write_json(&dir.join("solution.json"), &io::infinite_json(&fin))?;
            }
            return Err(Failure::new(
                EXIT_INFINITE,
                format!("value function is infinite: limA = {lim_a}, limB = {lim_b}"),
            ));
        }
        Err(e) => return Err(RunError::from(e).into()),
    };
    for w in &sol.diagnostics.warnings {
        let _ = writeln!(err, "warning: {w}");
    }
    if csv_out {
        io::write_value_csv(&dir.join("value.csv"), &prep.fp, &sol)?;
    }
    if json_out {
        let doc = io::solution_json(&sol, csv_out.then_some("value.csv"))?;
        io::write_json(&dir.join("solution.json"), &doc)?;
        let sf = smooth_fit_report(&prep.fp, &prep.reward, &sol);
        io::write_json(&dir.join("smoothfit.json"), &io::smooth_fit_json(&sf)?)?;
    }
    for w in &sol.waiting {
        let _ = writeln!(out, "waiting ({}, {}): A = {}, B = {}", w.c, w.d, w.a, w.b);
    }
    let _ = writeln!(out, "wrote {}", dir.display());
    Ok(())
}

/// Parses `--strategy`; `tau_star` reads the solve artifacts in `dir`.
pub fn parse_strategy(spec: &str, dir: &Path, base: &Path) -> Result<Strategy, Failure> {
    let invalid = |m: String| Failure::new(EXIT_INVALID, m);
    let s = match spec.split_once(':') {
        None => match spec {
            "tau_star" => {
                let p = dir.join("solution.json");
                if !p.exists() {
                    return Err(Failure::new(
                        EXIT_MISSING,
                        format!("{} not found; run `optstop solve` first", p.display()),
                    ));
                }
                match io::read_tau_star_region(&p)? {
                    None => return Err(Failure::new(EXIT_INFINITE, "the recorded value function is infinite")),
                    Some(region) if region.is_empty() => Strategy::Never,
                    Some(region) => Strategy::StopAtSet(region),
                }
            }
            "never" => Strategy::Never,
            "immediate" => Strategy::Immediate,
            _ => return Err(invalid(format!("unknown strategy `{spec}`"))),
        },
        Some(("two_sided", rest)) => {
            let v: Vec<f64> = rest
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| invalid(format!("two_sided:{rest}: {e}")))?;
            match v.as_slice() {
                [lo, hi] => Strategy::TwoSided(*lo, *hi),
                _ => return Err(invalid(format!("two_sided needs LO,HI, got `{rest}`"))),
            }
        }
        Some(("pasted", file)) => {
            let p = base.parent().unwrap_or(Path::new(".")).join(file);
            let text = fs::read_to_string(&p).map_err(|e| Failure::new(EXIT_MISSING, format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", p.display())))?
        }
        _ => return Err(invalid(format!("unknown strategy `{spec}`"))),
    };
    s.validate()?;
    Ok(s)
}

fn cmd_simulate(
    path: &Path,
    strategy: &str,
    paths: Option<usize>,
    dt: Option<f64>,
    seed: Option<u64>,
    out: &mut dyn Write,
) -> Result<(), Failure> {
    let cfg = load(path)?;
    let dir = cfg.output_dir(path);
    let strat = parse_strategy(strategy, &dir, path)?;
    let x0 = cfg
        .sim
        .x0
        .ok_or_else(|| Failure::new(EXIT_INVALID, "sim.x0 is required for simulate"))?;
    let mut sim = SimConfig::from(&cfg.sim);
    sim.n_paths = paths.unwrap_or(sim.n_paths);
    sim.dt = dt.unwrap_or(sim.dt);
    sim.seed = seed.unwrap_or(sim.seed);
    let prep = prepare(&cfg)?;
    let batch = simulate_paths(&prep.fp, x0, sim)?;
    let est = evaluate_strategy(&batch, &strat, &prep.reward)?;
    let dir = out_dir(&cfg, path)?;
    let doc = json!({
        "mean": est.mean,
        "std_error": est.std_error,
        "n_paths": est.n_paths,
        "n_effective": est.n_effective,
        "dt": est.dt,
        "seed": est.seed,
        "x0": x0,
        "strategy": strategy,
        "warnings": batch.warnings,
    });
    io::write_json(&dir.join("estimate.json"), &doc)?;
    let _ = writeln!(out, "{} ± {}", est.mean, 1.96 * est.std_error);
    Ok(())
}
