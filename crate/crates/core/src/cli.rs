//! `covsteer` command-line interface: `check`, `solve` and `simulate`.
//!
//! Machine-readable outputs carry full double precision and no timestamps,
//! so repeated invocations with the same inputs produce identical bytes.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::kalman;
use crate::lift;
use crate::model::{self, SteeringProblem};
use crate::policy::{self, Policy, PolicyExport};
use crate::simulate;
use crate::transcribe::{self, SolveOptions, SolveStatus, TerminalForm, Transcription};
use crate::{config, Error};

pub mod exit {
    pub const OK: i32 = 0;
    pub const ERROR: i32 = 1;
    pub const VALIDATION: i32 = 2;
    pub const INFEASIBLE: i32 = 3;
    pub const NUMERICAL: i32 = 4;
    pub const HASH_MISMATCH: i32 = 5;
}

pub const DEFAULT_SEED: u64 = 20_240_607;
pub const DEFAULT_RUNS: usize = 100_000;
pub const ELLIPSE_SAMPLES: usize = 64;

#[derive(Debug, Parser)]
#[command(
    name = "covsteer",
    version,
    about = "Output-feedback covariance steering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a configuration and run the terminal feasibility precheck.
    Check { config: PathBuf },
    /// Solve for the optimal policy and write its artifacts.
    Solve(SolveArgs),
    /// Monte Carlo validation of a solved policy.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TerminalArg {
    Lmi,
    Frobenius,
}

#[derive(Debug, Args)]
struct SolveArgs {
    config: PathBuf,
    /// Keep only feedback blocks with `k - i <= B`.
    #[arg(long)]
    bandwidth: Option<usize>,
    /// Feasibility and optimality tolerance of the interior-point solver.
    #[arg(long)]
    solver_tol: Option<f64>,
    #[arg(long, value_enum, default_value = "lmi")]
    terminal: TerminalArg,
    /// State coordinates of the covariance ellipses.
    #[arg(long, value_parser = parse_pair, default_value = "0,1")]
    ellipse_coords: (usize, usize),
    #[arg(long, default_value_t = 3.0)]
    ellipse_sigma: f64,
    /// Also write the lowered conic program as text.
    #[arg(long)]
    export_conic: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Print solver iterations.
    #[arg(long)]
    verbose: bool,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    config: PathBuf,
    policy: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RUNS)]
    runs: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Also dump every run's trajectory as CSV.
    #[arg(long)]
    trajectories: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected `i,j`, got `{s}`"))?;
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}"));
    let (a, b) = (parse(a)?, parse(b)?);
    if a == b {
        return Err("ellipse coordinates must differ".into());
    }
    Ok((a, b))
}

/// A failed command: exit code and message.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) => exit::ERROR,
            _ => exit::VALIDATION,
        };
        Failure::new(code, e.to_string())
    }
}

type CmdResult = std::result::Result<(), Failure>;

#[derive(Debug, Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config_path: String,
    config_sha256: String,
    settings: serde_json::Value,
    seeds: Vec<u64>,
    outputs: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Six significant digits for console output.
fn sig(x: f64) -> String {
    format!("{x:.5e}")
}

struct Loaded {
    bytes: Vec<u8>,
    problem: SteeringProblem,
}

fn load(path: &Path) -> std::result::Result<Loaded, Failure> {
    let bytes = std::fs::read(path).map_err(|e| {
        Failure::new(
            exit::VALIDATION,
            format!("cannot read {}: {e}", path.display()),
        )
    })?;
    let text = std::str::from_utf8(&bytes).map_err(|e| {
        Failure::new(
            exit::VALIDATION,
            format!("{} is not UTF-8: {e}", path.display()),
        )
    })?;
    let problem = config::parse_problem(text)
        .map_err(|e| Failure::new(exit::VALIDATION, format!("{}: {e}", path.display())))?;
    Ok(Loaded { bytes, problem })
}

fn validated(path: &Path) -> std::result::Result<Loaded, Failure> {
    let loaded = load(path)?;
    let report = model::validate(&loaded.problem);
    if !report.passed() {
        return Err(Failure::new(
            exit::VALIDATION,
            format!("validation failed: {}", report.failure_summary()),
        ));
    }
    Ok(loaded)
}

/// Writes files into `dir` and remembers their names for the manifest.
struct Outputs {
    dir: PathBuf,
    names: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> std::result::Result<Self, Failure> {
        std::fs::create_dir_all(dir).map_err(|e| {
            Failure::new(exit::ERROR, format!("cannot create {}: {e}", dir.display()))
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            names: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> CmdResult {
        let path = self.dir.join(name);
        std::fs::write(&path, contents).map_err(|e| {
            Failure::new(exit::ERROR, format!("cannot write {}: {e}", path.display()))
        })?;
        self.names.push(name.to_string());
        Ok(())
    }

    fn finish(mut self, name: &str, mut manifest: RunManifest) -> CmdResult {
        manifest.outputs = std::mem::take(&mut self.names);
        let json = to_json(&manifest)?;
        self.write(name, json)
    }
}

fn to_json<T: Serialize>(value: &T) -> std::result::Result<String, Failure> {
    serde_json::to_string_pretty(value)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| Failure::new(exit::ERROR, e.to_string()))
}

fn cmd_check(path: &Path) -> CmdResult {
    let loaded = load(path)?;
    let report = model::validate(&loaded.problem);
    for c in &report.checks {
        let line = format!(
            "{} {:<28} {}",
            if c.passed { "ok  " } else { "FAIL" },
            c.name,
            c.detail
        );
        println!("{}", line.trim_end());
    }
    if !report.passed() {
        return Err(Failure::new(
            exit::VALIDATION,
            format!("validation failed: {}", report.failure_summary()),
        ));
    }
    let schedule = kalman::run_schedule(&loaded.problem)?;
    let pre = model::feasibility_precheck(&loaded.problem, &schedule)?;
    let eigs = |v: &[f64]| v.iter().map(|x| sig(*x)).collect::<Vec<_>>().join(" ");
    println!(
        "terminal filter error eigenvalues: {}",
        eigs(&pre.terminal_error_eigenvalues)
    );
    println!(
        "P_f margin eigenvalues:            {}",
        eigs(&pre.margin_eigenvalues)
    );
    if !pre.passed {
        return Err(Failure::new(
            exit::VALIDATION,
            format!(
                "precheck failed: min eigenvalue of the terminal covariance margin is {}",
                sig(pre.min_eigenvalue)
            ),
        ));
    }
    println!("precheck passed: margin {}", sig(pre.min_eigenvalue));
    Ok(())
}

fn cmd_solve(args: &SolveArgs) -> CmdResult {
    let loaded = validated(&args.config)?;
    let problem = &loaded.problem;
    let nx = problem.dims().nx;
    let (ea, eb) = args.ellipse_coords;
    if ea >= nx || eb >= nx {
        return Err(Failure::new(
            exit::VALIDATION,
            format!("ellipse coordinates ({ea}, {eb}) out of range for n_x = {nx}"),
        ));
    }
    let schedule = kalman::run_schedule(problem)?;
    let ops = lift::build(problem, &schedule)?;
    let mut opts = SolveOptions {
        bandwidth: args.bandwidth,
        terminal: match args.terminal {
            TerminalArg::Lmi => TerminalForm::Lmi,
            TerminalArg::Frobenius => TerminalForm::Frobenius,
        },
        ..Default::default()
    };
    if let Some(tol) = args.solver_tol {
        if !(tol > 0.0 && tol < 1.0) {
            return Err(Failure::new(
                exit::VALIDATION,
                format!("--solver-tol {tol} outside (0, 1)"),
            ));
        }
        opts = opts.with_tolerance(tol);
    }
    opts.solver.verbose = args.verbose;

    let started = Instant::now();
    let program = match transcribe::transcribe(problem, &schedule, &ops, &opts)? {
        Transcription::Program(p) => p,
        Transcription::Infeasible(why) => {
            return Err(Failure::new(exit::INFEASIBLE, format!("infeasible: {why}")))
        }
    };
    let solver = transcribe::InteriorPoint::new(opts.solver.clone());
    let mut outcome = transcribe::solve(&program, &solver);
    if let (Some(f), Some(m)) = (&outcome.f, &outcome.m) {
        outcome.objective = Some(transcribe::terms::objective_value(
            &ops,
            &problem.prior_mean,
            f,
            m,
        ));
    }
    let elapsed = started.elapsed();
    match outcome.status {
        SolveStatus::Optimal => {}
        SolveStatus::Infeasible => {
            return Err(Failure::new(exit::INFEASIBLE, format!("infeasible: {}", outcome.message)))
        }
        SolveStatus::Unbounded | SolveStatus::NumericalFailure => {
            return Err(Failure::new(
                exit::NUMERICAL,
                format!(
                    "solver failed ({}) after {} iterations: {} (primal residual {}, dual residual {}, gap {})",
                    outcome.status,
                    outcome.iterations,
                    outcome.message,
                    sig(outcome.primal_residual),
                    sig(outcome.dual_residual),
                    sig(outcome.gap)
                ),
            ))
        }
    }
    let policy = Policy::from_outcome(&outcome, problem, &schedule, &ops)?;
    let audit = policy::audit_constraints(&policy, problem);
    let hash = sha256_hex(&loaded.bytes);
    let mut export = policy.to_export(&audit);
    export.config_sha256 = Some(hash.clone());

    let mut out = Outputs::new(&args.out)?;
    out.write("policy.json", to_json(&export)?)?;
    out.write("audit.csv", audit.to_csv())?;
    out.write("mean.csv", policy::mean_trajectory_csv(&policy))?;
    out.write(
        "ellipses.csv",
        policy::ellipse_csv(
            &policy,
            args.ellipse_coords,
            args.ellipse_sigma,
            ELLIPSE_SAMPLES,
        ),
    )?;
    out.write("schedule.csv", schedule.to_csv())?;
    if args.export_conic {
        out.write("program.txt", program.to_text())?;
    }
    let settings = serde_json::json!({
        "bandwidth": opts.bandwidth,
        "terminal": opts.terminal,
        "tie_break": opts.tie_break,
        "solver": opts.solver,
        "ellipse_coords": [ea, eb],
        "ellipse_sigma": args.ellipse_sigma,
        "ellipse_samples": ELLIPSE_SAMPLES,
    });
    out.finish(
        "solve-manifest.json",
        RunManifest {
            tool: "covsteer",
            version: env!("CARGO_PKG_VERSION"),
            command: "solve",
            config_path: args.config.display().to_string(),
            config_sha256: hash,
            settings,
            seeds: Vec::new(),
            outputs: Vec::new(),
        },
    )?;

    println!("status            {}", outcome.status);
    println!(
        "objective         {}",
        sig(outcome.objective.unwrap_or(f64::NAN))
    );
    println!(
        "iterations        {} ({} s)",
        outcome.iterations,
        sig(elapsed.as_secs_f64())
    );
    println!(
        "residuals         primal {} dual {} gap {}",
        sig(outcome.primal_residual),
        sig(outcome.dual_residual),
        sig(outcome.gap)
    );
    match audit.worst_chance() {
        Some(w) => println!("worst chance      {} at k={} j={}", sig(w.slack), w.k, w.j),
        None => println!("worst chance      (no half-plane constraints)"),
    }
    println!("terminal cov      {}", sig(audit.terminal_cov_slack));
    println!("terminal mean     {}", sig(audit.terminal_mean_residual));
    println!("outputs           {}", args.out.display());
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> CmdResult {
    if args.runs == 0 {
        return Err(Failure::new(exit::VALIDATION, "--runs must be at least 1"));
    }
    let loaded = validated(&args.config)?;
    let problem = &loaded.problem;
    let text = std::fs::read_to_string(&args.policy).map_err(|e| {
        Failure::new(
            exit::ERROR,
            format!("cannot read {}: {e}", args.policy.display()),
        )
    })?;
    let export: PolicyExport = serde_json::from_str(&text)
        .map_err(|e| Failure::new(exit::VALIDATION, format!("{}: {e}", args.policy.display())))?;
    let hash = sha256_hex(&loaded.bytes);
    match &export.config_sha256 {
        Some(h) if *h == hash => {}
        Some(h) => {
            return Err(Failure::new(
                exit::HASH_MISMATCH,
                format!(
                    "policy was solved for config {h}, but {} hashes to {hash}",
                    args.config.display()
                ),
            ))
        }
        None => {
            return Err(Failure::new(
                exit::HASH_MISMATCH,
                format!("{} records no config hash", args.policy.display()),
            ))
        }
    }
    let schedule = kalman::run_schedule(problem)?;
    let ops = lift::build(problem, &schedule)?;
    let policy = Policy::from_export(&export, problem, &schedule, &ops)?;

    let started = Instant::now();
    let report = simulate::run_closed_loop(problem, &schedule, &policy, args.runs, args.seed)?;
    let elapsed = started.elapsed();

    let mut out = Outputs::new(&args.out)?;
    out.write("report.json", to_json(&report)?)?;
    if args.trajectories {
        out.write(
            "trajectories.csv",
            simulate::trajectories_csv(problem, &schedule, &policy, args.runs, args.seed)?,
        )?;
    }
    out.finish(
        "simulate-manifest.json",
        RunManifest {
            tool: "covsteer",
            version: env!("CARGO_PKG_VERSION"),
            command: "simulate",
            config_path: args.config.display().to_string(),
            config_sha256: hash,
            settings: serde_json::json!({
                "runs": args.runs,
                "policy": args.policy.display().to_string(),
                "generator": simulate::GENERATOR,
                "batch_runs": simulate::BATCH_RUNS,
            }),
            seeds: vec![args.seed],
            outputs: Vec::new(),
        },
    )?;

    print!("{}", report.summary_table());
    println!(
        "max rate {} at k={} (p_fail {}), {} runs in {} s",
        sig(report.max_violation_rate),
        report.max_violation_step,
        sig(report.p_fail),
        report.runs,
        sig(elapsed.as_secs_f64())
    );
    println!(
        "max z: covariance {} error {} orthogonality {} innovation lag-1 {}",
        sig(report.cov_max_z),
        sig(report.error_cov_max_z),
        sig(report.orthogonality_max_z),
        sig(report.innovation_lag1_max_z)
    );
    println!(
        "terminal covariance excess {} (tolerance {})",
        sig(report.terminal_cov_excess),
        sig(report.terminal_cov_tolerance)
    );
    Ok(())
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                exit::VALIDATION
            } else {
                exit::OK
            };
        }
    };
    let result = match &cli.command {
        Command::Check { config } => cmd_check(config),
        Command::Solve(a) => cmd_solve(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match result {
        Ok(()) => exit::OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn main() -> i32 {
    run(std::env::args_os())
}
