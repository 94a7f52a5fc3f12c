//! Command-line front end.
//!
//! Exit codes: 0 success, 2 parse/validation/usage error, 3 no strictly
//! feasible point, 4 no convergence or failed post-solve audit.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::chance::MarginSet;
use crate::config::{load_config, parse_config, read_config_source, ConfigError};
use crate::constraints::{build_coupling, Mode};
use crate::experiments::{
    montecarlo_costs, montecarlo_validate, prepare_mode, run_mode_with, ExperimentError,
    ModeResult, RunOptions,
};
use crate::model::{validate, MicrogridConfig};
use crate::report;
use crate::solver::{solve, write_iteration_log, Algorithm, Variant, FEASIBILITY_TOL};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_NOT_CONVERGED: i32 = 4;

/// Largest fixed-point residual accepted by the post-solve audit.
pub const AUDIT_TOL: f64 = 1e-6;

#[derive(Debug, Parser)]
#[command(name = "microgrid-gne", version, about = "Shared-battery demand-side management game solver")]
pub struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one mode and write the equilibrium and iteration log.
    Solve(SolveArgs),
    /// Solve all modes and run the Monte Carlo comparison.
    Compare(CompareArgs),
    /// Check a configuration file.
    Validate(ValidateArgs),
    /// Write the coupling constraint `A`, `b` as CSV.
    DumpConstraints(DumpArgs),
}

#[derive(Debug, Args)]
pub struct SolverFlags {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_parser = parse_algorithm)]
    pub algorithm: Option<Algorithm>,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub tol_u: Option<f64>,
    #[arg(long)]
    pub tol_lambda: Option<f64>,
    /// Iteration-log stride.
    #[arg(long)]
    pub log_stride: Option<usize>,
    /// Solve even if no strictly feasible point is found.
    #[arg(long)]
    pub allow_nonslater: bool,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub solver: SolverFlags,
    #[arg(long, default_value = "stochastic", value_parser = parse_mode)]
    pub mode: Mode,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub solver: SolverFlags,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Scenarios for the cost histogram.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: Option<u64>,
    /// Scenarios for the chance-constraint audit.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub validation_samples: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "stochastic", value_parser = parse_mode)]
    pub mode: Mode,
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    s.parse()
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse()
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    match pool.build() {
        Ok(pool) => pool.install(|| dispatch(&cli.command)),
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            EXIT_USAGE
        }
    }
}

fn dispatch(cmd: &Command) -> i32 {
    let out = match cmd {
        Command::Solve(a) => cmd_solve(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Validate(a) => cmd_validate(a),
        Command::DumpConstraints(a) => cmd_dump_constraints(a),
    };
    match out {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Experiment(ExperimentError::Infeasible { .. }) => EXIT_INFEASIBLE,
            CliError::Experiment(ExperimentError::NotConverged(_)) => EXIT_NOT_CONVERGED,
            CliError::Io { .. } => 1,
            _ => EXIT_USAGE,
        }
    }
}

fn write_file(
    dir: &Path,
    name: &str,
    f: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>,
) -> Result<(), CliError> {
    let path = dir.join(name);
    let io_err = |source| CliError::Io {
        path: path.clone(),
        source,
    };
    let file = File::create(&path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    f(&mut w).map_err(io_err)?;
    w.flush().map_err(io_err)
}

fn load_with_overrides(flags: &SolverFlags) -> Result<MicrogridConfig, CliError> {
    let mut cfg = load_config(&read_config_source(&flags.config)?)?;
    let s = &mut cfg.solver;
    if let Some(v) = flags.max_iters {
        s.max_iters = v;
    }
    if let Some(v) = flags.tol_u {
        s.eps_u = v;
    }
    if let Some(v) = flags.tol_lambda {
        s.eps_lambda = v;
    }
    if let Some(v) = flags.log_stride {
        s.log_stride = v;
    }
    if let Some(a) = flags.algorithm {
        s.algorithm = a;
    }
    if let Some(v) = flags.variant {
        s.variant = v;
    }
    let report = validate(&cfg);
    if !report.is_ok() {
        return Err(ConfigError::Invalid(report).into());
    }
    Ok(cfg)
}

fn run_options(cfg: &MicrogridConfig, flags: &SolverFlags) -> RunOptions {
    RunOptions {
        algorithm: cfg.solver.algorithm,
        variant: cfg.solver.variant,
        allow_nonslater: flags.allow_nonslater,
        ..RunOptions::default()
    }
}

fn create_out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

struct Manifest<'a> {
    command: &'a str,
    flags: &'a SolverFlags,
    cfg: &'a MicrogridConfig,
    modes: Vec<Mode>,
    seed: Option<u64>,
    samples: Option<usize>,
    validation_samples: Option<usize>,
}

impl Manifest<'_> {
    fn write(&self, w: &mut impl Write) -> io::Result<()> {
        let s = &self.cfg.solver;
        let modes: Vec<&str> = self.modes.iter().map(Mode::as_str).collect();
        writeln!(w, "tool = microgrid-gne")?;
        writeln!(w, "version = {}", env!("CARGO_PKG_VERSION"))?;
        writeln!(w, "command = {}", self.command)?;
        writeln!(w, "config = {}", self.flags.config.display())?;
        writeln!(w, "modes = {}", modes.join(","))?;
        writeln!(w, "algorithm = {}", s.algorithm)?;
        writeln!(w, "variant = {}", s.variant)?;
        if let Some(seed) = self.seed {
            writeln!(w, "seed = {seed}")?;
        }
        if let Some(n) = self.samples {
            writeln!(w, "samples = {n}")?;
        }
        if let Some(n) = self.validation_samples {
            writeln!(w, "validation_samples = {n}")?;
        }
        writeln!(w, "max_iters = {}", s.max_iters)?;
        writeln!(w, "tol_u = {:?}", s.eps_u)?;
        writeln!(w, "tol_lambda = {:?}", s.eps_lambda)?;
        writeln!(w, "allow_nonslater = {}", self.flags.allow_nonslater)?;
        writeln!(w, "out_dir = {}", self.flags.out_dir.display())?;
        writeln!(w, "timestamp = {}", chrono::Utc::now().to_rfc3339())
    }
}

fn note_lipschitz(cfg: &MicrogridConfig, r: &ModeResult) {
    if let Some(l) = cfg.solver.reported_lipschitz {
        if l < r.constants.eig_max {
            log::warn!(
                "reported Lipschitz constant {l} is below the bound {}; using l_f = {}",
                r.constants.eig_max,
                r.constants.l_f
            );
        }
    }
}

pub fn cmd_solve(args: &SolveArgs) -> Result<i32, CliError> {
    let flags = &args.solver;
    let cfg = load_with_overrides(flags)?;
    let opts = run_options(&cfg, flags);
    let prepared = prepare_mode(&cfg, args.mode, &opts)?;
    let gne = solve(
        &cfg,
        &prepared.game,
        &prepared.coupling,
        &prepared.params,
        opts.algorithm,
        &opts.solve,
    )
    .map_err(ExperimentError::from)?;

    let dir = &flags.out_dir;
    create_out_dir(dir)?;
    write_file(dir, "iteration_log.csv", |w| write_iteration_log(w, &gne.log))?;
    write_file(dir, "solution.csv", |w| report::write_solution(w, &gne.u_star))?;
    write_file(dir, "multipliers.csv", |w| {
        report::write_multipliers(w, &prepared.coupling, &gne.lam_star)
    })?;
    write_file(dir, "margins.csv", |w| report::write_margins(w, &prepared.margins))?;
    write_file(dir, "summary.csv", |w| {
        report::write_solve_summary(w, &cfg, &[(args.mode, opts.algorithm, opts.variant, &gne)])
    })?;
    let manifest = Manifest {
        command: "solve",
        flags,
        cfg: &cfg,
        modes: vec![args.mode],
        seed: None,
        samples: None,
        validation_samples: None,
    };
    write_file(dir, "manifest.txt", |w| manifest.write(w))?;

    let audits = gne.fixed_point_residual <= AUDIT_TOL && gne.feasibility_max <= FEASIBILITY_TOL;
    println!(
        "{}: converged={} iterations={} fixed_point_residual={:e} feasibility_max={:e}",
        args.mode, gne.converged, gne.iterations, gne.fixed_point_residual, gne.feasibility_max
    );
    if gne.converged && audits {
        Ok(EXIT_OK)
    } else {
        eprintln!("error: solver did not converge or failed the post-solve audit");
        Ok(EXIT_NOT_CONVERGED)
    }
}

pub fn cmd_compare(args: &CompareArgs) -> Result<i32, CliError> {
    let flags = &args.solver;
    let cfg = load_with_overrides(flags)?;
    let opts = run_options(&cfg, flags);
    let seed = args.seed.unwrap_or(cfg.experiment.seed);
    let samples = args.samples.map_or(cfg.experiment.cost_samples, |n| n as usize);
    let validation_samples = args
        .validation_samples
        .map_or(cfg.experiment.validation_samples, |n| n as usize);

    let mut results = Vec::new();
    let mut all_converged = true;
    for mode in Mode::ALL {
        match run_mode_with(&cfg, mode, &opts) {
            Ok(r) => results.push(r),
            Err(ExperimentError::NotConverged(r)) => {
                all_converged = false;
                eprintln!("warning: {mode} did not converge in {} iterations", r.gne.iterations);
                results.push(*r);
            }
            Err(e) => return Err(e.into()),
        }
    }
    if let Some(r) = results.first() {
        note_lipschitz(&cfg, r);
    }

    let hist = montecarlo_costs(&cfg, &results, samples, seed)?;
    let stochastic = results
        .iter()
        .find(|r| r.mode == Mode::Stochastic)
        .expect("stochastic mode is always solved");
    let violations = montecarlo_validate(&cfg, &stochastic.gne.u_star, validation_samples, seed)?;

    let dir = &flags.out_dir;
    create_out_dir(dir)?;
    write_file(dir, "discharge_profiles.csv", |w| report::write_discharge_profiles(w, &results))?;
    write_file(dir, "grid_exchange.csv", |w| report::write_grid_exchange(w, &results))?;
    write_file(dir, "soc_trajectories.csv", |w| report::write_soc(w, &results))?;
    write_file(dir, "violations.csv", |w| report::write_violations(w, &violations))?;
    write_file(dir, "costs.csv", |w| report::write_costs(w, &hist))?;
    write_file(dir, "cost_histogram.csv", |w| report::write_histogram(w, &hist))?;
    write_file(dir, "summary.csv", |w| report::write_compare_summary(w, &results, &hist))?;
    write_file(dir, "margins.csv", |w| report::write_margins(w, &stochastic.margins))?;
    write_file(dir, "constants.csv", |w| report::write_constants(w, &cfg, stochastic))?;
    let manifest = Manifest {
        command: "compare",
        flags,
        cfg: &cfg,
        modes: Mode::ALL.to_vec(),
        seed: Some(seed),
        samples: Some(samples),
        validation_samples: Some(validation_samples),
    };
    write_file(dir, "manifest.txt", |w| manifest.write(w))?;

    for r in &results {
        let mean = hist.mean_of(r.mode).unwrap_or(f64::NAN);
        println!(
            "{}: mean_cost={mean:.3} peak_grid_exchange={:.3} iterations={} converged={}",
            r.mode,
            r.peak_grid_exchange(),
            r.gne.iterations,
            r.gne.converged
        );
    }
    Ok(if all_converged { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

pub fn cmd_validate(args: &ValidateArgs) -> Result<i32, CliError> {
    let cfg = parse_config(&read_config_source(&args.config)?)?;
    let report = validate(&cfg);
    if report.is_ok() {
        println!("OK");
        Ok(EXIT_OK)
    } else {
        print!("{report}");
        Ok(EXIT_USAGE)
    }
}

pub fn cmd_dump_constraints(args: &DumpArgs) -> Result<i32, CliError> {
    let cfg = load_config(&read_config_source(&args.config)?)?;
    let margins = match args.mode {
        Mode::Stochastic => MarginSet::compute(&cfg).map_err(ExperimentError::from)?,
        _ => MarginSet::zero(cfg.horizon),
    };
    let cc = build_coupling(&cfg, &margins, args.mode).map_err(ExperimentError::from)?;
    match &args.out {
        Some(path) => {
            let io_err = |source| CliError::Io {
                path: path.clone(),
                source,
            };
            let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
            report::write_constraints(&mut w, &cc).map_err(io_err)?;
            w.flush().map_err(io_err)?;
        }
        None => {
            let stdout = io::stdout();
            report::write_constraints(stdout.lock(), &cc).map_err(|source| CliError::Io {
                path: PathBuf::from("<stdout>"),
                source,
            })?;
        }
    }
    Ok(EXIT_OK)
}
