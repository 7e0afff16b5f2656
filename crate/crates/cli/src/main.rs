use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use csg_topopt::optimize::{optimize, OptimizeError};
use csg_topopt::output::{write_partial, write_run, OutputOptions, Summary};
use csg_topopt::problem::{initialize, Problem, ProblemSpec};
use csg_topopt::sensitivity::{fd_check_against, layout_entries, EvalError, Evaluator, FdStatus};
use csg_topopt::sweep::{parse_values, sweep, SweepError, SweepParam};

const EXIT_CONFIG: u8 = 1;
const EXIT_SOLVER: u8 = 2;
const EXIT_GRADIENT: u8 = 3;

/// Pass threshold of `check-grad` on checked entries.
const GRAD_TOLERANCE: f64 = 1e-3;

/// Topology optimization with CSG trees of polygon primitives.
#[derive(Debug, Parser)]
#[command(name = "csgto", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one optimization and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the seed of the configuration.
        #[arg(long)]
        seed: Option<u64>,
        /// Zero the timing columns so the history is byte-reproducible.
        #[arg(long)]
        no_timings: bool,
    },
    /// Compare analytic gradients with central differences at the seeded initial design.
    CheckGrad {
        #[arg(long)]
        config: PathBuf,
        /// Number of worst rows to print.
        #[arg(long, default_value_t = 10)]
        entries: usize,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
        /// Test hook: scale the analytic gradients before checking.
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// One run per value of a parameter, plus pareto.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// One of vf_star, tree_depth, seed, mesh.
        #[arg(long)]
        param: String,
        /// Comma-separated values; meshes as NXxNY.
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: PathBuf,
        /// Number of runs executed concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long)]
        no_timings: bool,
    },
}

/// Error to report on stderr together with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl ToString) -> Self {
        Self { code: EXIT_CONFIG, message: message.to_string() }
    }

    fn solver(message: impl ToString) -> Self {
        Self { code: EXIT_SOLVER, message: message.to_string() }
    }
}

fn load_spec(path: &Path) -> Result<ProblemSpec, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
    let spec = ProblemSpec::from_json(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    spec.validate().map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    Ok(spec)
}

fn cmd_run(config: &Path, out: &Path, seed: Option<u64>, opts: OutputOptions) -> Result<(), Failure> {
    let mut spec = load_spec(config)?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    match optimize(&spec) {
        Ok(result) => {
            write_run(out, &spec, &result, opts).map_err(|e| Failure::solver(format!("writing {}: {e}", out.display())))?;
            let s = Summary::new(&result);
            println!(
                "J relaxed {:.6}  J snapped {:.6}  g_v {:+.3e}  iterations {}  ({})",
                s.j_relaxed,
                s.j_snapped,
                s.g_v,
                s.iterations,
                s.reason.name()
            );
            Ok(())
        }
        Err(OptimizeError::Config(e)) => Err(Failure::config(e)),
        Err(e) => {
            if let OptimizeError::Solver { partial, .. } | OptimizeError::Mma { partial, .. } = &e {
                if let Err(io) = write_partial(out, &spec, partial, &e.to_string(), opts) {
                    eprintln!("error: could not persist the partial run: {io}");
                }
            }
            Err(Failure::solver(e))
        }
    }
}

fn cmd_check_grad(config: &Path, entries: usize, step: f64, corrupt: bool) -> Result<(), Failure> {
    if !(step.is_finite() && step > 0.0) {
        return Err(Failure::config(format!("invalid step {step}: must be a positive finite number")));
    }
    let spec = load_spec(config)?;
    let problem = Problem::new(&spec).map_err(Failure::config)?;
    let z = initialize(&problem);
    let eval_err = |e: EvalError| match e {
        EvalError::Config(c) => Failure::config(c),
        other => Failure::solver(other),
    };
    let mut ev = Evaluator::new(&problem);
    ev.forward(&z).map_err(eval_err)?;
    let mut grads = ev.gradients().map_err(eval_err)?;
    if corrupt {
        for g in grads.compliance.iter_mut().chain(grads.volume.iter_mut()) {
            *g *= 1.01;
        }
    }
    let report =
        fd_check_against(&problem, &z, &layout_entries(&problem, None), step, &grads).map_err(eval_err)?;
    println!("{:<12} {:<4} {:>24} {:>24} {:>12}", "entry", "of", "analytic", "fd", "rel_error");
    for row in report.rows.iter().filter(|r| r.status == FdStatus::Checked).take(entries) {
        println!(
            "{:<12} {:<4} {:>24.16e} {:>24.16e} {:>12.3e}",
            row.label,
            row.quantity.name(),
            row.analytic,
            row.fd,
            row.rel_error
        );
    }
    let checked = report.checked().count();
    let max = report.max_rel_error();
    println!(
        "{checked} of {} entries above |fd| > {:e}; max rel error {max:.3e} (tolerance {GRAD_TOLERANCE:e})",
        report.rows.len(),
        report.threshold
    );
    if max < GRAD_TOLERANCE {
        Ok(())
    } else {
        Err(Failure { code: EXIT_GRADIENT, message: format!("gradient check failed: max rel error {max:.3e}") })
    }
}

fn cmd_sweep(
    config: &Path,
    param: &str,
    values: &str,
    out: &Path,
    parallel: usize,
    opts: OutputOptions,
) -> Result<(), Failure> {
    let spec = load_spec(config)?;
    let param: SweepParam = param.parse().map_err(Failure::config)?;
    let values = parse_values(values).map_err(Failure::config)?;
    if parallel == 0 {
        return Err(Failure::config("--parallel must be at least 1"));
    }
    match sweep(&spec, param, &values, out, parallel, opts) {
        Ok(rows) => {
            for r in rows {
                println!(
                    "{}={}  J relaxed {:.6}  J snapped {:.6}  g_v {:+.3e}",
                    param.name(),
                    r.value,
                    r.result.relaxed.compliance,
                    r.result.snapped.compliance,
                    r.result.relaxed.volume
                );
            }
            Ok(())
        }
        Err(SweepError::Config(e)) => Err(Failure::config(e)),
        Err(SweepError::Run { value, source: OptimizeError::Config(e) }) => {
            Err(Failure::config(format!("{}={value}: {e}", param.name())))
        }
        Err(e) => Err(Failure::solver(e)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run { config, out, seed, no_timings } => {
            cmd_run(&config, &out, seed, OutputOptions { timings: !no_timings })
        }
        Command::CheckGrad { config, entries, step, corrupt_gradient } => {
            cmd_check_grad(&config, entries, step, corrupt_gradient)
        }
        Command::Sweep { config, param, values, out, parallel, no_timings } => {
            cmd_sweep(&config, &param, &values, &out, parallel, OutputOptions { timings: !no_timings })
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
