//! Parameter sweeps: one full run per value, each in its own sub-directory,
//! plus a `pareto.csv` table of the headline metrics.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::optimize::{optimize, OptimizeError, OptimizeResult};
use crate::output::{write_atomic, write_partial, write_run, OutputOptions};
use crate::problem::{ConfigError, ProblemSpec};

pub const PARETO_FILE: &str = "pareto.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    VfStar,
    TreeDepth,
    Seed,
    Mesh,
}

impl SweepParam {
    pub const NAMES: [&'static str; 4] = ["vf_star", "tree_depth", "seed", "mesh"];

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::VfStar => "vf_star",
            SweepParam::TreeDepth => "tree_depth",
            SweepParam::Seed => "seed",
            SweepParam::Mesh => "mesh",
        }
    }
}

impl FromStr for SweepParam {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vf_star" => Ok(SweepParam::VfStar),
            "tree_depth" => Ok(SweepParam::TreeDepth),
            "seed" => Ok(SweepParam::Seed),
            "mesh" => Ok(SweepParam::Mesh),
            _ => Err(ConfigError::Invalid {
                field: "param".into(),
                message: format!("unknown sweep parameter {s:?}; expected one of {}", Self::NAMES.join(", ")),
            }),
        }
    }
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("run {value}: {source}")]
    Run {
        value: String,
        #[source]
        source: OptimizeError,
    },
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(message: String) -> ConfigError {
    ConfigError::Invalid { field: "values".into(), message }
}

/// Apply one sweep value (as written on the command line) to a spec.
pub fn apply(spec: &ProblemSpec, param: SweepParam, value: &str) -> Result<ProblemSpec, ConfigError> {
    let mut out = spec.clone();
    let bad = |what: &str| invalid(format!("{value:?} is not a valid {what} for {}", param.name()));
    match param {
        SweepParam::VfStar => out.vf_star = value.parse().map_err(|_| bad("number"))?,
        SweepParam::TreeDepth => out.tree_depth = value.parse().map_err(|_| bad("depth"))?,
        SweepParam::Seed => out.seed = value.parse().map_err(|_| bad("seed"))?,
        SweepParam::Mesh => {
            let (nx, ny) = value.split_once(['x', 'X']).ok_or_else(|| bad("mesh (expected NXxNY)"))?;
            out.nx = nx.trim().parse().map_err(|_| bad("mesh"))?;
            out.ny = ny.trim().parse().map_err(|_| bad("mesh"))?;
        }
    }
    out.validate()?;
    Ok(out)
}

/// Split a comma-separated value list, rejecting empty entries.
pub fn parse_values(list: &str) -> Result<Vec<String>, ConfigError> {
    let values: Vec<String> = list.split(',').map(|v| v.trim().to_string()).collect();
    if values.iter().any(String::is_empty) {
        return Err(invalid(format!("empty entry in value list {list:?}")));
    }
    Ok(values)
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: String,
    pub result: OptimizeResult,
}

pub fn pareto_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("value,J_relaxed,J_snapped,g_v\n");
    for r in rows {
        let m = &r.result;
        writeln!(out, "{},{:e},{:e},{:e}", r.value, m.relaxed.compliance, m.snapped.compliance, m.relaxed.volume).unwrap();
    }
    out
}

/// Run every value, writing `out/<param>=<value>/` per run and `out/pareto.csv`.
/// `parallel` bounds the number of concurrent runs (1 = sequential).
pub fn sweep(
    spec: &ProblemSpec,
    param: SweepParam,
    values: &[String],
    out: &Path,
    parallel: usize,
    opts: OutputOptions,
) -> Result<Vec<SweepRow>, SweepError> {
    let specs: Vec<(String, ProblemSpec)> =
        values.iter().map(|v| Ok((v.clone(), apply(spec, param, v)?))).collect::<Result<_, ConfigError>>()?;
    let io_err = |path: PathBuf| move |source| SweepError::Io { path, source };
    std::fs::create_dir_all(out).map_err(io_err(out.to_path_buf()))?;

    let run_one = |(value, spec): &(String, ProblemSpec)| -> Result<SweepRow, SweepError> {
        let dir = out.join(format!("{}={}", param.name(), value));
        log::info!("sweep {}={value}", param.name());
        match optimize(spec) {
            Ok(result) => {
                write_run(&dir, spec, &result, opts).map_err(io_err(dir.clone()))?;
                Ok(SweepRow { value: value.clone(), result })
            }
            Err(source) => {
                if let OptimizeError::Solver { partial, .. } | OptimizeError::Mma { partial, .. } = &source {
                    write_partial(&dir, spec, partial, &source.to_string(), opts).map_err(io_err(dir.clone()))?;
                }
                Err(SweepError::Run { value: value.clone(), source })
            }
        }
    };
    let rows: Vec<SweepRow> = if parallel <= 1 {
        specs.iter().map(run_one).collect::<Result<_, _>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| invalid(format!("cannot start {parallel} workers: {e}")))?;
        pool.install(|| specs.par_iter().map(run_one).collect::<Result<_, _>>())?
    };
    let path = out.join(PARETO_FILE);
    write_atomic(&path, pareto_csv(&rows).as_bytes()).map_err(io_err(path.clone()))?;
    Ok(rows)
}
