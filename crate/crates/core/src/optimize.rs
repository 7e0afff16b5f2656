//! The optimization loop: evaluate, differentiate, take an MMA step, repeat;
//! then snap the operators, re-evaluate the discrete tree and prune it.
//!
//! The relaxed run optimizes blended operators. Its final design is usually
//! a little grey where operator weights are not fully one-hot, so both the
//! relaxed and the snapped metrics are reported.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csg::{prune, BooleanOp, CsgError, CsgTree, PrunedTree};
use crate::fea::{self, FeaError};
use crate::geometry::{DensityField, PolygonParams};
use crate::mma::{kkt_residual, mma_update, MmaError, MmaState, StopReason};
use crate::problem::{initialize, ConfigError, Problem, ProblemSpec};
use crate::sensitivity::{BucketTimes, EvalError, Evaluator};

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    /// The run stopped at iteration `partial.history.len()`; everything up to
    /// the last successful evaluation is kept for persisting.
    #[error("solver failure at iteration {iteration}: {source}")]
    Solver {
        iteration: usize,
        source: EvalError,
        partial: Box<PartialRun>,
    },
    #[error("optimizer failure at iteration {iteration}: {source}")]
    Mma {
        iteration: usize,
        source: MmaError,
        partial: Box<PartialRun>,
    },
    #[error("post-processing failed: {0}")]
    Post(String),
}

/// Last good state of an aborted run.
#[derive(Debug, Clone)]
pub struct PartialRun {
    pub history: RunHistory,
    /// Last design whose evaluation succeeded, if any.
    pub z: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub compliance: f64,
    pub volume: f64,
    pub kkt: f64,
    /// `max |z_k - z_(k-1)|`; zero for the first record.
    pub step: f64,
    pub t_projection: f64,
    pub t_tree: f64,
    pub t_fea_sens: f64,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<IterationRecord>,
}

impl RunHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub compliance: f64,
    pub volume: f64,
}

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub z: Vec<f64>,
    /// Number of MMA updates taken.
    pub iterations: usize,
    pub reason: StopReason,
    pub history: RunHistory,
    pub params: Vec<PolygonParams>,
    pub leaf_fields: Vec<DensityField>,
    /// Tree with the final relaxed operator weights.
    pub relaxed_tree: CsgTree,
    pub relaxed: Metrics,
    pub density: DensityField,
    pub snapped_tree: CsgTree,
    pub snapped: Metrics,
    pub snapped_density: DensityField,
    pub pruned: PrunedTree,
}

impl OptimizeResult {
    /// Operators of the snapped tree, by internal node id.
    pub fn operators(&self) -> Vec<BooleanOp> {
        self.snapped_tree.nodes.iter().map(|n| n.weights.dominant()).collect()
    }
}

fn seconds(d: Duration) -> f64 {
    d.as_secs_f64()
}

pub fn optimize(spec: &ProblemSpec) -> Result<OptimizeResult, OptimizeError> {
    let problem = Problem::new(spec)?;
    optimize_problem(&problem)
}

pub fn optimize_problem(problem: &Problem) -> Result<OptimizeResult, OptimizeError> {
    let cfg = &problem.spec.mma;
    let mut z = initialize(problem);
    let mut mma = MmaState::new(&z);
    let mut multiplier = 0.0;
    let mut step = 0.0;
    let mut history = RunHistory::default();
    let mut last_good: Option<Vec<f64>> = None;
    let mut eval = Evaluator::new(problem);

    let reason = loop {
        let iteration = history.len();
        let fail = |source, history: &RunHistory, z: &Option<Vec<f64>>| OptimizeError::Solver {
            iteration,
            source,
            partial: Box::new(PartialRun { history: history.clone(), z: z.clone() }),
        };
        let (j, g) = match eval.forward(&z) {
            Ok(s) => (s.compliance, s.volume),
            Err(e) => return Err(fail(e, &history, &last_good)),
        };
        let grads = match eval.gradients() {
            Ok(g) => g,
            Err(e) => return Err(fail(e, &history, &last_good)),
        };
        if !(j.is_finite() && j > 0.0) {
            let e = EvalError::Fea(FeaError::Domain(j));
            return Err(fail(e, &history, &last_good));
        }
        let times: BucketTimes = eval.state().map(|s| s.times).unwrap_or_default();
        let kkt = kkt_residual(&z, &grads.compliance, g, &grads.volume, multiplier);
        history.records.push(IterationRecord {
            iter: iteration,
            compliance: j,
            volume: g,
            kkt,
            step,
            t_projection: seconds(times.projection),
            t_tree: seconds(times.tree),
            t_fea_sens: seconds(times.fea_sensitivity),
            z: z.clone(),
        });
        last_good = Some(z.clone());
        log::debug!("iter {iteration:4}  J {j:.6e}  g_v {g:+.3e}  kkt {kkt:.3e}  step {step:.3e}");

        if iteration > 0 && kkt < cfg.kkt_tol {
            break StopReason::Kkt;
        }
        if iteration > 0 && step < cfg.step_tol {
            break StopReason::Step;
        }
        if iteration >= cfg.max_iter {
            break StopReason::MaxIter;
        }
        let upd = match mma_update(&z, j, &grads.compliance, g, &grads.volume, &mma, cfg) {
            Ok(u) => u,
            Err(source) => {
                return Err(OptimizeError::Mma {
                    iteration,
                    source,
                    partial: Box::new(PartialRun { history, z: last_good }),
                })
            }
        };
        step = z.iter().zip(&upd.z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        z = upd.z;
        mma = upd.state;
        multiplier = upd.multiplier;
    };

    let state = eval.into_state().expect("loop ends after a successful evaluation");
    let iterations = history.len() - 1;
    log::info!("stopped after {iterations} iterations ({})", reason.name());
    finish(problem, z, iterations, reason, history, state)
}

fn finish(
    problem: &Problem,
    z: Vec<f64>,
    iterations: usize,
    reason: StopReason,
    history: RunHistory,
    state: crate::sensitivity::ForwardState,
) -> Result<OptimizeResult, OptimizeError> {
    let post = |e: CsgError| OptimizeError::Post(e.to_string());
    let relaxed = Metrics { compliance: state.compliance, volume: state.volume };
    let density = state.density().clone();
    let snapped_tree = state.tree.snapped();
    let snapped_density = snapped_tree.evaluate_nodes(&state.leaf_fields).map_err(post)?.swap_remove(0);
    let snapped = evaluate_field(problem, &snapped_density).map_err(|e| OptimizeError::Solver {
        iteration: iterations,
        source: e.into(),
        partial: Box::new(PartialRun { history: history.clone(), z: Some(z.clone()) }),
    })?;
    let pruned = prune(&snapped_tree, &state.leaf_fields, problem.spec.empty_threshold).map_err(post)?;
    Ok(OptimizeResult {
        z,
        iterations,
        reason,
        history,
        params: state.params,
        leaf_fields: state.leaf_fields,
        relaxed_tree: state.tree,
        relaxed,
        density,
        snapped_tree,
        snapped,
        snapped_density,
        pruned,
    })
}

/// Compliance and volume constraint of an explicit density field.
pub fn evaluate_field(problem: &Problem, field: &DensityField) -> Result<Metrics, FeaError> {
    let solve = fea::analyze(field, &problem.mesh, &problem.material, &problem.bcs)?;
    let volume = fea::volume_constraint(field, problem.spec.vf_star, &problem.mesh);
    Ok(Metrics { compliance: solve.compliance, volume })
}
