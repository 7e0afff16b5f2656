//! Forward evaluation of compliance and volume for a design vector, their
//! gradients with respect to `z`, and a central-difference checker.
//!
//! The reverse pass chains, per element: the self-adjoint compliance rule
//! (or the constant volume weights), the tree operand Jacobians, the
//! threshold and sigmoid derivatives, the LogSumExp weights and the
//! half-space partials, then the affine bound scaling of each block. Operator
//! entries pick up the raw weight partials times the softmax Jacobian.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use thiserror::Error;

use crate::csg::{softmax_jacobian, BooleanWeights, CsgError, CsgTree};
use crate::fea::{self, FeaError, SolveResult};
use crate::geometry::{rasterize_primitive, rasterize_primitive_vjp, DensityField, PolygonParams};
use crate::problem::{denormalize, ConfigError, Problem, Variable};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Csg(#[from] CsgError),
    #[error(transparent)]
    Fea(#[from] FeaError),
    #[error("no forward state: call `forward` before requesting gradients")]
    MissingForward,
}

/// Wall time of one evaluation, split into the three profiling buckets.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BucketTimes {
    pub projection: Duration,
    pub tree: Duration,
    pub fea_sensitivity: Duration,
}

impl BucketTimes {
    pub fn total(&self) -> Duration {
        self.projection + self.tree + self.fea_sensitivity
    }
}

/// Everything computed by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardState {
    pub z: Vec<f64>,
    pub params: Vec<PolygonParams>,
    pub weights: Vec<BooleanWeights>,
    pub tree: CsgTree,
    pub leaf_fields: Vec<DensityField>,
    pub node_fields: Vec<DensityField>,
    pub solve: SolveResult,
    pub compliance: f64,
    pub volume: f64,
    pub times: BucketTimes,
}

impl ForwardState {
    pub fn density(&self) -> &DensityField {
        &self.node_fields[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub compliance: Vec<f64>,
    pub volume: Vec<f64>,
}

pub struct Evaluator<'a> {
    problem: &'a Problem,
    state: Option<ForwardState>,
}

impl<'a> Evaluator<'a> {
    pub fn new(problem: &'a Problem) -> Self {
        Self { problem, state: None }
    }

    pub fn problem(&self) -> &Problem {
        self.problem
    }

    pub fn state(&self) -> Option<&ForwardState> {
        self.state.as_ref()
    }

    pub fn into_state(self) -> Option<ForwardState> {
        self.state
    }

    /// Evaluate `z` and keep the result for subsequent gradient calls.
    pub fn forward(&mut self, z: &[f64]) -> Result<&ForwardState, EvalError> {
        self.state = None;
        let state = forward_pass(self.problem, z)?;
        Ok(self.state.insert(state))
    }

    pub fn grad_compliance(&mut self) -> Result<Vec<f64>, EvalError> {
        let problem = self.problem;
        let state = self.state.as_mut().ok_or(EvalError::MissingForward)?;
        let start = Instant::now();
        let root = fea::compliance_gradient(state.density(), &state.solve.u, &problem.mesh, &problem.material)?;
        let g = backpropagate(problem, state, &root);
        state.times.fea_sensitivity += start.elapsed();
        Ok(g)
    }

    pub fn grad_volume(&mut self) -> Result<Vec<f64>, EvalError> {
        let problem = self.problem;
        let state = self.state.as_mut().ok_or(EvalError::MissingForward)?;
        let start = Instant::now();
        let root = fea::volume_gradient(problem.spec.vf_star, &problem.mesh);
        let g = backpropagate(problem, state, &root);
        state.times.fea_sensitivity += start.elapsed();
        Ok(g)
    }

    pub fn gradients(&mut self) -> Result<Gradients, EvalError> {
        Ok(Gradients { compliance: self.grad_compliance()?, volume: self.grad_volume()? })
    }
}

/// Leaf fields for a list of primitives (parallel over primitives, order preserved).
pub fn rasterize_all(problem: &Problem, params: &[PolygonParams]) -> Vec<DensityField> {
    params
        .par_iter()
        .map(|p| rasterize_primitive(p, &problem.grid, &problem.projection))
        .collect()
}

pub fn forward_pass(problem: &Problem, z: &[f64]) -> Result<ForwardState, EvalError> {
    let t0 = Instant::now();
    let (params, weights) = denormalize(z, problem)?;
    let leaf_fields = rasterize_all(problem, &params);
    let t1 = Instant::now();
    let tree = problem.tree_for(&weights);
    let node_fields = tree.evaluate_nodes(&leaf_fields)?;
    let t2 = Instant::now();
    let solve = fea::analyze(&node_fields[0], &problem.mesh, &problem.material, &problem.bcs)?;
    let volume = fea::volume_constraint(&node_fields[0], problem.spec.vf_star, &problem.mesh);
    let t3 = Instant::now();
    Ok(ForwardState {
        z: z.to_vec(),
        params,
        weights,
        tree,
        leaf_fields,
        node_fields,
        compliance: solve.compliance,
        solve,
        volume,
        times: BucketTimes { projection: t1 - t0, tree: t2 - t1, fea_sensitivity: t3 - t2 },
    })
}

/// Chain a per-element derivative of some functional of the root field back to `z`.
pub fn backpropagate(problem: &Problem, state: &ForwardState, root_grad: &[f64]) -> Vec<f64> {
    let lay = &problem.layout;
    let b = &problem.bounds;
    let (leaf_grad, weight_grad) = state.tree.vjp(&state.node_fields, &state.leaf_fields, root_grad);
    let prim_grads: Vec<_> = state
        .params
        .par_iter()
        .zip(&leaf_grad)
        .map(|(p, g)| rasterize_primitive_vjp(p, &problem.grid, &problem.projection, g))
        .collect();
    let mut dz = vec![0.0; lay.len];
    for (i, g) in prim_grads.iter().enumerate() {
        dz[lay.cx(i)] = g.cx * (b.cx.1 - b.cx.0);
        dz[lay.cy(i)] = g.cy * (b.cy.1 - b.cy.0);
        dz[lay.theta(i)] = g.theta * (b.theta.1 - b.theta.0);
        for (j, gd) in g.offsets.iter().enumerate() {
            dz[lay.offset(i, j)] = gd * (b.d.1 - b.d.0);
        }
    }
    for (k, slot) in lay.op_slots.iter().enumerate() {
        let Some(s) = slot else { continue };
        let jac = softmax_jacobian(&state.weights[k], problem.spec.softmax_scale);
        for m in 0..4 {
            dz[s + m] = (0..4).map(|i| weight_grad[k][i] * jac[i][m]).sum();
        }
    }
    dz
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    Compliance,
    Volume,
}

impl Quantity {
    pub fn name(self) -> &'static str {
        match self {
            Quantity::Compliance => "J",
            Quantity::Volume => "g_v",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdStatus {
    Checked,
    /// `|fd|` at or below the significance threshold.
    Insignificant,
    /// Entry belongs to a frozen operator and is not a design variable.
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdRow {
    pub label: String,
    pub quantity: Quantity,
    pub analytic: f64,
    pub fd: f64,
    pub rel_error: f64,
    pub status: FdStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    /// Sorted by relative error, largest first; skipped entries last.
    pub rows: Vec<FdRow>,
    pub threshold: f64,
}

impl FdReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.status == FdStatus::Checked)
            .map(|r| r.rel_error)
            .fold(0.0, f64::max)
    }

    pub fn checked(&self) -> impl Iterator<Item = &FdRow> {
        self.rows.iter().filter(|r| r.status == FdStatus::Checked)
    }
}

/// One entry to check: display label and index into `z` (`None` = skipped).
#[derive(Debug, Clone, PartialEq)]
pub struct FdEntry {
    pub label: String,
    pub index: Option<usize>,
}

pub const FD_SIGNIFICANCE: f64 = 1e-7;

/// Central differences of a two-output function against given gradients.
pub fn check_entries<F, E>(
    mut eval: F,
    z: &[f64],
    entries: &[FdEntry],
    step: f64,
    analytic: (&[f64], &[f64]),
) -> Result<FdReport, E>
where
    F: FnMut(&[f64]) -> Result<(f64, f64), E>,
{
    let mut rows = Vec::new();
    let mut work = z.to_vec();
    for entry in entries {
        let Some(i) = entry.index else {
            for quantity in [Quantity::Compliance, Quantity::Volume] {
                rows.push(FdRow {
                    label: entry.label.clone(),
                    quantity,
                    analytic: 0.0,
                    fd: 0.0,
                    rel_error: 0.0,
                    status: FdStatus::Skipped,
                });
            }
            continue;
        };
        work[i] = z[i] + step;
        let up = eval(&work)?;
        work[i] = z[i] - step;
        let dn = eval(&work)?;
        work[i] = z[i];
        let fds = [(up.0 - dn.0) / (2.0 * step), (up.1 - dn.1) / (2.0 * step)];
        for (q, (quantity, fd)) in [Quantity::Compliance, Quantity::Volume].into_iter().zip(fds).enumerate() {
            let a = if q == 0 { analytic.0[i] } else { analytic.1[i] };
            let rel_error = (a - fd).abs() / fd.abs().max(f64::MIN_POSITIVE);
            let status = if fd.abs() > FD_SIGNIFICANCE { FdStatus::Checked } else { FdStatus::Insignificant };
            rows.push(FdRow { label: entry.label.clone(), quantity, analytic: a, fd, rel_error, status });
        }
    }
    rows.sort_by(|a, b| {
        let key = |r: &FdRow| (r.status != FdStatus::Checked, r.status == FdStatus::Skipped);
        key(a).cmp(&key(b)).then(b.rel_error.total_cmp(&a.rel_error))
    });
    Ok(FdReport { rows, threshold: FD_SIGNIFICANCE })
}

/// Entries of the unfrozen layout, by position (all of them when `full` is `None`).
pub fn layout_entries(problem: &Problem, full: Option<&[usize]>) -> Vec<FdEntry> {
    let lay = &problem.layout;
    let all: Vec<usize> = match full {
        Some(ix) => ix.to_vec(),
        None => (0..lay.full_len()).collect(),
    };
    all.into_iter()
        .filter_map(|f| lay.full_entry(f))
        .map(|(var, index): (Variable, Option<usize>)| FdEntry { label: var.to_string(), index })
        .collect()
}

/// Check supplied gradients at `z` by central differences.
pub fn fd_check_against(
    problem: &Problem,
    z: &[f64],
    entries: &[FdEntry],
    step: f64,
    grads: &Gradients,
) -> Result<FdReport, EvalError> {
    check_entries(
        |x| forward_pass(problem, x).map(|s| (s.compliance, s.volume)),
        z,
        entries,
        step,
        (&grads.compliance, &grads.volume),
    )
}

/// Analytic gradients at `z` compared with central differences for the
/// requested entries of the unfrozen layout.
pub fn fd_check(problem: &Problem, z: &[f64], full_indices: Option<&[usize]>, step: f64) -> Result<FdReport, EvalError> {
    let mut ev = Evaluator::new(problem);
    ev.forward(z)?;
    let grads = ev.gradients()?;
    fd_check_against(problem, z, &layout_entries(problem, full_indices), step, &grads)
}
