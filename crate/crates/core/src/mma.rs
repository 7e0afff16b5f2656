//! Method of Moving Asymptotes for one objective, one inequality constraint
//! and the unit box `[0, 1]^n`.
//!
//! Follows the 2007 formulation of the subproblem with an elastic slack `y`
//! on the constraint (weights `c`, `d`) and `a = 0`, so the auxiliary `z`
//! variable drops out. With a single constraint the dual is a concave
//! function of one multiplier, maximized here by bisection on its
//! derivative.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MmaError {
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("length mismatch: {0}")]
    Shape(String),
    #[error("design variable {index} = {value} outside [0, 1]")]
    OutOfBounds { index: usize, value: f64 },
    #[error("invalid MMA config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MmaConfig {
    pub move_limit: f64,
    pub kkt_tol: f64,
    pub step_tol: f64,
    pub max_iter: usize,
    pub asy_init: f64,
    pub asy_incr: f64,
    pub asy_decr: f64,
    /// Linear penalty on the constraint slack.
    pub c: f64,
    /// Quadratic penalty on the constraint slack.
    pub d: f64,
}

impl Default for MmaConfig {
    fn default() -> Self {
        Self {
            move_limit: 0.05,
            kkt_tol: 1e-3,
            step_tol: 1e-3,
            max_iter: 200,
            asy_init: 0.5,
            asy_incr: 1.2,
            asy_decr: 0.7,
            c: 1000.0,
            d: 1.0,
        }
    }
}

impl MmaConfig {
    pub fn validate(&self) -> Result<(), MmaError> {
        if !(self.move_limit > 0.0 && self.move_limit <= 1.0) {
            return Err(MmaError::InvalidConfig(format!("move_limit must be in (0, 1], got {}", self.move_limit)));
        }
        if !(self.kkt_tol > 0.0 && self.step_tol > 0.0) {
            return Err(MmaError::InvalidConfig("tolerances must be positive".into()));
        }
        if !(self.asy_init > 0.0 && self.asy_incr >= 1.0 && self.asy_decr > 0.0 && self.asy_decr <= 1.0) {
            return Err(MmaError::InvalidConfig("asymptote parameters out of range".into()));
        }
        if !(self.c > 0.0 && self.d >= 0.0) {
            return Err(MmaError::InvalidConfig("slack penalties must satisfy c > 0, d >= 0".into()));
        }
        Ok(())
    }
}

const ALBEFA: f64 = 0.1;
const RAA0: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct MmaState {
    /// Number of updates performed so far.
    pub iteration: usize,
    pub prev1: Vec<f64>,
    pub prev2: Vec<f64>,
    pub low: Vec<f64>,
    pub upp: Vec<f64>,
}

impl MmaState {
    pub fn new(z0: &[f64]) -> Self {
        Self {
            iteration: 0,
            prev1: z0.to_vec(),
            prev2: z0.to_vec(),
            low: vec![0.0; z0.len()],
            upp: vec![1.0; z0.len()],
        }
    }
}

/// Separable convex approximations built at one iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct Subproblem {
    pub low: Vec<f64>,
    pub upp: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    p0: Vec<f64>,
    q0: Vec<f64>,
    r0: f64,
    p1: Vec<f64>,
    q1: Vec<f64>,
    r1: f64,
}

impl Subproblem {
    fn sum(&self, p: &[f64], q: &[f64], x: &[f64]) -> f64 {
        (0..x.len()).map(|j| p[j] / (self.upp[j] - x[j]) + q[j] / (x[j] - self.low[j])).sum()
    }

    pub fn objective_approx(&self, x: &[f64]) -> f64 {
        self.r0 + self.sum(&self.p0, &self.q0, x)
    }

    pub fn constraint_approx(&self, x: &[f64]) -> f64 {
        self.r1 + self.sum(&self.p1, &self.q1, x)
    }

    /// Primal minimizer of the Lagrangian for multiplier `lambda`.
    fn primal(&self, lambda: f64) -> Vec<f64> {
        (0..self.low.len())
            .map(|j| {
                let sp = (self.p0[j] + lambda * self.p1[j]).sqrt();
                let sq = (self.q0[j] + lambda * self.q1[j]).sqrt();
                let x = (self.low[j] * sp + self.upp[j] * sq) / (sp + sq);
                x.clamp(self.alpha[j], self.beta[j])
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmaUpdate {
    pub z: Vec<f64>,
    pub state: MmaState,
    /// Constraint multiplier from the subproblem dual.
    pub multiplier: f64,
    /// Elastic slack on the constraint at the subproblem optimum.
    pub slack: f64,
    pub subproblem: Subproblem,
}

fn check_finite(v: &[f64], what: &'static str) -> Result<(), MmaError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(MmaError::NonFinite(what))
    }
}

/// One MMA step from `z`. Pure: the returned state replaces `state`.
pub fn mma_update(
    z: &[f64],
    obj: f64,
    dobj: &[f64],
    con: f64,
    dcon: &[f64],
    state: &MmaState,
    cfg: &MmaConfig,
) -> Result<MmaUpdate, MmaError> {
    let n = z.len();
    if dobj.len() != n || dcon.len() != n || state.low.len() != n {
        return Err(MmaError::Shape(format!(
            "z has {n} entries, objective gradient {}, constraint gradient {}, state {}",
            dobj.len(),
            dcon.len(),
            state.low.len()
        )));
    }
    if !(obj.is_finite() && con.is_finite()) {
        return Err(MmaError::NonFinite("function value"));
    }
    check_finite(dobj, "objective gradient")?;
    check_finite(dcon, "constraint gradient")?;
    if let Some((index, &value)) = z.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(MmaError::OutOfBounds { index, value });
    }

    let iter = state.iteration + 1;
    let mut low = vec![0.0; n];
    let mut upp = vec![0.0; n];
    for j in 0..n {
        if iter <= 2 {
            low[j] = z[j] - cfg.asy_init;
            upp[j] = z[j] + cfg.asy_init;
        } else {
            let osc = (z[j] - state.prev1[j]) * (state.prev1[j] - state.prev2[j]);
            let factor = if osc > 0.0 {
                cfg.asy_incr
            } else if osc < 0.0 {
                cfg.asy_decr
            } else {
                1.0
            };
            low[j] = (z[j] - factor * (state.prev1[j] - state.low[j])).clamp(z[j] - 10.0, z[j] - 0.01);
            upp[j] = (z[j] + factor * (state.upp[j] - state.prev1[j])).clamp(z[j] + 0.01, z[j] + 10.0);
        }
    }

    let mut alpha = vec![0.0; n];
    let mut beta = vec![0.0; n];
    let mut p0 = vec![0.0; n];
    let mut q0 = vec![0.0; n];
    let mut p1 = vec![0.0; n];
    let mut q1 = vec![0.0; n];
    for j in 0..n {
        alpha[j] = (low[j] + ALBEFA * (z[j] - low[j])).max(z[j] - cfg.move_limit).max(0.0);
        beta[j] = (upp[j] - ALBEFA * (upp[j] - z[j])).min(z[j] + cfg.move_limit).min(1.0);
        let (ux2, xl2) = ((upp[j] - z[j]).powi(2), (z[j] - low[j]).powi(2));
        let (gp, gm) = (dobj[j].max(0.0), (-dobj[j]).max(0.0));
        p0[j] = ux2 * (1.001 * gp + 0.001 * gm + RAA0);
        q0[j] = xl2 * (0.001 * gp + 1.001 * gm + RAA0);
        let (gp, gm) = (dcon[j].max(0.0), (-dcon[j]).max(0.0));
        p1[j] = ux2 * (1.001 * gp + 0.001 * gm + RAA0);
        q1[j] = xl2 * (0.001 * gp + 1.001 * gm + RAA0);
    }
    let mut sub = Subproblem { low, upp, alpha, beta, p0, q0, r0: 0.0, p1, q1, r1: 0.0 };
    sub.r0 = obj - sub.objective_approx(z);
    sub.r1 = con - sub.constraint_approx(z);

    let slack_of = |lambda: f64| if cfg.d > 0.0 { ((lambda - cfg.c) / cfg.d).max(0.0) } else { 0.0 };
    let dual_slope = |lambda: f64| sub.constraint_approx(&sub.primal(lambda)) - slack_of(lambda);

    let multiplier = if dual_slope(0.0) <= 0.0 {
        0.0
    } else {
        let (mut lo, mut hi) = (0.0, 1.0);
        while dual_slope(hi) > 0.0 {
            lo = hi;
            hi *= 2.0;
            if !hi.is_finite() {
                return Err(MmaError::NonFinite("dual multiplier"));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if dual_slope(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    };
    let z_new = sub.primal(multiplier);
    let slack = slack_of(multiplier);
    let new_state = MmaState {
        iteration: iter,
        prev1: z.to_vec(),
        prev2: state.prev1.clone(),
        low: sub.low.clone(),
        upp: sub.upp.clone(),
    };
    Ok(MmaUpdate { z: z_new, state: new_state, multiplier, slack, subproblem: sub })
}

/// Projected stationarity norm plus complementarity `|lambda g|`.
pub fn kkt_residual(z: &[f64], dobj: &[f64], con: f64, dcon: &[f64], multiplier: f64) -> f64 {
    let stationarity: f64 = z
        .iter()
        .zip(dobj.iter().zip(dcon))
        .map(|(&x, (&df, &dg))| {
            let r = df + multiplier * dg;
            if (x <= 0.0 && r > 0.0) || (x >= 1.0 && r < 0.0) {
                0.0
            } else {
                r * r
            }
        })
        .sum();
    stationarity.sqrt() + (multiplier * con).abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Kkt,
    Step,
    MaxIter,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::Kkt => "kkt",
            StopReason::Step => "step",
            StopReason::MaxIter => "max_iter",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimizeResult {
    pub z: Vec<f64>,
    pub iterations: usize,
    pub reason: StopReason,
    /// Every iterate including the start.
    pub iterates: Vec<Vec<f64>>,
}

/// Run MMA on a closure returning `(f, df, g, dg)` until one of the stopping rules fires.
pub fn minimize<F>(mut eval: F, z0: &[f64], cfg: &MmaConfig) -> Result<MinimizeResult, MmaError>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>, f64, Vec<f64>),
{
    cfg.validate()?;
    let mut z = z0.to_vec();
    let mut state = MmaState::new(&z);
    let mut multiplier = 0.0;
    let mut iterates = vec![z.clone()];
    for iter in 0..cfg.max_iter {
        let (f, df, g, dg) = eval(&z);
        if iter > 0 && kkt_residual(&z, &df, g, &dg, multiplier) < cfg.kkt_tol {
            return Ok(MinimizeResult { z, iterations: iter, reason: StopReason::Kkt, iterates });
        }
        let upd = mma_update(&z, f, &df, g, &dg, &state, cfg)?;
        let step = z.iter().zip(&upd.z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        z = upd.z;
        state = upd.state;
        multiplier = upd.multiplier;
        iterates.push(z.clone());
        if step < cfg.step_tol {
            return Ok(MinimizeResult { z, iterations: iter + 1, reason: StopReason::Step, iterates });
        }
    }
    Ok(MinimizeResult { z, iterations: cfg.max_iter, reason: StopReason::MaxIter, iterates })
}
