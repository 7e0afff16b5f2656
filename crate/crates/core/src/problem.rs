//! Problem configuration, the normalized design vector and built-in benchmarks.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csg::{softmax_encode, BooleanOp, BooleanWeights, CsgTree, EMPTY_THRESHOLD};
use crate::fea::{BoundaryConditions, Material, Mesh};
use crate::geometry::{PolygonParams, ProjectionConfig, SampleGrid};
use crate::mma::MmaConfig;

pub const BENCHMARKS: [&str; 2] = ["mbb", "mid_cantilever"];

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("invalid `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("unknown benchmark `{0}` (valid: mbb, mid_cantilever)")]
    UnknownBenchmark(String),
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("design vector has {got} entries, expected {expected}")]
    Shape { expected: usize, got: usize },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.to_string(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionSpec {
    pub gamma: f64,
    pub beta: f64,
    pub t: f64,
}

impl Default for ProjectionSpec {
    fn default() -> Self {
        Self { gamma: 100.0, beta: 8.0, t: 100.0 }
    }
}

/// Optional parameter ranges; `None` entries take domain-relative defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsSpec {
    pub cx: Option<[f64; 2]>,
    pub cy: Option<[f64; 2]>,
    pub theta: Option<[f64; 2]>,
    pub d: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySpec {
    pub fixed_dofs: Vec<usize>,
    /// `(dof, force)` pairs.
    pub loads: Vec<(usize, f64)>,
}

/// Everything needed to define one run; mirrors the JSON config document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemSpec {
    /// Built-in load case; mutually exclusive with `boundary_conditions`.
    pub benchmark: Option<String>,
    pub boundary_conditions: Option<BoundarySpec>,
    pub lx: f64,
    pub ly: f64,
    pub nx: usize,
    pub ny: usize,
    pub material: Material,
    pub vf_star: f64,
    pub tree_depth: usize,
    pub sides: usize,
    pub bounds: BoundsSpec,
    pub projection: ProjectionSpec,
    pub softmax_scale: f64,
    /// Internal node id -> locked operator.
    pub frozen: BTreeMap<usize, BooleanOp>,
    /// Lock every internal node to one operator.
    pub freeze_all: Option<BooleanOp>,
    pub empty_threshold: f64,
    pub seed: u64,
    pub mma: MmaConfig,
}

impl Default for ProblemSpec {
    fn default() -> Self {
        Self {
            benchmark: None,
            boundary_conditions: None,
            lx: 60.0,
            ly: 30.0,
            nx: 60,
            ny: 30,
            material: Material::default(),
            vf_star: 0.5,
            tree_depth: 4,
            sides: 6,
            bounds: BoundsSpec::default(),
            projection: ProjectionSpec::default(),
            softmax_scale: 4.0,
            frozen: BTreeMap::new(),
            freeze_all: None,
            empty_threshold: EMPTY_THRESHOLD,
            seed: 2,
            mma: MmaConfig::default(),
        }
    }
}

impl ProblemSpec {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn default_bounds(&self) -> Bounds {
        Bounds {
            cx: (0.05 * self.lx, 0.95 * self.lx),
            cy: (0.05 * self.ly, 0.95 * self.ly),
            theta: (0.0, 2.0 * PI / self.sides.max(1) as f64),
            d: (0.0, 0.25 * self.lx),
        }
    }

    pub fn resolved_bounds(&self) -> Bounds {
        let def = self.default_bounds();
        let pick = |v: Option<[f64; 2]>, d: (f64, f64)| v.map(|[a, b]| (a, b)).unwrap_or(d);
        Bounds {
            cx: pick(self.bounds.cx, def.cx),
            cy: pick(self.bounds.cy, def.cy),
            theta: pick(self.bounds.theta, def.theta),
            d: pick(self.bounds.d, def.d),
        }
    }

    /// Copy with every default made explicit.
    pub fn effective(&self) -> Self {
        let mut out = self.clone();
        if out.benchmark.is_none() && out.boundary_conditions.is_none() {
            out.benchmark = Some("mbb".into());
        }
        let b = self.resolved_bounds();
        out.bounds = BoundsSpec {
            cx: Some([b.cx.0, b.cx.1]),
            cy: Some([b.cy.0, b.cy.1]),
            theta: Some([b.theta.0, b.theta.1]),
            d: Some([b.d.0, b.d.1]),
        };
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |field: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid(field, format!("must be positive, got {v}")))
            }
        };
        positive("lx", self.lx)?;
        positive("ly", self.ly)?;
        if self.nx == 0 {
            return Err(invalid("nx", "must be at least 1"));
        }
        if self.ny == 0 {
            return Err(invalid("ny", "must be at least 1"));
        }
        if !(self.vf_star > 0.0 && self.vf_star <= 1.0) {
            return Err(invalid("vf_star", format!("must lie in (0, 1], got {}", self.vf_star)));
        }
        if !(1..=12).contains(&self.tree_depth) {
            return Err(invalid("tree_depth", format!("must lie in 1..=12, got {}", self.tree_depth)));
        }
        if self.sides < 3 {
            return Err(invalid("sides", format!("must be at least 3, got {}", self.sides)));
        }
        positive("projection.gamma", self.projection.gamma)?;
        positive("projection.beta", self.projection.beta)?;
        positive("projection.t", self.projection.t)?;
        positive("softmax_scale", self.softmax_scale)?;
        positive("empty_threshold", self.empty_threshold)?;
        self.material.validate().map_err(|e| invalid("material", e.to_string()))?;
        self.mma.validate().map_err(|e| invalid("mma", e.to_string()))?;
        let b = self.resolved_bounds();
        for (name, (lo, hi)) in [("bounds.cx", b.cx), ("bounds.cy", b.cy), ("bounds.theta", b.theta), ("bounds.d", b.d)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(invalid(name, format!("need finite lo <= hi, got ({lo}, {hi})")));
            }
        }
        if b.d.0 < 0.0 {
            return Err(invalid("bounds.d", "offsets must be non-negative"));
        }
        let n_b = (1usize << self.tree_depth) - 1;
        if let Some(k) = self.frozen.keys().find(|k| **k >= n_b) {
            return Err(invalid("frozen", format!("node {k} does not exist (tree has {n_b} internal nodes)")));
        }
        match (&self.benchmark, &self.boundary_conditions) {
            (Some(_), Some(_)) => {
                return Err(invalid("boundary_conditions", "give either a benchmark or explicit boundary conditions"))
            }
            (Some(name), None) if !BENCHMARKS.contains(&name.as_str()) => {
                return Err(ConfigError::UnknownBenchmark(name.clone()))
            }
            _ => {}
        }
        Ok(())
    }
}

/// Resolved parameter ranges `(lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub cx: (f64, f64),
    pub cy: (f64, f64),
    pub theta: (f64, f64),
    pub d: (f64, f64),
}

/// Position of every block inside the normalized design vector
/// `[cx | cy | theta | d | b]`; frozen operator nodes have no slot.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignLayout {
    pub n_primitives: usize,
    pub sides: usize,
    /// Start of the 4-entry block of each internal node, `None` when frozen.
    pub op_slots: Vec<Option<usize>>,
    pub len: usize,
}

/// Which parameter a design entry controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variable {
    Cx(usize),
    Cy(usize),
    Theta(usize),
    Offset(usize, usize),
    Operator(usize, usize),
}

impl std::fmt::Display for Variable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variable::Cx(i) => write!(f, "cx[{i}]"),
            Variable::Cy(i) => write!(f, "cy[{i}]"),
            Variable::Theta(i) => write!(f, "theta[{i}]"),
            Variable::Offset(i, j) => write!(f, "d[{i}][{j}]"),
            Variable::Operator(k, m) => write!(f, "b[{k}][{m}]"),
        }
    }
}

impl DesignLayout {
    pub fn new(tree: &CsgTree, sides: usize) -> Self {
        let n_p = tree.num_leaves();
        let mut next = n_p * (sides + 3);
        let op_slots = tree
            .nodes
            .iter()
            .map(|node| {
                node.frozen.is_none().then(|| {
                    let s = next;
                    next += 4;
                    s
                })
            })
            .collect();
        Self { n_primitives: n_p, sides, op_slots, len: next }
    }

    pub fn cx(&self, i: usize) -> usize {
        i
    }

    pub fn cy(&self, i: usize) -> usize {
        self.n_primitives + i
    }

    pub fn theta(&self, i: usize) -> usize {
        2 * self.n_primitives + i
    }

    pub fn offset(&self, i: usize, j: usize) -> usize {
        3 * self.n_primitives + i * self.sides + j
    }

    /// Size of the layout if no operator were frozen.
    pub fn full_len(&self) -> usize {
        self.n_primitives * (self.sides + 3) + 4 * self.op_slots.len()
    }

    /// Variable at position `full` of the unfrozen layout, with its index in
    /// `z` (`None` for entries of frozen nodes).
    pub fn full_entry(&self, full: usize) -> Option<(Variable, Option<usize>)> {
        let n_p = self.n_primitives;
        let geo = n_p * (self.sides + 3);
        let var = if full < n_p {
            Variable::Cx(full)
        } else if full < 2 * n_p {
            Variable::Cy(full - n_p)
        } else if full < 3 * n_p {
            Variable::Theta(full - 2 * n_p)
        } else if full < geo {
            let r = full - 3 * n_p;
            Variable::Offset(r / self.sides, r % self.sides)
        } else if full < self.full_len() {
            let r = full - geo;
            Variable::Operator(r / 4, r % 4)
        } else {
            return None;
        };
        let index = match var {
            Variable::Operator(k, m) => self.op_slots[k].map(|s| s + m),
            _ => Some(full),
        };
        Some((var, index))
    }
}

/// A validated problem with every derived object built.
#[derive(Debug, Clone)]
pub struct Problem {
    pub spec: ProblemSpec,
    pub mesh: Mesh,
    pub grid: SampleGrid,
    pub projection: ProjectionConfig,
    pub material: Material,
    pub bcs: BoundaryConditions,
    pub bounds: Bounds,
    /// Tree template: frozen nodes locked, free nodes overwritten from `z`.
    pub tree: CsgTree,
    pub layout: DesignLayout,
}

impl Problem {
    pub fn new(spec: &ProblemSpec) -> Result<Self, ConfigError> {
        spec.validate()?;
        let spec = spec.effective();
        let mesh = Mesh::new(spec.nx, spec.ny, spec.lx, spec.ly).map_err(|e| invalid("nx", e.to_string()))?;
        let grid = SampleGrid::new(spec.nx, spec.ny, spec.lx, spec.ly).map_err(|e| invalid("nx", e.to_string()))?;
        let p = spec.projection;
        let projection = ProjectionConfig::for_domain(p.gamma, p.beta, p.t, spec.lx, spec.ly)
            .map_err(|e| invalid("projection", e.to_string()))?;
        let bcs = match (&spec.benchmark, &spec.boundary_conditions) {
            (_, Some(b)) => BoundaryConditions {
                fixed_dofs: b.fixed_dofs.iter().copied().collect(),
                loads: b.loads.iter().copied().collect(),
            },
            (Some(name), None) => builtin_problem(name, &mesh)?,
            (None, None) => unreachable!("effective() fills the benchmark"),
        };
        bcs.validate(&mesh).map_err(|e| invalid("boundary_conditions", e.to_string()))?;
        let mut tree = CsgTree::new(spec.tree_depth).map_err(|e| invalid("tree_depth", e.to_string()))?;
        if let Some(op) = spec.freeze_all {
            for k in 0..tree.num_internal() {
                tree.freeze(k, op).expect("node exists");
            }
        }
        for (&k, &op) in &spec.frozen {
            tree.freeze(k, op).map_err(|e| invalid("frozen", e.to_string()))?;
        }
        let layout = DesignLayout::new(&tree, spec.sides);
        Ok(Self {
            bounds: spec.resolved_bounds(),
            material: spec.material,
            spec,
            mesh,
            grid,
            projection,
            bcs,
            tree,
            layout,
        })
    }

    pub fn design_len(&self) -> usize {
        self.layout.len
    }

    /// Tree carrying the operator weights encoded in `z`.
    pub fn tree_for(&self, weights: &[BooleanWeights]) -> CsgTree {
        let mut tree = self.tree.clone();
        for (node, w) in tree.nodes.iter_mut().zip(weights) {
            node.weights = *w;
        }
        tree
    }
}

fn affine((lo, hi): (f64, f64), z: f64) -> f64 {
    lo + (hi - lo) * z
}

fn inverse_affine((lo, hi): (f64, f64), v: f64) -> f64 {
    if hi == lo {
        0.0
    } else {
        (v - lo) / (hi - lo)
    }
}

/// Map `z` to primitive parameters and per-node operator weights.
pub fn denormalize(z: &[f64], problem: &Problem) -> Result<(Vec<PolygonParams>, Vec<BooleanWeights>), ConfigError> {
    let lay = &problem.layout;
    if z.len() != lay.len {
        return Err(ConfigError::Shape { expected: lay.len, got: z.len() });
    }
    let b = &problem.bounds;
    let params = (0..lay.n_primitives)
        .map(|i| PolygonParams {
            cx: affine(b.cx, z[lay.cx(i)]),
            cy: affine(b.cy, z[lay.cy(i)]),
            theta: affine(b.theta, z[lay.theta(i)]),
            offsets: (0..lay.sides).map(|j| affine(b.d, z[lay.offset(i, j)])).collect(),
        })
        .collect();
    let weights = problem
        .tree
        .nodes
        .iter()
        .zip(&lay.op_slots)
        .map(|(node, slot)| match (node.frozen, slot) {
            (Some(op), _) => BooleanWeights::one_hot(op),
            (None, Some(s)) => softmax_encode([z[*s], z[s + 1], z[s + 2], z[s + 3]], problem.spec.softmax_scale),
            (None, None) => unreachable!("free nodes always have a slot"),
        })
        .collect();
    Ok((params, weights))
}

/// Inverse affine map of the primitive block; operator entries are left at 0.5.
pub fn normalize(params: &[PolygonParams], problem: &Problem) -> Vec<f64> {
    let lay = &problem.layout;
    let b = &problem.bounds;
    let mut z = vec![0.5; lay.len];
    for (i, p) in params.iter().enumerate() {
        z[lay.cx(i)] = inverse_affine(b.cx, p.cx);
        z[lay.cy(i)] = inverse_affine(b.cy, p.cy);
        z[lay.theta(i)] = inverse_affine(b.theta, p.theta);
        for (j, d) in p.offsets.iter().enumerate() {
            z[lay.offset(i, j)] = inverse_affine(b.d, *d);
        }
    }
    z
}

/// I.i.d. uniform `[0, 1)` entries from ChaCha8 seeded with `spec.seed`.
pub fn initialize(problem: &Problem) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(problem.spec.seed);
    (0..problem.design_len()).map(|_| rng.gen::<f64>()).collect()
}

/// Supports and loads of the named benchmark on `mesh`.
pub fn builtin_problem(name: &str, mesh: &Mesh) -> Result<BoundaryConditions, ConfigError> {
    let mut bcs = BoundaryConditions::default();
    match name {
        "mbb" => {
            // half model: symmetry on the left edge, roller at the bottom right
            for j in 0..=mesh.ny {
                bcs.fixed_dofs.insert(2 * mesh.node(0, j));
            }
            bcs.fixed_dofs.insert(2 * mesh.node(mesh.nx, 0) + 1);
            bcs.loads.insert(2 * mesh.node(0, mesh.ny) + 1, -1.0);
        }
        "mid_cantilever" => {
            for j in 0..=mesh.ny {
                let n = mesh.node(0, j);
                bcs.fixed_dofs.insert(2 * n);
                bcs.fixed_dofs.insert(2 * n + 1);
            }
            bcs.loads.insert(2 * mesh.node(mesh.nx, mesh.ny / 2) + 1, -1.0);
        }
        other => return Err(ConfigError::UnknownBenchmark(other.to_string())),
    }
    Ok(bcs)
}
