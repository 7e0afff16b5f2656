//! Run artifacts: history and density CSVs, a PGM raster, the tree document
//! and a summary. Every file is written to a temporary sibling and renamed
//! into place, so readers never observe a half-written artifact.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::csg::{BooleanOp, CsgExpr, CsgTree, PrunedTree};
use crate::geometry::{DensityField, PolygonParams};
use crate::mma::StopReason;
use crate::optimize::{OptimizeResult, PartialRun, RunHistory};
use crate::problem::ProblemSpec;

pub const HISTORY_FILE: &str = "history.csv";
pub const DESIGN_CSV_FILE: &str = "design.csv";
pub const DESIGN_PGM_FILE: &str = "design.pgm";
pub const TREE_FILE: &str = "tree.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.json";
pub const FAILURE_FILE: &str = "failure.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputOptions {
    /// Write measured wall times into the history. When off, the timing
    /// columns are zero and the history is byte-reproducible.
    pub timings: bool,
}

impl Default for OutputOptions {
    fn default() -> Self {
        Self { timings: true }
    }
}

pub fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "output path has no file name"))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = fs::write(&tmp, contents).and_then(|_| fs::rename(&tmp, path));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

pub fn history_csv(history: &RunHistory, opts: OutputOptions) -> String {
    let mut out = String::from("iter,J,g_v,kkt,step,t_projection,t_tree,t_fea_sens\n");
    for r in &history.records {
        let t = |v: f64| if opts.timings { v } else { 0.0 };
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:.6e},{:.6e},{:.6e}",
            r.iter,
            r.compliance,
            r.volume,
            r.kkt,
            r.step,
            t(r.t_projection),
            t(r.t_tree),
            t(r.t_fea_sens)
        )
        .unwrap();
    }
    out
}

/// Parsed history row (timings included), for consumers of `history.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub iter: usize,
    pub compliance: f64,
    pub volume: f64,
    pub kkt: f64,
    pub step: f64,
    pub times: [f64; 3],
}

pub fn parse_history_csv(text: &str) -> Result<Vec<HistoryRow>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some("iter,J,g_v,kkt,step,t_projection,t_tree,t_fea_sens") => {}
        other => return Err(format!("unexpected header {other:?}")),
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 8 {
                return Err(format!("line {}: expected 8 columns, found {}", n + 2, cols.len()));
            }
            let f = |i: usize| cols[i].parse::<f64>().map_err(|e| format!("line {}: {e}", n + 2));
            Ok(HistoryRow {
                iter: cols[0].parse().map_err(|e| format!("line {}: {e}", n + 2))?,
                compliance: f(1)?,
                volume: f(2)?,
                kkt: f(3)?,
                step: f(4)?,
                times: [f(5)?, f(6)?, f(7)?],
            })
        })
        .collect()
}

/// One line per grid row, bottom row first (same order as the field).
pub fn design_csv(field: &DensityField) -> String {
    let mut out = String::new();
    for j in 0..field.ny {
        let row = &field.values[j * field.nx..(j + 1) * field.nx];
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_design_csv(text: &str) -> Result<Vec<Vec<f64>>, String> {
    text.lines()
        .map(|l| l.split(',').map(|c| c.parse::<f64>().map_err(|e| e.to_string())).collect())
        .collect()
}

/// Binary graymap, top image row = top of the domain, pixel `round(255 d)`.
pub fn design_pgm(field: &DensityField) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", field.nx, field.ny).into_bytes();
    for j in (0..field.ny).rev() {
        for i in 0..field.nx {
            let d = field.values[j * field.nx + i].clamp(0.0, 1.0);
            out.push((255.0 * d).round() as u8);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonDoc {
    pub cx: f64,
    pub cy: f64,
    pub theta: f64,
    pub offsets: Vec<f64>,
}

impl From<&PolygonParams> for PolygonDoc {
    fn from(p: &PolygonParams) -> Self {
        Self { cx: p.cx, cy: p.cy, theta: p.theta, offsets: p.offsets.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeDoc {
    Internal {
        id: usize,
        children: [usize; 2],
        /// Snapped operator.
        operator: BooleanOp,
        /// Relaxed weights at the end of the run, in operator order
        /// intersection, union, difference, negative difference.
        weights: [f64; 4],
        frozen: bool,
    },
    Leaf {
        id: usize,
        primitive: usize,
        polygon: PolygonDoc,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrunedDoc {
    Internal {
        id: usize,
        operator: BooleanOp,
        children: Vec<PrunedDoc>,
    },
    Leaf {
        id: usize,
        primitive: usize,
    },
}

impl From<&CsgExpr> for PrunedDoc {
    fn from(e: &CsgExpr) -> Self {
        match e {
            CsgExpr::Leaf { node, primitive } => PrunedDoc::Leaf { id: *node, primitive: *primitive },
            CsgExpr::Op { node, op, left, right } => PrunedDoc::Internal {
                id: *node,
                operator: *op,
                children: vec![left.as_ref().into(), right.as_ref().into()],
            },
        }
    }
}

impl PrunedDoc {
    pub fn id(&self) -> usize {
        match self {
            PrunedDoc::Internal { id, .. } | PrunedDoc::Leaf { id, .. } => *id,
        }
    }

    /// Visit this node and all descendants, parents first.
    pub fn walk(&self, f: &mut impl FnMut(&PrunedDoc)) {
        f(self);
        if let PrunedDoc::Internal { children, .. } = self {
            for c in children {
                c.walk(f);
            }
        }
    }

    pub fn to_expr(&self) -> CsgExpr {
        match self {
            PrunedDoc::Leaf { id, primitive } => CsgExpr::Leaf { node: *id, primitive: *primitive },
            PrunedDoc::Internal { id, operator, children } => CsgExpr::Op {
                node: *id,
                op: *operator,
                left: Box::new(children[0].to_expr()),
                right: Box::new(children[1].to_expr()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeDocument {
    pub depth: usize,
    pub nodes: Vec<NodeDoc>,
    /// Pruned snapped tree; `null` when the whole design is empty.
    pub pruned: Option<PrunedDoc>,
}

impl TreeDocument {
    pub fn new(relaxed: &CsgTree, snapped: &CsgTree, params: &[PolygonParams], pruned: &PrunedTree) -> Self {
        let n_b = relaxed.nodes.len();
        let mut nodes = Vec::with_capacity(2 * n_b + 1);
        for (k, (r, s)) in relaxed.nodes.iter().zip(&snapped.nodes).enumerate() {
            let (left, right) = CsgTree::children(k);
            nodes.push(NodeDoc::Internal {
                id: k,
                children: [left, right],
                operator: s.weights.dominant(),
                weights: r.weights.0,
                frozen: r.frozen.is_some(),
            });
        }
        for (i, &p) in relaxed.leaves.iter().enumerate() {
            nodes.push(NodeDoc::Leaf { id: n_b + i, primitive: p, polygon: (&params[p]).into() });
        }
        Self { depth: relaxed.depth, nodes, pruned: pruned.root.as_ref().map(PrunedDoc::from) }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("tree document serializes");
        s.push('\n');
        s
    }

    pub fn pruned_tree(&self) -> PrunedTree {
        PrunedTree { root: self.pruned.as_ref().map(PrunedDoc::to_expr) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub j_relaxed: f64,
    pub j_snapped: f64,
    /// Volume constraint of the final relaxed iterate.
    pub g_v: f64,
    pub g_v_snapped: f64,
    pub iterations: usize,
    pub reason: StopReason,
    pub operators: Vec<BooleanOp>,
}

impl Summary {
    pub fn new(result: &OptimizeResult) -> Self {
        Self {
            j_relaxed: result.relaxed.compliance,
            j_snapped: result.snapped.compliance,
            g_v: result.relaxed.volume,
            g_v_snapped: result.snapped.volume,
            iterations: result.iterations,
            reason: result.reason,
            operators: result.operators(),
        }
    }
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("document serializes");
    s.push('\n');
    s.into_bytes()
}

/// Write every artifact of a finished run into `dir` (created if missing).
pub fn write_run(dir: &Path, spec: &ProblemSpec, result: &OptimizeResult, opts: OutputOptions) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join(CONFIG_FILE), spec.effective().to_json().as_bytes())?;
    write_atomic(&dir.join(HISTORY_FILE), history_csv(&result.history, opts).as_bytes())?;
    write_atomic(&dir.join(DESIGN_CSV_FILE), design_csv(&result.snapped_density).as_bytes())?;
    write_atomic(&dir.join(DESIGN_PGM_FILE), &design_pgm(&result.snapped_density))?;
    let doc = TreeDocument::new(&result.relaxed_tree, &result.snapped_tree, &result.params, &result.pruned);
    write_atomic(&dir.join(TREE_FILE), doc.to_json().as_bytes())?;
    write_atomic(&dir.join(SUMMARY_FILE), &json(&Summary::new(result)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureReport {
    pub error: String,
    pub iterations_completed: usize,
    /// Last design vector whose evaluation succeeded.
    pub last_good_z: Option<Vec<f64>>,
}

/// Persist what survives an aborted run: config, history so far, and the
/// last good design vector.
pub fn write_partial(
    dir: &Path,
    spec: &ProblemSpec,
    partial: &PartialRun,
    error: &str,
    opts: OutputOptions,
) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join(CONFIG_FILE), spec.effective().to_json().as_bytes())?;
    write_atomic(&dir.join(HISTORY_FILE), history_csv(&partial.history, opts).as_bytes())?;
    let report = FailureReport {
        error: error.to_string(),
        iterations_completed: partial.history.len(),
        last_good_z: partial.z.clone(),
    };
    write_atomic(&dir.join(FAILURE_FILE), &json(&report))
}
