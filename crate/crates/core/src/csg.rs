//! Interpolated Boolean operators and perfect binary CSG trees over density fields.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::DensityField;

/// Default max-density threshold below which a node counts as empty.
pub const EMPTY_THRESHOLD: f64 = 0.01;

#[derive(Debug, Error, PartialEq)]
pub enum CsgError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid boolean weights {0:?}: entries must lie in [0, 1] and sum to 1")]
    InvalidWeights([f64; 4]),
    #[error("invalid tree: {0}")]
    InvalidTree(String),
}

/// The four discrete operators, in weight-vector order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BooleanOp {
    Intersection,
    Union,
    /// X minus Y.
    Difference,
    /// Y minus X.
    NegativeDifference,
}

impl BooleanOp {
    pub const ALL: [BooleanOp; 4] = [
        BooleanOp::Intersection,
        BooleanOp::Union,
        BooleanOp::Difference,
        BooleanOp::NegativeDifference,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            BooleanOp::Intersection => "intersection",
            BooleanOp::Union => "union",
            BooleanOp::Difference => "difference",
            BooleanOp::NegativeDifference => "negative_difference",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.name() == name)
    }

    /// Closed-form discrete operator on two densities.
    pub fn apply(self, rx: f64, ry: f64) -> f64 {
        match self {
            BooleanOp::Intersection => rx * ry,
            BooleanOp::Union => rx + ry - rx * ry,
            BooleanOp::Difference => rx - rx * ry,
            BooleanOp::NegativeDifference => ry - rx * ry,
        }
    }
}

impl fmt::Display for BooleanOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Convex weights over (intersection, union, difference, negative difference).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BooleanWeights(pub [f64; 4]);

impl BooleanWeights {
    pub fn new(w: [f64; 4]) -> Result<Self, CsgError> {
        let sum: f64 = w.iter().sum();
        if w.iter().any(|v| !(0.0..=1.0).contains(v)) || (sum - 1.0).abs() > 1e-12 {
            return Err(CsgError::InvalidWeights(w));
        }
        Ok(Self(w))
    }

    pub fn one_hot(op: BooleanOp) -> Self {
        let mut w = [0.0; 4];
        w[op.index()] = 1.0;
        Self(w)
    }

    pub fn uniform() -> Self {
        Self([0.25; 4])
    }

    /// Operator with the largest weight, ties going to the lowest index.
    pub fn dominant(&self) -> BooleanOp {
        let mut best = 0;
        for i in 1..4 {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        BooleanOp::ALL[best]
    }

    /// `Some(op)` when the weights are exactly one-hot.
    pub fn as_op(&self) -> Option<BooleanOp> {
        let op = self.dominant();
        (self.0[op.index()] == 1.0 && self.0.iter().filter(|v| **v == 0.0).count() == 3).then_some(op)
    }
}

/// Softmax of `scale * zb`, renormalized so the weights sum to one.
pub fn softmax_encode(zb: [f64; 4], scale: f64) -> BooleanWeights {
    let m = zb.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = zb.map(|v| (scale * (v - m)).exp());
    let s: f64 = e.iter().sum();
    let mut w = e.map(|v| v / s);
    // put any rounding residue on the largest entry
    let residue = 1.0 - w.iter().sum::<f64>();
    let top = BooleanWeights(w).dominant().index();
    w[top] += residue;
    BooleanWeights(w)
}

/// Jacobian `d b_i / d zb_m` of [`softmax_encode`].
pub fn softmax_jacobian(b: &BooleanWeights, scale: f64) -> [[f64; 4]; 4] {
    let mut jac = [[0.0; 4]; 4];
    for (i, row) in jac.iter_mut().enumerate() {
        for (m, entry) in row.iter_mut().enumerate() {
            let delta = if i == m { 1.0 } else { 0.0 };
            *entry = scale * b.0[i] * (delta - b.0[m]);
        }
    }
    jac
}

/// Unified Boolean operation on two densities.
pub fn combine(rx: f64, ry: f64, b: &BooleanWeights) -> f64 {
    let [b0, b1, b2, b3] = b.0;
    (b1 + b2) * rx + (b1 + b3) * ry + (b0 - b1 - b2 - b3) * rx * ry
}

/// Partial derivatives of [`combine`] with respect to its two operands.
pub fn combine_grad_operand(rx: f64, ry: f64, b: &BooleanWeights) -> (f64, f64) {
    let [b0, b1, b2, b3] = b.0;
    let mix = b0 - b1 - b2 - b3;
    ((b1 + b2) + mix * ry, (b1 + b3) + mix * rx)
}

/// Raw partial derivatives of [`combine`] with respect to the four weights.
pub fn combine_grad_weights(rx: f64, ry: f64) -> [f64; 4] {
    let xy = rx * ry;
    [xy, rx + ry - xy, rx - xy, ry - xy]
}

/// Field-wise [`combine`].
pub fn combine_fields(x: &DensityField, y: &DensityField, b: &BooleanWeights) -> Result<DensityField, CsgError> {
    if !x.same_shape(y) {
        return Err(CsgError::Shape(format!(
            "operands are {}x{} and {}x{}",
            x.nx, x.ny, y.nx, y.ny
        )));
    }
    let values = x
        .values
        .iter()
        .zip(&y.values)
        .map(|(&rx, &ry)| combine(rx, ry, b).clamp(0.0, 1.0))
        .collect();
    Ok(DensityField { nx: x.nx, ny: x.ny, values })
}

/// Internal node of a [`CsgTree`].
#[derive(Debug, Clone, PartialEq)]
pub struct InternalNode {
    pub weights: BooleanWeights,
    /// Locked operator; the optimizer never touches these weights.
    pub frozen: Option<BooleanOp>,
}

/// Perfect binary tree stored heap-style: internal nodes occupy ids
/// `0..n_b`, leaves ids `n_b..2 n_b + 1`. Node `k` has children `2k+1`
/// (left operand X) and `2k+2` (right operand Y).
#[derive(Debug, Clone, PartialEq)]
pub struct CsgTree {
    pub depth: usize,
    /// Primitive index at each leaf position.
    pub leaves: Vec<usize>,
    pub nodes: Vec<InternalNode>,
}

impl CsgTree {
    /// Tree of the given depth with leaf `i` holding primitive `i` and uniform weights.
    pub fn new(depth: usize) -> Result<Self, CsgError> {
        if depth == 0 || depth > 20 {
            return Err(CsgError::InvalidTree(format!("depth must be in 1..=20, got {depth}")));
        }
        let n_leaves = 1usize << depth;
        Ok(Self {
            depth,
            leaves: (0..n_leaves).collect(),
            nodes: vec![InternalNode { weights: BooleanWeights::uniform(), frozen: None }; n_leaves - 1],
        })
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn num_internal(&self) -> usize {
        self.nodes.len()
    }

    pub fn children(k: usize) -> (usize, usize) {
        (2 * k + 1, 2 * k + 2)
    }

    pub fn is_leaf_id(&self, id: usize) -> bool {
        id >= self.nodes.len()
    }

    /// Freeze node `k` to a discrete operator.
    pub fn freeze(&mut self, k: usize, op: BooleanOp) -> Result<(), CsgError> {
        let n = self.nodes.len();
        let node = self
            .nodes
            .get_mut(k)
            .ok_or_else(|| CsgError::InvalidTree(format!("node {k} is not an internal node (tree has {n})")))?;
        node.frozen = Some(op);
        node.weights = BooleanWeights::one_hot(op);
        Ok(())
    }

    /// Copy with every operator snapped to its one-hot argmax.
    pub fn snapped(&self) -> Self {
        let mut out = self.clone();
        for node in &mut out.nodes {
            node.weights = snap_to_onehot(&node.weights);
        }
        out
    }

    fn check_leaves(&self, leaf_fields: &[DensityField]) -> Result<(), CsgError> {
        if let Some(&p) = self.leaves.iter().find(|&&p| p >= leaf_fields.len()) {
            return Err(CsgError::Shape(format!(
                "leaf references primitive {p} but only {} fields were given",
                leaf_fields.len()
            )));
        }
        let first = &leaf_fields[self.leaves[0]];
        if let Some(f) = leaf_fields.iter().find(|f| !f.same_shape(first)) {
            return Err(CsgError::Shape(format!(
                "leaf fields disagree: {}x{} vs {}x{}",
                first.nx, first.ny, f.nx, f.ny
            )));
        }
        Ok(())
    }

    /// Fields at every internal node, indexed by node id.
    pub fn evaluate_nodes(&self, leaf_fields: &[DensityField]) -> Result<Vec<DensityField>, CsgError> {
        self.check_leaves(leaf_fields)?;
        let n_b = self.nodes.len();
        let mut out: Vec<Option<DensityField>> = vec![None; n_b];
        for k in (0..n_b).rev() {
            let (l, r) = Self::children(k);
            let x = if l >= n_b { &leaf_fields[self.leaves[l - n_b]] } else { out[l].as_ref().unwrap() };
            let y = if r >= n_b { &leaf_fields[self.leaves[r - n_b]] } else { out[r].as_ref().unwrap() };
            out[k] = Some(combine_fields(x, y, &self.nodes[k].weights)?);
        }
        Ok(out.into_iter().map(Option::unwrap).collect())
    }

    /// Field of node `id` (internal or leaf) given precomputed internal fields.
    pub fn node_field<'a>(
        &self,
        id: usize,
        internal: &'a [DensityField],
        leaf_fields: &'a [DensityField],
    ) -> &'a DensityField {
        let n_b = self.nodes.len();
        if id >= n_b {
            &leaf_fields[self.leaves[id - n_b]]
        } else {
            &internal[id]
        }
    }

    /// Reverse pass: given `d F / d root` per cell, returns `d F / d leaf`
    /// per primitive and the raw `d F / d b` per internal node.
    pub fn vjp(
        &self,
        internal: &[DensityField],
        leaf_fields: &[DensityField],
        root_grad: &[f64],
    ) -> (Vec<Vec<f64>>, Vec<[f64; 4]>) {
        let n_b = self.nodes.len();
        let cells = root_grad.len();
        let mut node_grad: Vec<Vec<f64>> = vec![Vec::new(); 2 * n_b + 1];
        node_grad[0] = root_grad.to_vec();
        let mut weight_grad = vec![[0.0; 4]; n_b];
        for k in 0..n_b {
            let (l, r) = Self::children(k);
            let x = &self.node_field(l, internal, leaf_fields).values;
            let y = &self.node_field(r, internal, leaf_fields).values;
            let b = &self.nodes[k].weights;
            let mut gl = vec![0.0; cells];
            let mut gr = vec![0.0; cells];
            let g = std::mem::take(&mut node_grad[k]);
            for e in 0..cells {
                let (dx, dy) = combine_grad_operand(x[e], y[e], b);
                gl[e] = g[e] * dx;
                gr[e] = g[e] * dy;
                let db = combine_grad_weights(x[e], y[e]);
                for i in 0..4 {
                    weight_grad[k][i] += g[e] * db[i];
                }
            }
            node_grad[l] = gl;
            node_grad[r] = gr;
        }
        let mut leaf_grad: Vec<Vec<f64>> = vec![vec![0.0; cells]; leaf_fields.len()];
        for (pos, &p) in self.leaves.iter().enumerate() {
            for (acc, v) in leaf_grad[p].iter_mut().zip(&node_grad[n_b + pos]) {
                *acc += v;
            }
        }
        (leaf_grad, weight_grad)
    }
}

/// Root field of the tree, evaluated bottom-up.
pub fn evaluate_tree(tree: &CsgTree, leaf_fields: &[DensityField]) -> Result<DensityField, CsgError> {
    Ok(tree.evaluate_nodes(leaf_fields)?.swap_remove(0))
}

/// One-hot vector at the argmax, ties toward the lowest operator index.
pub fn snap_to_onehot(b: &BooleanWeights) -> BooleanWeights {
    BooleanWeights::one_hot(b.dominant())
}

/// Node of a pruned (possibly unbalanced) CSG expression. `node` is the id
/// the node had in the original perfect tree.
#[derive(Debug, Clone, PartialEq)]
pub enum CsgExpr {
    Leaf { node: usize, primitive: usize },
    Op { node: usize, op: BooleanOp, left: Box<CsgExpr>, right: Box<CsgExpr> },
}

impl CsgExpr {
    pub fn node_id(&self) -> usize {
        match self {
            CsgExpr::Leaf { node, .. } | CsgExpr::Op { node, .. } => *node,
        }
    }

    pub fn evaluate(&self, leaf_fields: &[DensityField]) -> Result<DensityField, CsgError> {
        match self {
            CsgExpr::Leaf { primitive, .. } => leaf_fields
                .get(*primitive)
                .cloned()
                .ok_or_else(|| CsgError::Shape(format!("missing field for primitive {primitive}"))),
            CsgExpr::Op { op, left, right, .. } => {
                combine_fields(&left.evaluate(leaf_fields)?, &right.evaluate(leaf_fields)?, &BooleanWeights::one_hot(*op))
            }
        }
    }

    /// Number of nodes in the expression.
    pub fn size(&self) -> usize {
        match self {
            CsgExpr::Leaf { .. } => 1,
            CsgExpr::Op { left, right, .. } => 1 + left.size() + right.size(),
        }
    }

    /// Visit every node together with its evaluated field.
    pub fn for_each_field(
        &self,
        leaf_fields: &[DensityField],
        visit: &mut impl FnMut(&CsgExpr, &DensityField),
    ) -> Result<DensityField, CsgError> {
        let field = match self {
            CsgExpr::Leaf { .. } => self.evaluate(leaf_fields)?,
            CsgExpr::Op { op, left, right, .. } => {
                let x = left.for_each_field(leaf_fields, visit)?;
                let y = right.for_each_field(leaf_fields, visit)?;
                combine_fields(&x, &y, &BooleanWeights::one_hot(*op))?
            }
        };
        visit(self, &field);
        Ok(field)
    }

    fn from_tree(tree: &CsgTree, id: usize) -> Result<Self, CsgError> {
        let n_b = tree.nodes.len();
        if id >= n_b {
            return Ok(CsgExpr::Leaf { node: id, primitive: tree.leaves[id - n_b] });
        }
        let op = tree.nodes[id]
            .weights
            .as_op()
            .ok_or_else(|| CsgError::InvalidTree(format!("node {id} is not one-hot; snap before pruning")))?;
        let (l, r) = CsgTree::children(id);
        Ok(CsgExpr::Op {
            node: id,
            op,
            left: Box::new(Self::from_tree(tree, l)?),
            right: Box::new(Self::from_tree(tree, r)?),
        })
    }
}

/// Result of pruning: `root == None` means the whole design is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedTree {
    pub root: Option<CsgExpr>,
}

impl PrunedTree {
    pub fn from_tree(tree: &CsgTree) -> Result<Self, CsgError> {
        Ok(Self { root: Some(CsgExpr::from_tree(tree, 0)?) })
    }

    pub fn is_empty(&self) -> bool {
        self.root.is_none()
    }

    /// Root field; an empty design evaluates to zero on the grid of the leaves.
    pub fn evaluate(&self, leaf_fields: &[DensityField]) -> Result<DensityField, CsgError> {
        match &self.root {
            Some(root) => root.evaluate(leaf_fields),
            None => {
                let f = leaf_fields.first().ok_or_else(|| CsgError::Shape("no leaf fields".into()))?;
                Ok(DensityField::constant(f.nx, f.ny, 0.0))
            }
        }
    }
}

/// Rewrite applied when one operand is empty (`None`).
fn simplify(node: usize, op: BooleanOp, left: Option<CsgExpr>, right: Option<CsgExpr>) -> Option<CsgExpr> {
    use BooleanOp::*;
    match (op, left, right) {
        (_, None, None) => None,
        (Intersection, _, None) | (Intersection, None, _) => None,
        (Union, x, None) => x,
        (Union, None, y) => y,
        (Difference, x, None) => x,
        (Difference, None, _) => None,
        (NegativeDifference, _, None) => None,
        (NegativeDifference, None, y) => y,
        (op, Some(x), Some(y)) => Some(CsgExpr::Op { node, op, left: Box::new(x), right: Box::new(y) }),
    }
}

fn prune_expr(expr: CsgExpr, leaf_fields: &[DensityField], eps: f64) -> Result<Option<CsgExpr>, CsgError> {
    if expr.evaluate(leaf_fields)?.max() < eps {
        return Ok(None);
    }
    match expr {
        leaf @ CsgExpr::Leaf { .. } => Ok(Some(leaf)),
        CsgExpr::Op { node, op, left, right } => {
            let l = prune_expr(*left, leaf_fields, eps)?;
            let r = prune_expr(*right, leaf_fields, eps)?;
            Ok(simplify(node, op, l, r))
        }
    }
}

/// Remove nodes whose fields never exceed `eps` and simplify their parents,
/// repeating until no node of the result is empty.
pub fn prune(tree: &CsgTree, leaf_fields: &[DensityField], eps: f64) -> Result<PrunedTree, CsgError> {
    tree.check_leaves(leaf_fields)?;
    let mut current = PrunedTree::from_tree(tree)?.root;
    while let Some(expr) = current.clone() {
        let next = prune_expr(expr, leaf_fields, eps)?;
        if next == current {
            break;
        }
        current = next;
    }
    if current.is_none() {
        log::warn!("pruning removed every node: the design is empty");
    }
    Ok(PrunedTree { root: current })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn field(values: Vec<f64>) -> DensityField {
        let n = values.len();
        DensityField::new(n, 1, values).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let b = softmax_encode([0.3; 4], 4.0);
        assert_eq!(b.0, [0.25; 4]);
        let b = softmax_encode([1.0, 0.0, 0.0, 0.0], 4.0);
        let e4 = 4.0f64.exp();
        assert_relative_eq!(b.0[0], e4 / (e4 + 3.0), epsilon = 1e-15);
        assert_relative_eq!(b.0[0], 0.9479, epsilon = 1e-4);
        for i in 1..4 {
            assert_relative_eq!(b.0[i], 1.0 / (e4 + 3.0), epsilon = 1e-15);
            assert_relative_eq!(b.0[i], 0.0174, epsilon = 1e-4);
        }
    }

    #[test]
    fn combine_table_rows() {
        let i = BooleanWeights::one_hot(BooleanOp::Intersection);
        let u = BooleanWeights::one_hot(BooleanOp::Union);
        let d = BooleanWeights::one_hot(BooleanOp::Difference);
        assert_eq!(combine(0.5, 0.5, &i), 0.25);
        assert_eq!(combine(1.0, 0.0, &u), 1.0);
        assert_eq!(combine(1.0, 1.0, &d), 0.0);
        assert_eq!(combine(1.0, 1.0, &BooleanWeights::uniform()), 0.5);
    }

    #[test]
    fn operand_gradient_examples() {
        let u = BooleanWeights::one_hot(BooleanOp::Union);
        assert_eq!(combine_grad_operand(0.3, 1.0, &u).0, 0.0);
        let i = BooleanWeights::one_hot(BooleanOp::Intersection);
        assert_eq!(combine_grad_operand(0.3, 0.7, &i).0, 0.7);
        assert_eq!(combine_grad_weights(1.0, 1.0), [1.0, 1.0, 0.0, 0.0]);
        assert_eq!(combine_grad_weights(0.0, 0.0), [0.0; 4]);
    }

    #[test]
    fn snap_examples() {
        let b = BooleanWeights::new([0.1, 0.6, 0.2, 0.1]).unwrap();
        assert_eq!(snap_to_onehot(&b).0, [0.0, 1.0, 0.0, 0.0]);
        assert_eq!(snap_to_onehot(&BooleanWeights::uniform()).0, [1.0, 0.0, 0.0, 0.0]);
        for op in BooleanOp::ALL {
            let b = BooleanWeights::one_hot(op);
            assert_eq!(snap_to_onehot(&b), b);
            assert_eq!(b.as_op(), Some(op));
        }
        assert_eq!(BooleanWeights::uniform().as_op(), None);
    }

    #[test]
    fn weights_validation() {
        assert!(BooleanWeights::new([0.5, 0.5, 0.1, 0.0]).is_err());
        assert!(BooleanWeights::new([1.2, -0.2, 0.0, 0.0]).is_err());
    }

    #[test]
    fn tree_examples() {
        let f = field(vec![0.0, 0.2, 0.5, 0.9, 1.0]);
        let mut t = CsgTree::new(1).unwrap();
        t.freeze(0, BooleanOp::Union).unwrap();
        t.leaves = vec![0, 0];
        let r = evaluate_tree(&t, std::slice::from_ref(&f)).unwrap();
        for (a, b) in r.values.iter().zip(&f.values) {
            assert_relative_eq!(*a, 2.0 * b - b * b, epsilon = 1e-15);
        }

        let leaves = [
            field(vec![0.1, 0.9, 0.0]),
            field(vec![0.5, 0.3, 0.0]),
            field(vec![0.7, 0.2, 1.0]),
            field(vec![0.25, 0.6, 0.0]),
        ];
        let mut t = CsgTree::new(2).unwrap();
        for k in 0..3 {
            t.freeze(k, BooleanOp::Union).unwrap();
        }
        let r = evaluate_tree(&t, &leaves).unwrap();
        for e in 0..3 {
            let expect = 1.0 - leaves.iter().map(|l| 1.0 - l.values[e]).product::<f64>();
            assert_relative_eq!(r.values[e], expect, epsilon = 1e-15);
        }

        let zeros = vec![field(vec![0.0; 3]); 4];
        let mut t = CsgTree::new(2).unwrap();
        t.nodes[1].weights = BooleanWeights::new([0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(evaluate_tree(&t, &zeros).unwrap().values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn tree_shape_mismatch() {
        let t = CsgTree::new(1).unwrap();
        let a = DensityField::constant(2, 2, 0.5);
        let b = DensityField::constant(3, 2, 0.5);
        assert!(matches!(evaluate_tree(&t, &[a.clone(), b]), Err(CsgError::Shape(_))));
        assert!(matches!(evaluate_tree(&t, &[a]), Err(CsgError::Shape(_))));
    }

    #[test]
    fn tree_vjp_matches_fd() {
        let leaves: Vec<DensityField> = (0..4)
            .map(|i| field((0..5).map(|e| ((i * 5 + e) as f64 * 0.37).sin().abs()).collect()))
            .collect();
        let mut t = CsgTree::new(2).unwrap();
        t.nodes[0].weights = softmax_encode([0.1, 0.8, 0.3, 0.5], 4.0);
        t.nodes[1].weights = softmax_encode([0.9, 0.2, 0.6, 0.1], 4.0);
        t.nodes[2].weights = softmax_encode([0.4, 0.4, 0.7, 0.0], 4.0);
        let cot: Vec<f64> = (0..5).map(|e| 1.0 + e as f64).collect();
        let functional = |t: &CsgTree, l: &[DensityField]| -> f64 {
            let r = t.evaluate_nodes(l).unwrap().swap_remove(0);
            r.values.iter().zip(&cot).map(|(a, b)| a * b).sum()
        };
        let internal = t.evaluate_nodes(&leaves).unwrap();
        let (lg, wg) = t.vjp(&internal, &leaves, &cot);
        let h = 1e-6;
        for p in 0..4 {
            for e in 0..5 {
                let mut up = leaves.clone();
                let mut dn = leaves.clone();
                up[p].values[e] += h;
                dn[p].values[e] -= h;
                let fd = (functional(&t, &up) - functional(&t, &dn)) / (2.0 * h);
                assert_relative_eq!(lg[p][e], fd, epsilon = 1e-8, max_relative = 1e-7);
            }
        }
        for k in 0..3 {
            for i in 0..4 {
                let mut up = t.clone();
                let mut dn = t.clone();
                up.nodes[k].weights.0[i] += h;
                dn.nodes[k].weights.0[i] -= h;
                let fd = (functional(&up, &leaves) - functional(&dn, &leaves)) / (2.0 * h);
                assert_relative_eq!(wg[k][i], fd, epsilon = 1e-8, max_relative = 1e-7);
            }
        }
    }

    #[test]
    fn softmax_jacobian_matches_fd() {
        let zb = [0.2, 0.9, 0.35, 0.6];
        let b = softmax_encode(zb, 4.0);
        let jac = softmax_jacobian(&b, 4.0);
        let h = 1e-6;
        for m in 0..4 {
            let mut up = zb;
            let mut dn = zb;
            up[m] += h;
            dn[m] -= h;
            let (bu, bd) = (softmax_encode(up, 4.0), softmax_encode(dn, 4.0));
            for i in 0..4 {
                let fd = (bu.0[i] - bd.0[i]) / (2.0 * h);
                assert_relative_eq!(jac[i][m], fd, epsilon = 1e-9, max_relative = 1e-6);
            }
        }
    }

    fn op_tree(ops: [BooleanOp; 3]) -> CsgTree {
        let mut t = CsgTree::new(2).unwrap();
        for (k, op) in ops.into_iter().enumerate() {
            t.freeze(k, op).unwrap();
        }
        t
    }

    #[test]
    fn prune_union_with_empty() {
        let a = field(vec![1.0, 0.5, 0.0]);
        let empty = field(vec![0.0, 0.001, 0.0]);
        let mut t = CsgTree::new(1).unwrap();
        t.freeze(0, BooleanOp::Union).unwrap();
        let p = prune(&t, &[a.clone(), empty.clone()], EMPTY_THRESHOLD).unwrap();
        assert_eq!(p.root, Some(CsgExpr::Leaf { node: 1, primitive: 0 }));

        t.freeze(0, BooleanOp::Intersection).unwrap();
        let p = prune(&t, &[a, empty], EMPTY_THRESHOLD).unwrap();
        assert!(p.is_empty());
    }

    #[test]
    fn prune_rule_table() {
        use BooleanOp::*;
        let a = field(vec![1.0, 0.6, 0.0]);
        let z = field(vec![0.0, 0.002, 0.0]);
        // (op, left empty?, expected survivor: Some(primitive) or None)
        let cases = [
            (Union, false, Some(0)),
            (Union, true, Some(1)),
            (Difference, false, Some(0)),
            (Difference, true, None),
            (NegativeDifference, false, None),
            (NegativeDifference, true, Some(1)),
        ];
        for (op, left_empty, expect) in cases {
            let mut t = CsgTree::new(1).unwrap();
            t.freeze(0, op).unwrap();
            let leaves = if left_empty { vec![z.clone(), a.clone()] } else { vec![a.clone(), z.clone()] };
            let p = prune(&t, &leaves, EMPTY_THRESHOLD).unwrap();
            let got = p.root.map(|e| match e {
                CsgExpr::Leaf { primitive, .. } => primitive,
                other => panic!("expected leaf, got {other:?}"),
            });
            assert_eq!(got, expect, "{op} left_empty={left_empty}");
        }
    }

    #[test]
    fn prune_noop_without_empty_nodes() {
        let leaves: Vec<DensityField> = (0..4).map(|i| field(vec![0.2 + 0.1 * i as f64, 0.9, 0.5])).collect();
        let t = op_tree([BooleanOp::Union, BooleanOp::Intersection, BooleanOp::Union]);
        let p = prune(&t, &leaves, EMPTY_THRESHOLD).unwrap();
        assert_eq!(p, PrunedTree::from_tree(&t).unwrap());
        assert_eq!(p.root.as_ref().unwrap().size(), 7);
    }

    #[test]
    fn prune_rejects_relaxed_weights() {
        let t = CsgTree::new(1).unwrap();
        let a = field(vec![1.0]);
        assert!(matches!(prune(&t, &[a.clone(), a], EMPTY_THRESHOLD), Err(CsgError::InvalidTree(_))));
    }

    fn simplex() -> impl Strategy<Value = BooleanWeights> {
        prop::array::uniform4(0.0f64..1.0).prop_map(|w| {
            let s: f64 = w.iter().sum::<f64>() + 1e-9;
            let mut v = w.map(|x| x / s);
            let r = 1.0 - v.iter().sum::<f64>();
            v[0] += r;
            BooleanWeights(v)
        })
    }

    proptest! {
        #[test]
        fn combine_closed_on_unit_interval(rx in 0.0f64..=1.0, ry in 0.0f64..=1.0, b in simplex()) {
            let v = combine(rx, ry, &b);
            prop_assert!((-1e-15..=1.0 + 1e-15).contains(&v));
        }

        #[test]
        fn combine_linear_in_weights(rx in 0.0f64..=1.0, ry in 0.0f64..=1.0, a in simplex(), c in simplex(), lam in 0.0f64..=1.0) {
            let mix = BooleanWeights(std::array::from_fn(|i| lam * a.0[i] + (1.0 - lam) * c.0[i]));
            let lhs = combine(rx, ry, &mix);
            let rhs = lam * combine(rx, ry, &a) + (1.0 - lam) * combine(rx, ry, &c);
            prop_assert!((lhs - rhs).abs() < 1e-14);
        }

        #[test]
        fn solid_and_void_identities(b in simplex()) {
            prop_assert!((combine(1.0, 1.0, &b) - (b.0[0] + b.0[1])).abs() < 1e-15);
            prop_assert_eq!(combine(0.0, 0.0, &b), 0.0);
        }

        #[test]
        fn softmax_preserves_argmax(zb in prop::array::uniform4(0.0f64..=1.0), scale in 0.1f64..20.0) {
            let b = softmax_encode(zb, scale);
            prop_assert!((b.0.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            prop_assert!(b.0.iter().all(|v| (0.0..=1.0).contains(v)));
            let top = (0..4).fold(0, |best, i| if zb[i] > zb[best] { i } else { best });
            if zb.iter().filter(|v| **v == zb[top]).count() == 1 {
                prop_assert_eq!(b.dominant().index(), top);
            }
        }

        #[test]
        fn operand_gradient_matches_fd(rx in 0.01f64..0.99, ry in 0.01f64..0.99, b in simplex()) {
            let h = 1e-6;
            let (gx, gy) = combine_grad_operand(rx, ry, &b);
            let fx = (combine(rx + h, ry, &b) - combine(rx - h, ry, &b)) / (2.0 * h);
            let fy = (combine(rx, ry + h, &b) - combine(rx, ry - h, &b)) / (2.0 * h);
            prop_assert!((gx - fx).abs() < 1e-9);
            prop_assert!((gy - fy).abs() < 1e-9);
        }
    }
}
