//! Polygonal primitives and their projection onto element-center density fields.
//!
//! A primitive is the intersection of `S` half-spaces arranged around a
//! reference point. Its signed distance is approximated by a LogSumExp over
//! the half-space distances, pushed through a sigmoid and then a tanh
//! threshold to obtain a density in `[0, 1]`.

use std::f64::consts::PI;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid primitive: {0}")]
    InvalidPrimitive(String),
    #[error("invalid projection config: {0}")]
    InvalidConfig(String),
    #[error("density {0} outside [0, 1]")]
    Domain(f64),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

/// Center, rotation and half-space offsets of one convex polygon.
#[derive(Debug, Clone, PartialEq)]
pub struct PolygonParams {
    pub cx: f64,
    pub cy: f64,
    pub theta: f64,
    pub offsets: Vec<f64>,
}

impl PolygonParams {
    pub fn new(cx: f64, cy: f64, theta: f64, offsets: Vec<f64>) -> Result<Self, GeometryError> {
        if offsets.len() < 3 {
            return Err(GeometryError::InvalidPrimitive(format!(
                "need at least 3 half-spaces, got {}",
                offsets.len()
            )));
        }
        if let Some(d) = offsets.iter().find(|d| !d.is_finite() || **d < 0.0) {
            return Err(GeometryError::InvalidPrimitive(format!(
                "half-space offset {d} must be finite and non-negative"
            )));
        }
        if !(cx.is_finite() && cy.is_finite() && theta.is_finite()) {
            return Err(GeometryError::InvalidPrimitive(
                "center and rotation must be finite".into(),
            ));
        }
        Ok(Self { cx, cy, theta, offsets })
    }

    /// Regular polygon with the same offset on every side.
    pub fn regular(cx: f64, cy: f64, theta: f64, sides: usize, offset: f64) -> Result<Self, GeometryError> {
        Self::new(cx, cy, theta, vec![offset; sides])
    }

    pub fn sides(&self) -> usize {
        self.offsets.len()
    }

    /// Final orientation of half-space `j` (0-based): rotation plus base angle.
    pub fn halfspace_angle(&self, j: usize) -> f64 {
        self.theta + base_angle(j, self.sides())
    }
}

/// Sharpness parameters of the projection pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionConfig {
    /// Sigmoid sharpness.
    pub gamma: f64,
    /// Threshold filter sharpness.
    pub beta: f64,
    /// LogSumExp scale.
    pub t: f64,
    /// Diagonal of the domain bounding box.
    pub l0: f64,
}

impl ProjectionConfig {
    pub fn new(gamma: f64, beta: f64, t: f64, l0: f64) -> Result<Self, GeometryError> {
        for (name, v) in [("gamma", gamma), ("beta", beta), ("t", t), ("l0", l0)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(GeometryError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(Self { gamma, beta, t, l0 })
    }

    pub fn for_domain(gamma: f64, beta: f64, t: f64, lx: f64, ly: f64) -> Result<Self, GeometryError> {
        Self::new(gamma, beta, t, lx.hypot(ly))
    }

    /// Upper bound of the LogSumExp overshoot for `sides` half-spaces.
    pub fn lse_gap(&self, sides: usize) -> f64 {
        self.l0 / self.t * (sides as f64).ln()
    }
}

/// Element-center sampling locations of a structured `nx` x `ny` grid.
///
/// Points are stored row-major: index `j * nx + i` is the center of the
/// element in column `i` (along x) and row `j` (along y, from the bottom).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    pub points: Vec<[f64; 2]>,
}

impl SampleGrid {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self, GeometryError> {
        if nx == 0 || ny == 0 {
            return Err(GeometryError::InvalidGrid(format!("element counts must be positive, got {nx}x{ny}")));
        }
        if !(lx > 0.0 && ly > 0.0 && lx.is_finite() && ly.is_finite()) {
            return Err(GeometryError::InvalidGrid(format!("domain lengths must be positive, got {lx}x{ly}")));
        }
        let (hx, hy) = (lx / nx as f64, ly / ny as f64);
        let points = (0..ny)
            .flat_map(|j| (0..nx).map(move |i| [(i as f64 + 0.5) * hx, (j as f64 + 0.5) * hy]))
            .collect();
        Ok(Self { nx, ny, lx, ly, points })
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn diagonal(&self) -> f64 {
        self.lx.hypot(self.ly)
    }
}

/// Per-element densities on a structured grid, row-major like [`SampleGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

impl DensityField {
    pub fn new(nx: usize, ny: usize, values: Vec<f64>) -> Result<Self, GeometryError> {
        if values.len() != nx * ny {
            return Err(GeometryError::InvalidGrid(format!(
                "expected {} values for a {nx}x{ny} field, got {}",
                nx * ny,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(GeometryError::Domain(*v));
        }
        Ok(Self { nx, ny, values })
    }

    pub fn constant(nx: usize, ny: usize, value: f64) -> Self {
        Self { nx, ny, values: vec![value; nx * ny] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn same_shape(&self, other: &DensityField) -> bool {
        self.nx == other.nx && self.ny == other.ny
    }

    pub fn max_abs_diff(&self, other: &DensityField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn base_angle(j: usize, sides: usize) -> f64 {
    2.0 * PI * j as f64 / sides as f64
}

/// Uniformly spaced initial half-space orientations `2 pi j / S`.
pub fn base_angles(sides: usize) -> Result<Vec<f64>, GeometryError> {
    if sides < 3 {
        return Err(GeometryError::InvalidPrimitive(format!("need at least 3 sides, got {sides}")));
    }
    Ok((0..sides).map(|j| base_angle(j, sides)).collect())
}

/// Signed distance to half-space `j` (0-based); negative inside.
pub fn halfspace_sdf(p: &PolygonParams, j: usize, x: f64, y: f64) -> f64 {
    let alpha = p.halfspace_angle(j);
    (x - p.cx) * alpha.cos() + (y - p.cy) * alpha.sin() - p.offsets[j]
}

/// Smooth maximum `(l0/t) log sum exp((t/l0) v_j)`, shifted by the max for stability.
pub(crate) fn log_sum_exp(values: &[f64], cfg: &ProjectionConfig) -> f64 {
    let k = cfg.t / cfg.l0;
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = values.iter().map(|v| (k * (v - m)).exp()).sum();
    m + s.ln() / k
}

/// LogSumExp approximation of the polygon signed distance.
pub fn polygon_sdf(p: &PolygonParams, x: f64, y: f64, cfg: &ProjectionConfig) -> f64 {
    let hs: Vec<f64> = (0..p.sides()).map(|j| halfspace_sdf(p, j, x, y)).collect();
    log_sum_exp(&hs, cfg)
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid projection of a signed distance: interior (negative) maps toward 1.
pub fn project_density(phi: f64, cfg: &ProjectionConfig) -> f64 {
    sigmoid(-cfg.gamma / cfg.l0 * phi)
}

/// Derivative of [`project_density`] with respect to `phi`.
pub fn project_density_derivative(phi: f64, cfg: &ProjectionConfig) -> f64 {
    let s = project_density(phi, cfg);
    -cfg.gamma / cfg.l0 * s * (1.0 - s)
}

pub(crate) fn threshold_unchecked(rho_tilde: f64, beta: f64) -> f64 {
    let h = (0.5 * beta).tanh();
    (h + (beta * (rho_tilde - 0.5)).tanh()) / (2.0 * h)
}

/// Tanh threshold filter; maps `[0, 1]` onto itself monotonically.
pub fn threshold(rho_tilde: f64, beta: f64) -> Result<f64, GeometryError> {
    if !(0.0..=1.0).contains(&rho_tilde) {
        return Err(GeometryError::Domain(rho_tilde));
    }
    Ok(threshold_unchecked(rho_tilde, beta))
}

pub fn threshold_derivative(rho_tilde: f64, beta: f64) -> f64 {
    let th = (beta * (rho_tilde - 0.5)).tanh();
    beta * (1.0 - th * th) / (2.0 * (0.5 * beta).tanh())
}

/// Full pipeline at one point: SDF, sigmoid, threshold.
pub fn point_density(p: &PolygonParams, x: f64, y: f64, cfg: &ProjectionConfig) -> f64 {
    threshold_unchecked(project_density(polygon_sdf(p, x, y, cfg), cfg), cfg.beta)
}

pub fn rasterize_primitive(p: &PolygonParams, grid: &SampleGrid, cfg: &ProjectionConfig) -> DensityField {
    let values = grid
        .points
        .iter()
        .map(|&[x, y]| point_density(p, x, y, cfg).clamp(0.0, 1.0))
        .collect();
    DensityField { nx: grid.nx, ny: grid.ny, values }
}

/// Gradient of a scalar functional with respect to one primitive's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveGradient {
    pub cx: f64,
    pub cy: f64,
    pub theta: f64,
    pub offsets: Vec<f64>,
}

/// Vector-Jacobian product of [`rasterize_primitive`]: given the derivative
/// of some functional with respect to every cell density, return its
/// derivative with respect to the primitive parameters.
pub fn rasterize_primitive_vjp(
    p: &PolygonParams,
    grid: &SampleGrid,
    cfg: &ProjectionConfig,
    cell_grad: &[f64],
) -> PrimitiveGradient {
    let sides = p.sides();
    let k = cfg.t / cfg.l0;
    let (cos, sin): (Vec<f64>, Vec<f64>) = (0..sides)
        .map(|j| {
            let a = p.halfspace_angle(j);
            (a.cos(), a.sin())
        })
        .unzip();
    let mut out = PrimitiveGradient { cx: 0.0, cy: 0.0, theta: 0.0, offsets: vec![0.0; sides] };
    let mut hs = vec![0.0; sides];
    let mut w = vec![0.0; sides];
    for (&[x, y], &g) in grid.points.iter().zip(cell_grad) {
        if g == 0.0 {
            continue;
        }
        let (dx, dy) = (x - p.cx, y - p.cy);
        for j in 0..sides {
            hs[j] = dx * cos[j] + dy * sin[j] - p.offsets[j];
        }
        let m = hs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..sides {
            w[j] = (k * (hs[j] - m)).exp();
            total += w[j];
        }
        let phi = m + total.ln() / k;
        let rho_tilde = project_density(phi, cfg);
        let dphi = g * threshold_derivative(rho_tilde, cfg.beta) * project_density_derivative(phi, cfg);
        if dphi == 0.0 {
            continue;
        }
        for j in 0..sides {
            let a = dphi * w[j] / total;
            out.cx -= a * cos[j];
            out.cy -= a * sin[j];
            out.theta += a * (-dx * sin[j] + dy * cos[j]);
            out.offsets[j] -= a;
        }
    }
    out
}
