//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use csg_topopt::fea::{simp_modulus, BoundaryConditions, Material, Mesh};
use csg_topopt::geometry::DensityField;
use nalgebra::{DMatrix, DVector};

/// Closed-form stiffness of a square bilinear quad (the classic 99-line `KE`),
/// unit modulus and thickness. Independent of the element size.
pub fn square_ke(nu: f64) -> [[f64; 8]; 8] {
    let k = [
        0.5 - nu / 6.0,
        0.125 + nu / 8.0,
        -0.25 - nu / 12.0,
        -0.125 + 3.0 * nu / 8.0,
        -0.25 + nu / 12.0,
        -0.125 - nu / 8.0,
        nu / 6.0,
        0.125 - 3.0 * nu / 8.0,
    ];
    let pattern: [[usize; 8]; 8] = [
        [0, 1, 2, 3, 4, 5, 6, 7],
        [1, 0, 7, 6, 5, 4, 3, 2],
        [2, 7, 0, 5, 6, 3, 4, 1],
        [3, 6, 5, 0, 7, 2, 1, 4],
        [4, 5, 6, 7, 0, 1, 2, 3],
        [5, 4, 3, 2, 1, 0, 7, 6],
        [6, 3, 4, 1, 2, 7, 0, 5],
        [7, 2, 1, 4, 3, 6, 5, 0],
    ];
    pattern.map(|row| row.map(|i| k[i] / (1.0 - nu * nu)))
}

/// Dense reduced system for square elements, solved by LU.
/// Returns the full displacement vector and the compliance.
pub fn dense_solve(field: &DensityField, mesh: &Mesh, m: &Material, bcs: &BoundaryConditions) -> (Vec<f64>, f64) {
    let (ax, ay) = mesh.element_size();
    assert!((ax - ay).abs() < 1e-12 * ax, "oracle needs square elements");
    let ke = square_ke(m.nu);
    let n = mesh.num_dofs();
    let free: Vec<usize> = (0..n).filter(|d| !bcs.fixed_dofs.contains(d)).collect();
    let mut map = vec![usize::MAX; n];
    for (k, &d) in free.iter().enumerate() {
        map[d] = k;
    }
    let mut kk = DMatrix::<f64>::zeros(free.len(), free.len());
    for e in 0..mesh.num_elements() {
        let ee = simp_modulus(field.values[e], m).unwrap();
        let dofs = mesh.element_dofs(e);
        for a in 0..8 {
            for b in 0..8 {
                let (i, j) = (map[dofs[a]], map[dofs[b]]);
                if i != usize::MAX && j != usize::MAX {
                    kk[(i, j)] += ee * ke[a][b];
                }
            }
        }
    }
    let f_full = bcs.force_vector(n);
    let f = DVector::from_iterator(free.len(), free.iter().map(|&d| f_full[d]));
    let u = kk.lu().solve(&f).expect("oracle system is nonsingular");
    let mut u_full = vec![0.0; n];
    for (k, &d) in free.iter().enumerate() {
        u_full[d] = u[k];
    }
    (u_full, f.dot(&u))
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}
