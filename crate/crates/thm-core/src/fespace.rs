//! Broken polynomial spaces on polygonal meshes.

use std::sync::Arc;

use thiserror::Error;

use crate::PolyMesh;
use crate::basis::{BasisEval, ElementBasis, local_dim};
use crate::quadrature::{self, QuadratureRule};

/// Highest supported polynomial degree.
pub const MAX_DEGREE: usize = 9;

#[derive(Debug, Error)]
pub enum SpaceError {
    #[error("polynomial degree must be in 1..={MAX_DEGREE}, got {0}")]
    Degree(usize),
    #[error("components must be 1 or 2, got {0}")]
    Components(usize),
    #[error("cell {0} is degenerate for quadrature")]
    DegenerateCell(usize),
}

/// Discontinuous space of degree `degree` polynomials with 1 or 2 components.
///
/// Degrees of freedom are element-major: cell `c`, component `k`, mode `i` sits at
/// `c * local_dim + k * n_modes + i`.
#[derive(Debug, Clone)]
pub struct FESpace {
    mesh: Arc<PolyMesh>,
    degree: usize,
    components: usize,
    bases: Arc<Vec<ElementBasis>>,
}

impl FESpace {
    pub fn new(mesh: Arc<PolyMesh>, degree: usize, components: usize) -> Result<Self, SpaceError> {
        if degree == 0 || degree > MAX_DEGREE {
            return Err(SpaceError::Degree(degree));
        }
        if components != 1 && components != 2 {
            return Err(SpaceError::Components(components));
        }
        let mut bases = Vec::with_capacity(mesh.n_cells());
        for c in 0..mesh.n_cells() {
            let poly = mesh.cell_polygon(c);
            let rule = element_rule(&mesh, c, 2 * degree + 2);
            let mut lo = [f64::INFINITY; 2];
            let mut hi = [f64::NEG_INFINITY; 2];
            for p in &poly {
                for k in 0..2 {
                    lo[k] = lo[k].min(p[k]);
                    hi[k] = hi[k].max(p[k]);
                }
            }
            bases.push(ElementBasis::new(degree, lo, hi, &rule).map_err(|_| SpaceError::DegenerateCell(c))?);
        }
        Ok(Self { mesh, degree, components, bases: Arc::new(bases) })
    }

    /// Same basis, different number of components.
    pub fn with_components(&self, components: usize) -> Result<Self, SpaceError> {
        if components != 1 && components != 2 {
            return Err(SpaceError::Components(components));
        }
        Ok(Self { components, ..self.clone() })
    }

    pub fn mesh(&self) -> &Arc<PolyMesh> {
        &self.mesh
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn components(&self) -> usize {
        self.components
    }

    /// Number of scalar modes per element.
    pub fn n_modes(&self) -> usize {
        local_dim(self.degree)
    }

    pub fn local_dim(&self) -> usize {
        self.components * self.n_modes()
    }

    pub fn n_dofs(&self) -> usize {
        self.local_dim() * self.mesh.n_cells()
    }

    pub fn dof(&self, cell: usize, component: usize, mode: usize) -> usize {
        cell * self.local_dim() + component * self.n_modes() + mode
    }

    pub fn cell_range(&self, cell: usize) -> std::ops::Range<usize> {
        let n = self.local_dim();
        cell * n..(cell + 1) * n
    }

    pub fn basis(&self, cell: usize) -> &ElementBasis {
        &self.bases[cell]
    }

    /// Default volume rule: exact for the trilinear transport integrand.
    pub fn volume_order(&self) -> usize {
        3 * self.degree + 2
    }

    pub fn element_quadrature(&self, cell: usize, order: usize) -> QuadratureRule {
        element_rule(&self.mesh, cell, order)
    }

    pub fn face_quadrature(&self, face: usize, order: usize) -> QuadratureRule {
        face_rule(&self.mesh, face, order)
    }

    /// Value and broken gradient of every component at `x` in `cell`.
    pub fn evaluate(&self, coeffs: &[f64], cell: usize, x: [f64; 2]) -> PointValue {
        let mut e = BasisEval::default();
        self.bases[cell].eval(x, false, &mut e);
        self.evaluate_with(coeffs, cell, &e)
    }

    /// Same as [`FESpace::evaluate`] from precomputed basis values.
    pub fn evaluate_with(&self, coeffs: &[f64], cell: usize, e: &BasisEval) -> PointValue {
        let nm = self.n_modes();
        let mut out = PointValue { value: [0.0; 2], grad: [[0.0; 2]; 2] };
        for k in 0..self.components {
            let local = &coeffs[self.dof(cell, k, 0)..self.dof(cell, k, 0) + nm];
            for (i, &c) in local.iter().enumerate() {
                out.value[k] += c * e.values[i];
                out.grad[k][0] += c * e.grads[i][0];
                out.grad[k][1] += c * e.grads[i][1];
            }
        }
        out
    }

    /// Element-wise L2 projection of a function returning one value per component.
    pub fn project(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> Vec<f64> {
        self.project_with_order(f, 2 * self.degree + 2)
    }

    pub fn project_with_order(&self, f: impl Fn([f64; 2]) -> [f64; 2], order: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_dofs()];
        let nm = self.n_modes();
        let mut v = vec![0.0; nm];
        for c in 0..self.mesh.n_cells() {
            let rule = self.element_quadrature(c, order);
            for (x, w) in rule.iter() {
                self.bases[c].values(x, &mut v);
                let fx = f(x);
                for k in 0..self.components {
                    let base = self.dof(c, k, 0);
                    for i in 0..nm {
                        out[base + i] += w * fx[k] * v[i];
                    }
                }
            }
        }
        out
    }

    pub fn project_scalar(&self, f: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
        self.project(|x| [f(x), 0.0])
    }
}

/// Field value at a point: `value[k]` and `grad[k]` for component `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointValue {
    pub value: [f64; 2],
    pub grad: [[f64; 2]; 2],
}

impl PointValue {
    pub fn div(&self) -> f64 {
        self.grad[0][0] + self.grad[1][1]
    }

    /// Symmetric gradient `[e_xx, e_xy, e_yy]` of a vector field.
    pub fn strain(&self) -> [f64; 3] {
        [self.grad[0][0], 0.5 * (self.grad[0][1] + self.grad[1][0]), self.grad[1][1]]
    }
}

/// Centroid-fan rule on a mesh cell.
pub fn element_rule(mesh: &PolyMesh, cell: usize, order: usize) -> QuadratureRule {
    quadrature::polygon_rule(&mesh.cell_polygon(cell), mesh.centroid(cell), order)
}

/// Gauss rule on a mesh face.
pub fn face_rule(mesh: &PolyMesh, face: usize, order: usize) -> QuadratureRule {
    let (a, b) = mesh.face_endpoints(face);
    quadrature::segment_rule(a, b, order)
}
