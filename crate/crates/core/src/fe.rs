//! Lagrange finite element spaces on the background mesh.

use std::sync::Arc;

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::mesh::{TetMesh, Vec3, LOCAL_EDGES};

/// Maximum number of local basis functions (P2 on a tetrahedron).
pub const MAX_LOCAL: usize = 10;

/// Continuous piecewise polynomial space `V_{h,m}` of degree 1 or 2.
///
/// Dofs are numbered vertices first (mesh order), then edges in sorted
/// endpoint order. Local dof order on a tetrahedron is the four vertices
/// followed by the edges in [`LOCAL_EDGES`] order.
#[derive(Debug, Clone)]
pub struct FeSpace {
    mesh: Arc<TetMesh>,
    degree: usize,
    edges: Vec<(usize, usize)>,
    tet_dofs: Vec<usize>,
    n_local: usize,
}

impl FeSpace {
    pub fn new(mesh: Arc<TetMesh>, degree: usize) -> Result<Self> {
        let n_local = match degree {
            1 => 4,
            2 => 10,
            _ => return Err(Error::InvalidInput(format!("element degree {degree} not supported (1 or 2)"))),
        };
        let nv = mesh.n_vertices();
        let edges = if degree == 2 { mesh.edges() } else { Vec::new() };
        let mut tet_dofs = Vec::with_capacity(n_local * mesh.n_tets());
        for tet in mesh.tets() {
            tet_dofs.extend_from_slice(tet);
            if degree == 2 {
                for &(a, b) in &LOCAL_EDGES {
                    let key = crate::mesh::sorted_pair(tet[a], tet[b]);
                    let idx = edges
                        .binary_search(&key)
                        .map_err(|_| Error::Consistency(format!("edge {key:?} missing from edge list")))?;
                    tet_dofs.push(nv + idx);
                }
            }
        }
        Ok(Self {
            mesh,
            degree,
            edges,
            tet_dofs,
            n_local,
        })
    }

    pub fn mesh(&self) -> &Arc<TetMesh> {
        &self.mesh
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_dofs(&self) -> usize {
        self.mesh.n_vertices() + self.edges.len()
    }

    /// Number of dofs per tetrahedron, `(m+1)(m+2)(m+3)/6`.
    pub fn n_local(&self) -> usize {
        self.n_local
    }

    pub fn tet_dofs(&self, t: usize) -> &[usize] {
        &self.tet_dofs[t * self.n_local..(t + 1) * self.n_local]
    }

    pub fn dof_coordinate(&self, dof: usize) -> Vec3 {
        let nv = self.mesh.n_vertices();
        if dof < nv {
            *self.mesh.vertex(dof)
        } else {
            let (a, b) = self.edges[dof - nv];
            (self.mesh.vertex(a) + self.mesh.vertex(b)) * 0.5
        }
    }

    /// Reference barycentric coordinates of local node `i`.
    pub fn local_node(&self, i: usize) -> [f64; 4] {
        let mut b = [0.0; 4];
        if i < 4 {
            b[i] = 1.0;
        } else {
            let (p, q) = LOCAL_EDGES[i - 4];
            b[p] = 0.5;
            b[q] = 0.5;
        }
        b
    }

    pub fn geometry(&self, t: usize) -> Result<TetGeometry> {
        TetGeometry::new(&self.mesh, t)
    }

    /// Values and physical gradients of the local shape functions at barycentric point `lambda`.
    ///
    /// Points outside the reference element are allowed; the local polynomial
    /// is then evaluated by its natural extension.
    pub fn eval_basis(&self, geo: &TetGeometry, lambda: &[f64; 4]) -> LocalBasis {
        let mut out = LocalBasis {
            n: self.n_local,
            values: [0.0; MAX_LOCAL],
            grads: [Vec3::zeros(); MAX_LOCAL],
        };
        let g = &geo.grad_lambda;
        match self.degree {
            1 => {
                for i in 0..4 {
                    out.values[i] = lambda[i];
                    out.grads[i] = g[i];
                }
            }
            _ => {
                for i in 0..4 {
                    out.values[i] = lambda[i] * (2.0 * lambda[i] - 1.0);
                    out.grads[i] = g[i] * (4.0 * lambda[i] - 1.0);
                }
                for (e, &(i, j)) in LOCAL_EDGES.iter().enumerate() {
                    out.values[4 + e] = 4.0 * lambda[i] * lambda[j];
                    out.grads[4 + e] = (g[j] * lambda[i] + g[i] * lambda[j]) * 4.0;
                }
            }
        }
        out
    }

    /// Physical Hessians of the local shape functions (constant per element).
    pub fn basis_hessians(&self, geo: &TetGeometry) -> [Matrix3<f64>; MAX_LOCAL] {
        let mut out = [Matrix3::zeros(); MAX_LOCAL];
        if self.degree == 2 {
            let g = &geo.grad_lambda;
            for i in 0..4 {
                out[i] = g[i] * g[i].transpose() * 4.0;
            }
            for (e, &(i, j)) in LOCAL_EDGES.iter().enumerate() {
                out[4 + e] = (g[i] * g[j].transpose() + g[j] * g[i].transpose()) * 4.0;
            }
        }
        out
    }

    /// Evaluates the finite element function with global coefficients `coeffs` on tetrahedron `t`.
    pub fn eval_function(&self, t: usize, geo: &TetGeometry, coeffs: &[f64], lambda: &[f64; 4]) -> (f64, Vec3) {
        let basis = self.eval_basis(geo, lambda);
        let mut v = 0.0;
        let mut g = Vec3::zeros();
        for (i, &dof) in self.tet_dofs(t).iter().enumerate() {
            v += coeffs[dof] * basis.values[i];
            g += basis.grads[i] * coeffs[dof];
        }
        (v, g)
    }
}

/// Local shape function values and gradients at one point.
#[derive(Debug, Clone, Copy)]
pub struct LocalBasis {
    pub n: usize,
    pub values: [f64; MAX_LOCAL],
    pub grads: [Vec3; MAX_LOCAL],
}

/// Affine element data: vertex coordinates, barycentric gradients, Jacobian.
#[derive(Debug, Clone, Copy)]
pub struct TetGeometry {
    pub vertices: [Vec3; 4],
    pub grad_lambda: [Vec3; 4],
    /// `J^{-1}` of the map from reference to physical coordinates.
    pub inverse_jacobian: Matrix3<f64>,
    /// `det J` (six times the volume).
    pub det: f64,
}

impl TetGeometry {
    pub fn new(mesh: &TetMesh, t: usize) -> Result<Self> {
        Self::from_vertices(mesh.tet_vertices(t)).ok_or(Error::DegenerateElement { tet: t })
    }

    pub fn from_vertices(vertices: [Vec3; 4]) -> Option<Self> {
        let jac = Matrix3::from_columns(&[
            vertices[1] - vertices[0],
            vertices[2] - vertices[0],
            vertices[3] - vertices[0],
        ]);
        let det = jac.determinant();
        let scale = (vertices[1] - vertices[0]).norm().powi(3);
        if !(det.abs() > 1e-14 * scale) {
            return None;
        }
        let inv = jac.try_inverse()?;
        let g1 = inv.row(0).transpose();
        let g2 = inv.row(1).transpose();
        let g3 = inv.row(2).transpose();
        Some(Self {
            vertices,
            grad_lambda: [-(g1 + g2 + g3), g1, g2, g3],
            inverse_jacobian: inv,
            det,
        })
    }

    pub fn volume(&self) -> f64 {
        self.det.abs() / 6.0
    }

    pub fn point(&self, lambda: &[f64; 4]) -> Vec3 {
        self.vertices[0] * lambda[0]
            + self.vertices[1] * lambda[1]
            + self.vertices[2] * lambda[2]
            + self.vertices[3] * lambda[3]
    }

    pub fn barycentric(&self, x: &Vec3) -> [f64; 4] {
        let r = self.inverse_jacobian * (x - self.vertices[0]);
        [1.0 - r.x - r.y - r.z, r.x, r.y, r.z]
    }
}

/// Nodal interpolant: the coefficient of every dof is `f` at its coordinate.
pub fn nodal_interpolate(space: &FeSpace, f: impl Fn(&Vec3) -> f64) -> Result<Vec<f64>> {
    (0..space.n_dofs())
        .map(|dof| {
            let x = space.dof_coordinate(dof);
            let v = f(&x);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite(format!("interpolated field at {:?}", x.as_slice())))
            }
        })
        .collect()
}

/// Active degrees of freedom: those supported on at least one active tetrahedron.
#[derive(Debug, Clone)]
pub struct ActiveDofMap {
    pub dofs: Vec<usize>,
    global_to_active: Vec<usize>,
}

impl ActiveDofMap {
    pub fn new(space: &FeSpace, active_tets: &[usize]) -> Self {
        let mut flag = vec![false; space.n_dofs()];
        for &t in active_tets {
            for &d in space.tet_dofs(t) {
                flag[d] = true;
            }
        }
        let mut global_to_active = vec![usize::MAX; space.n_dofs()];
        let mut dofs = Vec::new();
        for (d, &on) in flag.iter().enumerate() {
            if on {
                global_to_active[d] = dofs.len();
                dofs.push(d);
            }
        }
        Self { dofs, global_to_active }
    }

    pub fn len(&self) -> usize {
        self.dofs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dofs.is_empty()
    }

    pub fn active_index(&self, global: usize) -> Option<usize> {
        match self.global_to_active.get(global) {
            Some(&i) if i != usize::MAX => Some(i),
            _ => None,
        }
    }

    /// Scatters an active-dof vector into a global coefficient vector (zeros elsewhere).
    pub fn to_global(&self, active: &[f64], n_global: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_global];
        for (i, &d) in self.dofs.iter().enumerate() {
            out[d] = active[i];
        }
        out
    }

    pub fn to_active(&self, global: &[f64]) -> Vec<f64> {
        self.dofs.iter().map(|&d| global[d]).collect()
    }
}
