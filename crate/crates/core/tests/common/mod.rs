//! Brute-force reference computations shared by the integration tests.
//!
//! Nothing here calls library quadrature, basis or cut code: Gauss–Legendre
//! nodes come from Newton's method on Legendre polynomials, simplices are
//! integrated through collapsed (Duffy) coordinates, cut polygons are built
//! from edge sign changes and Lagrange bases are obtained by inverting a
//! monomial Vandermonde matrix.

#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracefem::assembly::*;
use tracefem::fe::{nodal_interpolate, FeSpace};
use tracefem::mesh::{build_box_mesh, BoxDomain, TetMesh, Vec3};
use tracefem::problem::ProblemSpec;
use tracefem::surface::AnalyticSurface;

/// Gauss–Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            ((1.0 + x) / 2.0, w / 2.0)
        })
        .collect()
}

/// `∫_triangle f` through `x = a + s(b - a) + st(c - b)`.
pub fn integrate_triangle(tri: [Vec3; 3], n: usize, mut f: impl FnMut(Vec3) -> f64) -> f64 {
    let gl = gauss_legendre(n);
    let [a, b, c] = tri;
    let area2 = (b - a).cross(&(c - a)).norm();
    let mut sum = 0.0;
    for &(s, ws) in &gl {
        for &(t, wt) in &gl {
            let x = a + (b - a) * s + (c - b) * (s * t);
            sum += ws * wt * s * area2 * f(x);
        }
    }
    sum
}

/// `∫_tet f` through nested collapsed coordinates.
pub fn integrate_tet(v: [Vec3; 4], n: usize, mut f: impl FnMut(Vec3) -> f64) -> f64 {
    let gl = gauss_legendre(n);
    let vol6 = (v[1] - v[0]).dot(&(v[2] - v[0]).cross(&(v[3] - v[0]))).abs();
    let mut sum = 0.0;
    for &(r, wr) in &gl {
        for &(s, ws) in &gl {
            for &(t, wt) in &gl {
                let x = v[0] + (v[1] - v[0]) * r + (v[2] - v[1]) * (r * s) + (v[3] - v[2]) * (r * s * t);
                sum += wr * ws * wt * r * r * s * vol6 * f(x);
            }
        }
    }
    sum
}

/// Zero level of the linear interpolant of vertex values `phi`, fan-triangulated.
pub fn cut_polygon(v: &[Vec3; 4], phi: &[f64; 4]) -> Vec<[Vec3; 3]> {
    let mut pts = Vec::new();
    for i in 0..4 {
        for j in i + 1..4 {
            if (phi[i] < 0.0) != (phi[j] < 0.0) {
                let s = phi[i] / (phi[i] - phi[j]);
                pts.push(v[i] + (v[j] - v[i]) * s);
            }
        }
    }
    if pts.len() < 3 {
        return Vec::new();
    }
    let c = pts.iter().fold(Vec3::zeros(), |a, p| a + p) / pts.len() as f64;
    let normal = (pts[1] - pts[0]).cross(&(pts[2] - pts[0])).normalize();
    let e1 = (pts[0] - c).normalize();
    let e2 = normal.cross(&e1);
    pts.sort_by(|p, q| {
        let ang = |x: &Vec3| (x - c).dot(&e2).atan2((x - c).dot(&e1));
        ang(p).total_cmp(&ang(q))
    });
    (1..pts.len() - 1).map(|i| [pts[0], pts[i], pts[i + 1]]).collect()
}

/// Lagrange basis of degree 1 or 2 on a tetrahedron, nodes given in physical coordinates.
pub struct LagrangeTet {
    degree: usize,
    coeffs: DMatrix<f64>,
}

fn monomials(degree: usize, x: &Vec3) -> (Vec<f64>, Vec<Vec3>) {
    let (a, b, c) = (x.x, x.y, x.z);
    if degree == 1 {
        return (
            vec![1.0, a, b, c],
            vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()],
        );
    }
    (
        vec![1.0, a, b, c, a * a, b * b, c * c, a * b, b * c, a * c],
        vec![
            Vec3::zeros(),
            Vec3::x(),
            Vec3::y(),
            Vec3::z(),
            Vec3::new(2.0 * a, 0.0, 0.0),
            Vec3::new(0.0, 2.0 * b, 0.0),
            Vec3::new(0.0, 0.0, 2.0 * c),
            Vec3::new(b, a, 0.0),
            Vec3::new(0.0, c, b),
            Vec3::new(c, 0.0, a),
        ],
    )
}

impl LagrangeTet {
    pub fn new(degree: usize, nodes: &[Vec3]) -> Self {
        let n = nodes.len();
        let mut vander = DMatrix::zeros(n, n);
        for (i, x) in nodes.iter().enumerate() {
            for (j, m) in monomials(degree, x).0.into_iter().enumerate() {
                vander[(i, j)] = m;
            }
        }
        // Column i of the inverse holds the monomial coefficients of basis i.
        let coeffs = vander.try_inverse().expect("unisolvent nodes");
        Self { degree, coeffs }
    }

    pub fn len(&self) -> usize {
        self.coeffs.ncols()
    }

    pub fn eval(&self, x: &Vec3) -> (Vec<f64>, Vec<Vec3>) {
        let (m, g) = monomials(self.degree, x);
        let n = self.len();
        let mut values = vec![0.0; n];
        let mut grads = vec![Vec3::zeros(); n];
        for i in 0..n {
            for j in 0..n {
                values[i] += self.coeffs[(j, i)] * m[j];
                grads[i] += g[j] * self.coeffs[(j, i)];
            }
        }
        (values, grads)
    }
}

/// Basis on tetrahedron `t` in the library's local node order.
pub fn tet_basis(space: &FeSpace, t: usize) -> LagrangeTet {
    let v = space.mesh().tet_vertices(t);
    let nodes: Vec<Vec3> = (0..space.n_local())
        .map(|i| {
            let b = space.local_node(i);
            v[0] * b[0] + v[1] * b[1] + v[2] * b[2] + v[3] * b[3]
        })
        .collect();
    LagrangeTet::new(space.degree(), &nodes)
}

fn outer(n: usize, f: impl Fn(usize, usize) -> f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, f)
}

/// Brute-force element matrices on one planar cut tetrahedron.
pub struct SingleTetOracle {
    pub disc: Discretization,
    pub problem: ProblemSpec,
    pub active: usize,
    pub normal: Vec3,
}

/// Unit cube split into six tetrahedra, cut by a tilted plane.
pub fn planar_setup(m: usize) -> SingleTetOracle {
    let normal = Vec3::new(1.0, 0.3, -0.2).normalize();
    let offset = normal.dot(&Vec3::new(0.5, 0.5, 0.5)) + 0.05;
    let problem =
        tracefem::problem::planar_problem([normal.x, normal.y, normal.z], offset, Vec3::new(0.4, -1.0, 0.7), 0.3)
            .unwrap();
    let mesh = Arc::new(build_box_mesh(BoxDomain::cube(0.0, 1.0), 1).unwrap());
    let disc = Discretization::new(&problem.surface, mesh, m, 1).unwrap();
    SingleTetOracle {
        disc,
        problem,
        active: 0,
        normal,
    }
}

impl SingleTetOracle {
    fn tet(&self, active: usize) -> usize {
        self.disc.cut.active_tets()[active]
    }

    fn polygon(&self, t: usize) -> Vec<[Vec3; 3]> {
        let v = self.disc.mesh().tet_vertices(t);
        let phi = v.map(|x| self.problem.surface.phi(&x));
        cut_polygon(&v, &phi)
    }

    /// `∫_Γ ∇_Γφ_i·∇_Γφ_j + φ_iφ_j` and `∫_Γ f φ_i`.
    pub fn lb(&self, active: usize) -> (DMatrix<f64>, DVector<f64>) {
        let t = self.tet(active);
        let basis = tet_basis(&self.disc.space, t);
        let n = basis.len();
        let p = nalgebra::Matrix3::identity() - self.normal * self.normal.transpose();
        let mut a = DMatrix::zeros(n, n);
        let mut rhs = DVector::zeros(n);
        for tri in self.polygon(t) {
            for i in 0..n {
                for j in 0..n {
                    a[(i, j)] += integrate_triangle(tri, 8, |x| {
                        let (v, g) = basis.eval(&x);
                        (p * g[i]).dot(&(p * g[j])) + v[i] * v[j]
                    });
                }
                rhs[i] += integrate_triangle(tri, 8, |x| self.problem.forcing(&x) * basis.eval(&x).0[i]);
            }
        }
        (a, rhs)
    }

    pub fn stabilization(&self, kind: StabKind, rho: f64, active: usize) -> DMatrix<f64> {
        let t = self.tet(active);
        let basis = tet_basis(&self.disc.space, t);
        let n = basis.len();
        let nrm = self.normal;
        match kind {
            StabKind::FullGradSurface => self.polygon(t).into_iter().fold(DMatrix::zeros(n, n), |acc, tri| {
                acc + outer(n, |i, j| {
                    rho * integrate_triangle(tri, 8, |x| {
                        let g = basis.eval(&x).1;
                        nrm.dot(&g[i]) * nrm.dot(&g[j])
                    })
                })
            }),
            StabKind::FullGradVolume | StabKind::NormalVolume => {
                let v = self.disc.mesh().tet_vertices(t);
                outer(n, |i, j| {
                    rho * integrate_tet(v, 6, |x| {
                        let g = basis.eval(&x).1;
                        if kind == StabKind::FullGradVolume {
                            g[i].dot(&g[j])
                        } else {
                            nrm.dot(&g[i]) * nrm.dot(&g[j])
                        }
                    })
                })
            }
            _ => DMatrix::zeros(n, n),
        }
    }

    /// Ghost penalty on face `face`, keyed by pairs of active dof indices.
    pub fn ghost(&self, face: usize, rho: f64) -> HashMap<(usize, usize), f64> {
        let mesh = self.disc.mesh();
        let f = &mesh.faces().faces[face];
        let [t1, t2] = f.tets;
        let (b1, b2) = (tet_basis(&self.disc.space, t1), tet_basis(&self.disc.space, t2));
        let d1: Vec<usize> = self.disc.local_dofs(t1);
        let d2: Vec<usize> = self.disc.local_dofs(t2);
        let v = f.vertices.map(|i| *mesh.vertex(i));
        let nf = (v[1] - v[0]).cross(&(v[2] - v[0])).normalize();
        let jump = |x: &Vec3| {
            let mut j: HashMap<usize, f64> = HashMap::new();
            for (k, g) in b1.eval(x).1.iter().enumerate() {
                *j.entry(d1[k]).or_default() += g.dot(&nf);
            }
            for (k, g) in b2.eval(x).1.iter().enumerate() {
                *j.entry(d2[k]).or_default() -= g.dot(&nf);
            }
            j
        };
        let dofs: Vec<usize> = jump(&v[0]).keys().copied().collect();
        let mut out = HashMap::new();
        for &a in &dofs {
            for &b in &dofs {
                let val = rho * integrate_triangle(v, 6, |x| {
                    let j = jump(&x);
                    j[&a] * j[&b]
                });
                out.insert((a, b), val);
            }
        }
        out
    }
}

pub fn block_matrix(blk: &LocalBlock) -> DMatrix<f64> {
    let n = blk.dofs.len();
    DMatrix::from_row_slice(n, n, &blk.matrix)
}

/// Ratio `‖v‖²_{Γ_T} / (h_T⁻¹‖v‖²_T + h_T‖∇v‖²_T)` for a P1 function `v` with
/// vertex values `vals` on a tetrahedron cut by the linear interpolant of `phi`.
pub fn trace_ratio(v: &[Vec3; 4], phi: &[f64; 4], vals: &[f64; 4]) -> Option<f64> {
    let polygon = cut_polygon(v, phi);
    if polygon.is_empty() {
        return None;
    }
    let mut m = Matrix4::zeros();
    for i in 0..4 {
        m[(0, i)] = 1.0;
        for d in 0..3 {
            m[(d + 1, i)] = v[i][d];
        }
    }
    let inv = m.try_inverse()?;
    let lam = |x: &Vec3| inv * Vector4::new(1.0, x.x, x.y, x.z);
    let value = |x: &Vec3| {
        let l = lam(x);
        (0..4).map(|i| l[i] * vals[i]).sum::<f64>()
    };
    let surface: f64 = polygon.iter().map(|tri| integrate_triangle(*tri, 4, |x| value(&x).powi(2))).sum();
    let volume = (v[1] - v[0]).dot(&(v[2] - v[0]).cross(&(v[3] - v[0]))).abs() / 6.0;
    let sum: f64 = vals.iter().sum();
    let l2 = volume / 20.0 * (vals.iter().map(|x| x * x).sum::<f64>() + sum * sum);
    let grad: Vec3 = (0..4).map(|i| Vec3::new(inv[(i, 1)], inv[(i, 2)], inv[(i, 3)]) * vals[i]).sum();
    let h = (0..4)
        .flat_map(|i| (i + 1..4).map(move |j| (i, j)))
        .map(|(i, j)| (v[i] - v[j]).norm())
        .fold(0.0, f64::max);
    Some(surface / (l2 / h + h * volume * grad.norm_squared()))
}

/// Random cut tetrahedra from background meshes of randomly placed spheres.
pub fn trace_trials(count: usize, seed: u64) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let meshes: Vec<TetMesh> = [3, 4, 6, 8]
        .iter()
        .map(|&n| build_box_mesh(BoxDomain::cube(-4.0 / 3.0, 4.0 / 3.0), n).unwrap())
        .collect();
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < count {
        let mesh = &meshes[rng.gen_range(0..meshes.len())];
        let center = Vec3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2));
        let surface = AnalyticSurface::sphere(rng.gen_range(0.4..1.1)).shifted(center);
        let t = rng.gen_range(0..mesh.n_tets());
        let v = mesh.tet_vertices(t);
        let phi = v.map(|x| surface.phi(&x));
        let vals = [0; 4].map(|_| rng.gen_range(-1.0..1.0));
        if let Some(r) = trace_ratio(&v, &phi, &vals) {
            worst = worst.max(r);
            done += 1;
        }
    }
    (done, worst)
}

/// `min_v [a_h + s_h](v, v) / (h⁻¹ ‖v‖²_{band})` over `samples` random vectors:
/// `(smooth fields, i.i.d. coefficients)`.
pub fn coercivity_probe(disc: &Discretization, problem: &ProblemSpec, samples: usize, seed: u64) -> (f64, f64) {
    let a = assemble_system(disc, problem, StabKind::NormalVolume, 1.0).unwrap().matrix;
    let band = assemble_band_mass(disc).unwrap();
    let h = disc.h();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let quotient = |v: &[f64]| a.quadratic_form(v) / (band.quadratic_form(v) / h);
    let (mut smooth, mut iid) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..samples {
        let c: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let field = |x: &Vec3| {
            c[0] + c[1] * x.x + c[2] * x.y + c[3] * x.z + c[4] * x.x * x.y + c[5] * x.y * x.z + c[6] * x.z * x.x
                + c[7] * x.x * x.x
                + c[8] * x.y * x.y
                + c[9] * x.z * x.z
        };
        let v = disc.dofs.to_active(&nodal_interpolate(&disc.space, field).unwrap());
        smooth = smooth.min(quotient(&v));
        let w: Vec<f64> = (0..disc.n_active_dofs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        iid = iid.min(quotient(&w));
    }
    (smooth, iid)
}

/// Sphere discretization on the default box.
pub fn sphere_disc(n: usize, m: usize, k: usize) -> (Discretization, ProblemSpec) {
    let problem = tracefem::problem::sphere_harmonic_problem(1.0).unwrap();
    let mesh = Arc::new(build_box_mesh(BoxDomain::cube(-4.0 / 3.0, 4.0 / 3.0), n).unwrap());
    (Discretization::new(&problem.surface, mesh, m, k).unwrap(), problem)
}

/// Dense LU solution of the system, as a reference for the iterative solvers.
pub fn dense_solve(a: &tracefem::sparse::CsrMatrix, b: &[f64]) -> Vec<f64> {
    let lu = a.to_dense().lu();
    lu.solve(&DVector::from_column_slice(b)).expect("nonsingular").as_slice().to_vec()
}
