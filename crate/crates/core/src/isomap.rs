//! Isoparametric geometry map `Θ_h` lifting `Γ^lin` to a higher order surface.
//!
//! For every finite element node `x` of an active tetrahedron `T` the map
//! first moves `x` along `G_h = ∇φ_h` until the polynomial `φ_h|_T` attains
//! the value of `φ_h^lin(x)`. Nodal values from different tetrahedra are then
//! averaged, which yields a continuous map in `[V_{h,k}]^3`. For `k = 1` the
//! two level sets coincide and the map is the identity.

use std::sync::Arc;

use nalgebra::Matrix3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fe::{FeSpace, TetGeometry};
use crate::levelset::{CutTopology, DiscreteLevelSet};
use crate::mesh::Vec3;
use crate::quadrature::{get_rule, Domain};

/// Admissible range of `det DΘ_h`.
pub const DET_RANGE: (f64, f64) = (0.5, 2.0);

/// Samples per side when bracketing the root of the line search.
const SCAN_STEPS: usize = 16;

/// Signed step `d_h` with `φ_h|_T(x + d_h G_h(x)) = φ_h^lin(x)` and `|d_h| ≤ h_T`.
///
/// `lambda` are the barycentric coordinates of `x` in tetrahedron `t`. Among
/// all roots in `[-h_T, h_T]` the one with the smallest modulus is returned.
pub fn compute_dh(phi_h: &DiscreteLevelSet, t: usize, geo: &TetGeometry, lambda: &[f64; 4]) -> Result<f64> {
    let (_, g) = phi_h.eval(t, geo, lambda);
    if !(g.norm() >= 1e-8) {
        return Err(Error::SearchFailed { tet: t, delta: 0.0 });
    }
    let x = geo.point(lambda);
    let target = phi_h.eval_lin(t, lambda);
    let delta = phi_h.mesh().diameter(t);
    line_search(phi_h, t, geo, &x, &g, target, delta)
}

fn line_search(
    phi_h: &DiscreteLevelSet,
    t: usize,
    geo: &TetGeometry,
    x: &Vec3,
    g: &Vec3,
    target: f64,
    delta: f64,
) -> Result<f64> {
    let tol = 1e-12 * phi_h.max_abs().max(f64::MIN_POSITIVE);
    let eval = |d: f64| -> (f64, f64) {
        let y = x + g * d;
        let (v, grad) = phi_h.eval(t, geo, &geo.barycentric(&y));
        (v - target, grad.dot(g))
    };
    let f0 = eval(0.0).0;
    if f0.abs() <= tol {
        return Ok(0.0);
    }
    let step = delta / SCAN_STEPS as f64;
    for j in 1..=SCAN_STEPS {
        let mut found: Option<f64> = None;
        for s in [1.0, -1.0] {
            let a = s * (j - 1) as f64 * step;
            let b = s * j as f64 * step;
            let fa = eval(a).0;
            let fb = eval(b).0;
            if fa.abs() <= tol {
                found = pick(found, a);
                continue;
            }
            if fa.signum() != fb.signum() || fb.abs() <= tol {
                let root = refine_root(&eval, a, b, fa, tol, delta);
                found = pick(found, root);
            }
        }
        if let Some(d) = found {
            return Ok(d);
        }
    }
    Err(Error::SearchFailed { tet: t, delta })
}

fn pick(current: Option<f64>, candidate: f64) -> Option<f64> {
    match current {
        Some(c) if c.abs() <= candidate.abs() => Some(c),
        _ => Some(candidate),
    }
}

/// Bisection down to `1e-3 δ`, then safeguarded Newton.
fn refine_root(eval: &impl Fn(f64) -> (f64, f64), a: f64, b: f64, fa: f64, tol: f64, delta: f64) -> f64 {
    let (mut lo, mut hi, mut flo) = (a, b, fa);
    while (hi - lo).abs() > 1e-3 * delta {
        let mid = 0.5 * (lo + hi);
        let fm = eval(mid).0;
        if fm.abs() <= tol {
            return mid;
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    let mut d = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (f, df) = eval(d);
        if f.abs() <= tol {
            return d;
        }
        if f.signum() == flo.signum() {
            lo = d;
            flo = f;
        } else {
            hi = d;
        }
        let newton = d - f / df;
        let inside = newton.is_finite() && (newton - lo) * (newton - hi) < 0.0;
        let next = if inside { newton } else { 0.5 * (lo + hi) };
        if next == d || (hi - lo).abs() <= 4.0 * f64::EPSILON * delta {
            return next;
        }
        d = next;
    }
    d
}

/// Continuous piecewise polynomial map `Θ_h = x + Σ_i D_i φ_i(x)`.
///
/// The displacement `D_i` is nonzero only at nodes of active tetrahedra.
#[derive(Debug, Clone)]
pub struct IsoMap {
    space: Arc<FeSpace>,
    displacement: Vec<Vec3>,
    multiplicity: Vec<u32>,
    identity: bool,
}

/// Value and Jacobian of `Θ_h` at one point.
#[derive(Debug, Clone, Copy)]
pub struct MapPoint {
    pub x: Vec3,
    pub jacobian: Matrix3<f64>,
}

impl IsoMap {
    /// The identity map on the given space.
    pub fn identity(space: Arc<FeSpace>) -> Self {
        let n = space.n_dofs();
        Self {
            space,
            displacement: vec![Vec3::zeros(); n],
            multiplicity: vec![0; n],
            identity: true,
        }
    }

    pub fn degree(&self) -> usize {
        self.space.degree()
    }

    pub fn space(&self) -> &Arc<FeSpace> {
        &self.space
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    pub fn displacement(&self, dof: usize) -> Vec3 {
        self.displacement[dof]
    }

    /// Number of active tetrahedra that contributed to the nodal average.
    pub fn multiplicity(&self, dof: usize) -> u32 {
        self.multiplicity[dof]
    }

    /// Largest nodal displacement.
    pub fn max_displacement(&self) -> f64 {
        self.displacement.iter().fold(0.0, |m, d| m.max(d.norm()))
    }

    pub fn eval(&self, t: usize, geo: &TetGeometry, lambda: &[f64; 4]) -> MapPoint {
        let x = geo.point(lambda);
        if self.identity {
            return MapPoint {
                x,
                jacobian: Matrix3::identity(),
            };
        }
        let basis = self.space.eval_basis(geo, lambda);
        let mut y = x;
        let mut jac = Matrix3::identity();
        for (i, &dof) in self.space.tet_dofs(t).iter().enumerate() {
            let d = self.displacement[dof];
            y += d * basis.values[i];
            jac += d * basis.grads[i].transpose();
        }
        MapPoint { x: y, jacobian: jac }
    }
}

/// Builds `Θ_h` on the active tetrahedra of `cut`.
///
/// Fails with [`Error::MeshTooCoarse`] when `det DΘ_h` leaves [`DET_RANGE`]
/// at a volume quadrature point.
pub fn build_isomap(phi_h: &DiscreteLevelSet, cut: &CutTopology) -> Result<IsoMap> {
    let space = phi_h.space().clone();
    if phi_h.degree() == 1 {
        return Ok(IsoMap::identity(space));
    }
    let n_local = space.n_local();
    let local: Vec<Vec<Vec3>> = cut
        .active_tets()
        .par_iter()
        .map(|&t| {
            let geo = space.geometry(t)?;
            (0..n_local)
                .map(|i| {
                    let lambda = space.local_node(i);
                    let d = compute_dh(phi_h, t, &geo, &lambda)?;
                    let (_, g) = phi_h.eval(t, &geo, &lambda);
                    Ok(g * d)
                })
                .collect::<Result<Vec<Vec3>>>()
        })
        .collect::<Result<_>>()?;

    let n = space.n_dofs();
    let mut sum = vec![Vec3::zeros(); n];
    let mut multiplicity = vec![0u32; n];
    for (&t, shifts) in cut.active_tets().iter().zip(&local) {
        for (i, &dof) in space.tet_dofs(t).iter().enumerate() {
            sum[dof] += shifts[i];
            multiplicity[dof] += 1;
        }
    }
    let displacement = sum
        .into_iter()
        .zip(&multiplicity)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { s })
        .collect();
    let map = IsoMap {
        space,
        displacement,
        multiplicity,
        identity: false,
    };
    check_determinant(&map, cut)?;
    Ok(map)
}

fn check_determinant(map: &IsoMap, cut: &CutTopology) -> Result<()> {
    let rule = get_rule(Domain::Tetrahedron, 2 * map.degree())?;
    cut.active_tets().par_iter().try_for_each(|&t| {
        let geo = map.space.geometry(t)?;
        for (lambda, _) in rule.iter() {
            let det = map.eval(t, &geo, lambda).jacobian.determinant();
            if !(DET_RANGE.0..=DET_RANGE.1).contains(&det) {
                return Err(Error::MeshTooCoarse { tet: t, det });
            }
        }
        Ok(())
    })
}

/// One quadrature point of the mapped surface `Γ_h = Θ_h(Γ^lin)`.
#[derive(Debug, Clone, Copy)]
pub struct SurfacePoint {
    /// Index into `cut.triangles()`.
    pub triangle: usize,
    pub tet: usize,
    /// Barycentric coordinates of the preimage in the parent tetrahedron.
    pub lambda: [f64; 4],
    /// Mapped location `Θ_h(x)`.
    pub x: Vec3,
    /// Quadrature weight including the area element `J_Γ`.
    pub weight: f64,
    pub normal: Vec3,
    pub projector: Matrix3<f64>,
    /// `DΘ_h^{-T}`, maps reference gradients to gradients of mapped functions.
    pub grad_transform: Matrix3<f64>,
}

/// Mapped quadrature points on the triangles of the `active`-th active tetrahedron.
pub fn tet_surface_points(
    cut: &CutTopology,
    map: &IsoMap,
    geo: &TetGeometry,
    active: usize,
    degree: usize,
) -> Result<Vec<SurfacePoint>> {
    let rule = get_rule(Domain::Triangle, degree)?;
    let (first, last) = cut.triangle_range(active);
    let mut out = Vec::with_capacity((last - first) * rule.len());
    for ti in first..last {
        let tri = &cut.triangles()[ti];
        for (b, w) in rule.iter() {
            let lambda = geo.barycentric(&tri.point(b));
            let mp = map.eval(tri.tet, geo, &lambda);
            let det = mp.jacobian.determinant();
            let inv_t = mp
                .jacobian
                .try_inverse()
                .filter(|_| det > 0.0 && det.is_finite())
                .ok_or(Error::SingularMap { tet: tri.tet })?
                .transpose();
            let big_n = inv_t * tri.normal;
            let norm = big_n.norm();
            let normal = big_n / norm;
            out.push(SurfacePoint {
                triangle: ti,
                tet: tri.tet,
                lambda,
                x: mp.x,
                weight: 2.0 * w * tri.area * det * norm,
                normal,
                projector: Matrix3::identity() - normal * normal.transpose(),
                grad_transform: inv_t,
            });
        }
    }
    Ok(out)
}

/// Mapped quadrature over all of `Γ_h`, ordered by active tetrahedron.
pub fn mapped_surface_quadrature(cut: &CutTopology, map: &IsoMap, degree: usize) -> Result<Vec<SurfacePoint>> {
    let space = map.space();
    let per_tet: Vec<Vec<SurfacePoint>> = cut
        .active_tets()
        .par_iter()
        .enumerate()
        .map(|(a, &t)| tet_surface_points(cut, map, &space.geometry(t)?, a, degree))
        .collect::<Result<_>>()?;
    Ok(per_tet.into_iter().flatten().collect())
}

/// One quadrature point of a mapped active tetrahedron `Θ_h(T)`.
#[derive(Debug, Clone, Copy)]
pub struct VolumePoint {
    pub lambda: [f64; 4],
    pub x: Vec3,
    pub weight: f64,
    pub grad_transform: Matrix3<f64>,
}

/// Mapped volume quadrature on tetrahedron `t`.
pub fn tet_volume_points(map: &IsoMap, t: usize, geo: &TetGeometry, degree: usize) -> Result<Vec<VolumePoint>> {
    let rule = get_rule(Domain::Tetrahedron, degree)?;
    rule.iter()
        .map(|(lambda, w)| {
            let mp = map.eval(t, geo, lambda);
            let det = mp.jacobian.determinant();
            let inv_t = mp
                .jacobian
                .try_inverse()
                .filter(|_| det > 0.0 && det.is_finite())
                .ok_or(Error::SingularMap { tet: t })?
                .transpose();
            Ok(VolumePoint {
                lambda: *lambda,
                x: mp.x,
                weight: w * geo.det.abs() * det,
                grad_transform: inv_t,
            })
        })
        .collect()
}
