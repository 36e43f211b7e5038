//! Discrete level sets and the piecewise planar surface `Γ^lin`.
//!
//! Vertex values of the level set with `|φ| < 1e-12 h` (`h` the largest
//! element diameter) are snapped to zero and classified as positive. A
//! tetrahedron whose face lies on the zero level therefore enters the active
//! set only from the negative side.
//!
//! Quadrilateral cuts are split along the diagonal that gives the smaller
//! maximum angle.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fe::{nodal_interpolate, FeSpace, TetGeometry};
use crate::mesh::{TetMesh, Vec3};
use crate::quadrature::{get_rule, Domain};
use crate::surface::AnalyticSurface;

/// Relative threshold below which vertex values count as zero.
pub const SNAP_TOLERANCE: f64 = 1e-12;

/// Finite element level set function `φ_h ∈ V_{h,k}`.
#[derive(Debug, Clone)]
pub struct DiscreteLevelSet {
    space: Arc<FeSpace>,
    coeffs: Vec<f64>,
    max_abs: f64,
}

impl DiscreteLevelSet {
    pub fn new(space: Arc<FeSpace>, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != space.n_dofs() {
            return Err(Error::InvalidInput(format!(
                "level set has {} coefficients, space has {} dofs",
                coeffs.len(),
                space.n_dofs()
            )));
        }
        if let Some(i) = coeffs.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("level set coefficient {i}")));
        }
        let max_abs = coeffs.iter().fold(0.0, |m: f64, c| m.max(c.abs()));
        Ok(Self { space, coeffs, max_abs })
    }

    pub fn from_fn(space: Arc<FeSpace>, f: impl Fn(&Vec3) -> f64) -> Result<Self> {
        let coeffs = nodal_interpolate(&space, f)?;
        Self::new(space, coeffs)
    }

    pub fn degree(&self) -> usize {
        self.space.degree()
    }

    pub fn space(&self) -> &Arc<FeSpace> {
        &self.space
    }

    pub fn mesh(&self) -> &Arc<TetMesh> {
        self.space.mesh()
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Value of `φ_h^lin = φ_h` at mesh vertex `v`.
    pub fn vertex_value(&self, v: usize) -> f64 {
        self.coeffs[v]
    }

    pub fn max_abs(&self) -> f64 {
        self.max_abs
    }

    /// `φ_h` and its gradient on tetrahedron `t` (polynomial extension outside `t`).
    pub fn eval(&self, t: usize, geo: &TetGeometry, lambda: &[f64; 4]) -> (f64, Vec3) {
        self.space.eval_function(t, geo, &self.coeffs, lambda)
    }

    /// `φ_h^lin` on tetrahedron `t`.
    pub fn eval_lin(&self, t: usize, lambda: &[f64; 4]) -> f64 {
        let tet = self.mesh().tet(t);
        (0..4).map(|i| lambda[i] * self.coeffs[tet[i]]).sum()
    }

    /// Gradient of `φ_h^lin` on tetrahedron `t`.
    pub fn grad_lin(&self, t: usize, geo: &TetGeometry) -> Vec3 {
        let tet = self.mesh().tet(t);
        (0..4).map(|i| geo.grad_lambda[i] * self.coeffs[tet[i]]).sum()
    }
}

/// Nodal interpolant `I^k φ` of an analytic level set.
pub fn interpolate_levelset(surface: &AnalyticSurface, mesh: Arc<TetMesh>, k: usize) -> Result<DiscreteLevelSet> {
    surface.validate()?;
    let space = Arc::new(FeSpace::new(mesh, k)?);
    DiscreteLevelSet::from_fn(space, |x| surface.phi(x))
}

/// Identifies a vertex of `Γ^lin`: either a mesh vertex on the zero level or
/// the crossing point on a mesh edge (sorted endpoints).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CutPoint {
    Vertex(usize),
    Edge(usize, usize),
}

/// A planar piece of `Γ^lin` inside its parent tetrahedron.
#[derive(Debug, Clone, Copy)]
pub struct SurfaceTriangle {
    pub tet: usize,
    pub vertices: [Vec3; 3],
    pub keys: [CutPoint; 3],
    /// Unit normal aligned with `∇φ_h^lin`; vertices are ordered counter-clockwise around it.
    pub normal: Vec3,
    pub area: f64,
}

impl SurfaceTriangle {
    pub fn point(&self, bary: &[f64; 4]) -> Vec3 {
        self.vertices[0] * bary[0] + self.vertices[1] * bary[1] + self.vertices[2] * bary[2]
    }
}

/// An edge of `Γ^lin` lying on a face between two active tetrahedra, or on the box boundary.
#[derive(Debug, Clone, Copy)]
pub struct SurfaceEdge {
    pub endpoints: [Vec3; 2],
    /// Triangles sharing the edge; the second is `None` on the box boundary.
    pub triangles: [Option<usize>; 2],
}

impl SurfaceEdge {
    pub fn length(&self) -> f64 {
        (self.endpoints[1] - self.endpoints[0]).norm()
    }
}

/// Active set, surface triangles and stabilization faces induced by `φ_h^lin`.
#[derive(Debug, Clone)]
pub struct CutTopology {
    mesh: Arc<TetMesh>,
    active_tets: Vec<usize>,
    tet_to_active: Vec<usize>,
    triangles: Vec<SurfaceTriangle>,
    /// Triangle index range per active tetrahedron.
    tet_triangles: Vec<(usize, usize)>,
    lin_normals: Vec<Vec3>,
    interior_faces: Vec<usize>,
}

impl CutTopology {
    pub fn mesh(&self) -> &Arc<TetMesh> {
        &self.mesh
    }

    /// Sorted active tetrahedra `T_h^Γ`; this is also the band `ω_h^lin`.
    pub fn active_tets(&self) -> &[usize] {
        &self.active_tets
    }

    pub fn n_active(&self) -> usize {
        self.active_tets.len()
    }

    pub fn is_active(&self, t: usize) -> bool {
        self.tet_to_active[t] != usize::MAX
    }

    pub fn active_index(&self, t: usize) -> Option<usize> {
        match self.tet_to_active[t] {
            usize::MAX => None,
            i => Some(i),
        }
    }

    pub fn triangles(&self) -> &[SurfaceTriangle] {
        &self.triangles
    }

    /// Triangles of the `i`-th active tetrahedron.
    pub fn triangles_of(&self, active: usize) -> &[SurfaceTriangle] {
        let (a, b) = self.tet_triangles[active];
        &self.triangles[a..b]
    }

    pub fn triangle_range(&self, active: usize) -> (usize, usize) {
        self.tet_triangles[active]
    }

    /// Unit normal of `Γ^lin` in the `i`-th active tetrahedron.
    pub fn lin_normal(&self, active: usize) -> Vec3 {
        self.lin_normals[active]
    }

    /// Interior mesh faces shared by two active tetrahedra (ghost penalty faces).
    pub fn interior_faces(&self) -> &[usize] {
        &self.interior_faces
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(|t| t.area).sum()
    }

    /// Largest interior angle (degrees) over all triangles.
    pub fn max_angle_degrees(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| max_angle(&t.vertices).to_degrees())
            .fold(0.0, f64::max)
    }

    /// Matches the edges of `Γ^lin` that lie on tetrahedron faces.
    ///
    /// Diagonals splitting a quadrilateral cut are skipped. Unmatched edges
    /// are accepted only on the box boundary.
    pub fn surface_edges(&self) -> Result<Vec<SurfaceEdge>> {
        let mut map: HashMap<(CutPoint, CutPoint), Vec<(usize, usize)>> = HashMap::new();
        for (ti, tri) in self.triangles.iter().enumerate() {
            for e in 0..3 {
                let (a, b) = (tri.keys[e], tri.keys[(e + 1) % 3]);
                let key = if a < b { (a, b) } else { (b, a) };
                map.entry(key).or_default().push((ti, e));
            }
        }
        let mut keys: Vec<_> = map.keys().copied().collect();
        keys.sort_unstable();
        let domain = self.mesh.domain();
        let tol = 1e-10 * self.mesh.max_diameter();
        let mut edges = Vec::new();
        for key in keys {
            let users = &map[&key];
            let (t0, e0) = users[0];
            let tri = &self.triangles[t0];
            let endpoints = [tri.vertices[e0], tri.vertices[(e0 + 1) % 3]];
            match users.len() {
                1 => {
                    if !(domain.on_boundary(&endpoints[0], tol) && domain.on_boundary(&endpoints[1], tol)) {
                        return Err(Error::Topology(format!(
                            "unmatched surface edge {key:?} in tetrahedron {}",
                            tri.tet
                        )));
                    }
                    edges.push(SurfaceEdge {
                        endpoints,
                        triangles: [Some(t0), None],
                    });
                }
                2 => {
                    let t1 = users[1].0;
                    if self.triangles[t1].tet == tri.tet {
                        continue;
                    }
                    edges.push(SurfaceEdge {
                        endpoints,
                        triangles: [Some(t0), Some(t1)],
                    });
                }
                n => {
                    return Err(Error::Topology(format!("surface edge {key:?} shared by {n} triangles")));
                }
            }
        }
        Ok(edges)
    }

    /// Checks that `Γ^lin` is closed up to the box boundary.
    pub fn check_closed(&self) -> Result<()> {
        self.surface_edges().map(|_| ())
    }
}

/// Marching-tetrahedra extraction of the zero level of `φ_h^lin`.
pub fn extract_cut_topology(phi_h: &DiscreteLevelSet) -> Result<CutTopology> {
    let mesh = phi_h.mesh().clone();
    let snap = SNAP_TOLERANCE * mesh.max_diameter();
    let values: Vec<f64> = (0..mesh.n_vertices())
        .map(|v| {
            let p = phi_h.vertex_value(v);
            if p.abs() < snap {
                0.0
            } else {
                p
            }
        })
        .collect();

    let mut candidates = Vec::new();
    for (t, tet) in mesh.tets().iter().enumerate() {
        let neg = tet.iter().filter(|&&v| values[v] < 0.0).count();
        if tet.iter().all(|&v| values[v] == 0.0) {
            return Err(Error::DegenerateCut { tet: t });
        }
        if neg > 0 && neg < 4 {
            candidates.push(t);
        }
    }

    let pieces: Vec<(usize, Vec3, Vec<SurfaceTriangle>)> = candidates
        .par_iter()
        .map(|&t| -> Result<_> {
            let geo = TetGeometry::new(&mesh, t)?;
            let grad = phi_h.grad_lin(t, &geo);
            let normal = grad / grad.norm();
            Ok((t, normal, cut_tet(&mesh, t, &values, normal)))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut active_tets = Vec::new();
    let mut tet_to_active = vec![usize::MAX; mesh.n_tets()];
    let mut triangles = Vec::new();
    let mut tet_triangles = Vec::new();
    let mut lin_normals = Vec::new();
    for (t, normal, tris) in pieces {
        if tris.is_empty() {
            continue;
        }
        tet_to_active[t] = active_tets.len();
        active_tets.push(t);
        lin_normals.push(normal);
        let start = triangles.len();
        triangles.extend(tris);
        tet_triangles.push((start, triangles.len()));
    }
    if triangles.is_empty() {
        return Err(Error::SurfaceNotFound);
    }

    let faces = mesh.faces();
    let mut interior_faces: Vec<usize> = active_tets
        .iter()
        .flat_map(|&t| faces.tet_faces[t].iter().copied())
        .filter(|&f| {
            let face = &faces.faces[f];
            face.is_interior() && tet_to_active[face.tets[0]] != usize::MAX && tet_to_active[face.tets[1]] != usize::MAX
        })
        .collect();
    interior_faces.sort_unstable();
    interior_faces.dedup();

    Ok(CutTopology {
        mesh,
        active_tets,
        tet_to_active,
        triangles,
        tet_triangles,
        lin_normals,
        interior_faces,
    })
}

fn cut_point(mesh: &TetMesh, values: &[f64], neg: usize, pos: usize) -> (CutPoint, Vec3) {
    if values[pos] == 0.0 {
        return (CutPoint::Vertex(pos), *mesh.vertex(pos));
    }
    // Canonical orientation so both tets sharing the edge get identical coordinates.
    let (a, b) = if neg < pos { (neg, pos) } else { (pos, neg) };
    let (fa, fb) = (values[a], values[b]);
    let s = fa / (fa - fb);
    let x = mesh.vertex(a) + (mesh.vertex(b) - mesh.vertex(a)) * s;
    (CutPoint::Edge(a, b), x)
}

fn make_triangle(tet: usize, pts: [(CutPoint, Vec3); 3], normal: Vec3) -> Option<SurfaceTriangle> {
    let keys = pts.map(|p| p.0);
    if keys[0] == keys[1] || keys[1] == keys[2] || keys[0] == keys[2] {
        return None;
    }
    let mut v = pts.map(|p| p.1);
    let mut keys = keys;
    let cross = (v[1] - v[0]).cross(&(v[2] - v[0]));
    let area = 0.5 * cross.norm();
    if area <= 0.0 {
        return None;
    }
    if cross.dot(&normal) < 0.0 {
        v.swap(1, 2);
        keys.swap(1, 2);
    }
    Some(SurfaceTriangle {
        tet,
        vertices: v,
        keys,
        normal,
        area,
    })
}

fn cut_tet(mesh: &TetMesh, t: usize, values: &[f64], normal: Vec3) -> Vec<SurfaceTriangle> {
    let tet = mesh.tet(t);
    let (neg, pos): (Vec<usize>, Vec<usize>) = tet.iter().partition(|&&v| values[v] < 0.0);
    let p = |a: usize, b: usize| cut_point(mesh, values, a, b);
    let mut out = Vec::with_capacity(2);
    match (neg.len(), pos.len()) {
        (1, 3) => {
            let a = neg[0];
            out.extend(make_triangle(t, [p(a, pos[0]), p(a, pos[1]), p(a, pos[2])], normal));
        }
        (3, 1) => {
            let d = pos[0];
            out.extend(make_triangle(t, [p(neg[0], d), p(neg[1], d), p(neg[2], d)], normal));
        }
        (2, 2) => {
            let (a, b, c, d) = (neg[0], neg[1], pos[0], pos[1]);
            let quad = [p(a, c), p(a, d), p(b, d), p(b, c)];
            let split02 = max_angle(&[quad[0].1, quad[1].1, quad[2].1]).max(max_angle(&[quad[0].1, quad[2].1, quad[3].1]));
            let split13 = max_angle(&[quad[0].1, quad[1].1, quad[3].1]).max(max_angle(&[quad[1].1, quad[2].1, quad[3].1]));
            if split02 <= split13 {
                out.extend(make_triangle(t, [quad[0], quad[1], quad[2]], normal));
                out.extend(make_triangle(t, [quad[0], quad[2], quad[3]], normal));
            } else {
                out.extend(make_triangle(t, [quad[0], quad[1], quad[3]], normal));
                out.extend(make_triangle(t, [quad[1], quad[2], quad[3]], normal));
            }
        }
        _ => {}
    }
    out
}

fn max_angle(v: &[Vec3; 3]) -> f64 {
    (0..3)
        .map(|i| {
            let a = v[(i + 1) % 3] - v[i];
            let b = v[(i + 2) % 3] - v[i];
            (a.dot(&b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos()
        })
        .fold(0.0, f64::max)
}

/// Maximum and area-weighted mean of `dist(x, Γ)` over weighted sample points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceStats {
    pub max: f64,
    pub mean: f64,
}

pub fn geometry_distance<'a>(
    points: impl IntoIterator<Item = (&'a Vec3, f64)>,
    surface: &AnalyticSurface,
) -> DistanceStats {
    let mut max: f64 = 0.0;
    let mut sum = 0.0;
    let mut weight = 0.0;
    for (x, w) in points {
        let d = (x - surface.closest_point(x)).norm();
        max = max.max(d);
        sum += w * d;
        weight += w;
    }
    DistanceStats {
        max,
        mean: if weight > 0.0 { sum / weight } else { 0.0 },
    }
}

/// Distance statistics of `Γ^lin` itself, sampled with a triangle rule of `degree`.
pub fn lin_surface_distance(cut: &CutTopology, surface: &AnalyticSurface, degree: usize) -> Result<DistanceStats> {
    let rule = get_rule(Domain::Triangle, degree)?;
    let pts: Vec<(Vec3, f64)> = cut
        .triangles()
        .iter()
        .flat_map(|tri| rule.iter().map(move |(b, w)| (tri.point(b), 2.0 * w * tri.area)))
        .chain(
            cut.triangles()
                .iter()
                .flat_map(|tri| tri.vertices.iter().map(|v| (*v, 0.0))),
        )
        .collect();
    Ok(geometry_distance(pts.iter().map(|(x, w)| (x, *w)), surface))
}

/// Checks that every surface triangle lies inside its parent tetrahedron.
pub fn triangles_inside_parents(cut: &CutTopology) -> bool {
    let mesh = cut.mesh();
    cut.triangles().iter().all(|tri| {
        let geo = match TetGeometry::new(mesh, tri.tet) {
            Ok(g) => g,
            Err(_) => return false,
        };
        tri.vertices.iter().all(|v| {
            geo.barycentric(v)
                .iter()
                .all(|&l| (-1e-12..=1.0 + 1e-12).contains(&l))
        })
    })
}
