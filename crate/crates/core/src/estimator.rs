//! Residual a posteriori indicators, Dörfler marking and the adaptive loop.
//!
//! Indicators are defined on the piecewise planar surface `Γ^lin`, so only
//! linear geometry (`k = 1`) is supported. Per active tetrahedron `T`:
//!
//! - `η_R² = h_T² ‖f + εΔ_Γ u_h − (c + div w) u_h − w·∇_Γ u_h‖²` over `Γ_T`,
//! - `η_E² = Σ_E h_T (‖ε (∇_Γ u⁺·m⁺ + ∇_Γ u⁻·m⁻)‖² + ‖w·(m⁺ + m⁻)‖²)` over the
//!   edges `E` of `Γ_T` shared with triangles of neighboring tetrahedra,
//!
//! where `m±` are the in-plane outward co-normals of the two triangles at `E`.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::Matrix3;
use rayon::prelude::*;

use crate::assembly::{assemble_system, Discretization, StabKind};
use crate::error::{Error, Result};
use crate::fe::TetGeometry;
use crate::levelset::SurfaceTriangle;
use crate::mesh::{bisect_refine, TetMesh, Vec3};
use crate::norms::{surface_errors, ErrorRecord};
use crate::problem::ProblemSpec;
use crate::quadrature::gauss_legendre_unit;
use crate::solver::solve_system;

/// Per active tetrahedron indicators.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorField {
    pub eta_r: Vec<f64>,
    pub eta_e: Vec<f64>,
    /// `(η_R² + η_E²)^{1/2}`.
    pub eta: Vec<f64>,
    /// Root sum of squares of `eta`.
    pub global: f64,
}

impl IndicatorField {
    fn from_squares(r2: Vec<f64>, e2: Vec<f64>) -> Self {
        let eta: Vec<f64> = r2.iter().zip(&e2).map(|(r, e)| (r + e).sqrt()).collect();
        let global = eta.iter().map(|e| e * e).sum::<f64>().sqrt();
        Self {
            eta_r: r2.into_iter().map(f64::sqrt).collect(),
            eta_e: e2.into_iter().map(f64::sqrt).collect(),
            eta,
            global,
        }
    }

    /// Total indicator of the parent tetrahedron of every surface triangle.
    pub fn per_triangle(&self, disc: &Discretization) -> Vec<f64> {
        (0..disc.cut.n_active())
            .flat_map(|a| std::iter::repeat_n(self.eta[a], disc.cut.triangles_of(a).len()))
            .collect()
    }
}

/// Value, full gradient and surface Laplacian `tr(P D²u_h)` of `u_h` at `lambda` in tetrahedron `t`.
fn local_eval(
    disc: &Discretization,
    u: &[f64],
    t: usize,
    geo: &TetGeometry,
    lambda: &[f64; 4],
    projector: &Matrix3<f64>,
) -> (f64, Vec3, f64) {
    let basis = disc.space.eval_basis(geo, lambda);
    let dofs = disc.space.tet_dofs(t);
    let mut v = 0.0;
    let mut g = Vec3::zeros();
    let mut hess = Matrix3::zeros();
    let hessians = (disc.m() > 1).then(|| disc.space.basis_hessians(geo));
    for (i, &dof) in dofs.iter().enumerate() {
        let c = u[disc.dofs.active_index(dof).expect("active dof")];
        v += c * basis.values[i];
        g += basis.grads[i] * c;
        if let Some(h) = &hessians {
            hess += h[i] * c;
        }
    }
    (v, g, (projector * hess).trace())
}

/// In-plane unit co-normal of `tri` at the edge `a→b`, pointing away from the triangle.
fn outward_conormal(tri: &SurfaceTriangle, a: &Vec3, b: &Vec3) -> Vec3 {
    let m = (b - a).cross(&tri.normal).normalize();
    let centroid = (tri.vertices[0] + tri.vertices[1] + tri.vertices[2]) / 3.0;
    if m.dot(&(centroid - a)) > 0.0 {
        -m
    } else {
        m
    }
}

/// Computes `η_R`, `η_E` for the discrete solution `u` (active coefficients).
pub fn compute_indicators(disc: &Discretization, u: &[f64], problem: &ProblemSpec) -> Result<IndicatorField> {
    if disc.k() != 1 {
        return Err(Error::InvalidInput(format!(
            "indicators need linear geometry (k = 1), got k = {}",
            disc.k()
        )));
    }
    if u.len() != disc.n_active_dofs() {
        return Err(Error::InvalidInput(format!(
            "coefficient vector has length {}, expected {}",
            u.len(),
            disc.n_active_dofs()
        )));
    }
    let mesh = disc.mesh();
    let eps = problem.epsilon;
    let degree = disc.quad_degree + 2;
    let r2: Vec<f64> = (0..disc.cut.n_active())
        .into_par_iter()
        .map(|a| {
            let t = disc.cut.active_tets()[a];
            let geo = disc.space.geometry(t)?;
            let mut sum = 0.0;
            for p in disc.surface_points(a, degree)? {
                let (v, g, lap) = local_eval(disc, u, t, &geo, &p.lambda, &p.projector);
                let w = problem.convection(&p.x);
                let r = problem.forcing(&p.x) + eps * lap
                    - (problem.reaction + problem.convection_divergence(&p.x)) * v
                    - w.dot(&(p.projector * g));
                sum += p.weight * r * r;
            }
            let h = mesh.diameter(t);
            Ok(h * h * sum)
        })
        .collect::<Result<_>>()?;

    let edges = disc.cut.surface_edges()?;
    let rule = gauss_legendre_unit(2 * disc.m() + 2);
    let triangles = disc.cut.triangles();
    let edge_terms: Vec<Option<[(usize, f64); 2]>> = edges
        .par_iter()
        .map(|e| {
            let [Some(i0), Some(i1)] = e.triangles else {
                return Ok(None);
            };
            let [a, b] = e.endpoints;
            let sides = [&triangles[i0], &triangles[i1]];
            let m = sides.map(|tri| outward_conormal(tri, &a, &b));
            let geos = [disc.space.geometry(sides[0].tet)?, disc.space.geometry(sides[1].tet)?];
            let projectors = sides.map(|tri| Matrix3::identity() - tri.normal * tri.normal.transpose());
            let mut sum = 0.0;
            for &(s, w) in &rule {
                let x = a + (b - a) * s;
                let mut flux = 0.0;
                for k in 0..2 {
                    let lambda = geos[k].barycentric(&x);
                    let (_, g, _) = local_eval(disc, u, sides[k].tet, &geos[k], &lambda, &projectors[k]);
                    flux += (projectors[k] * g).dot(&m[k]);
                }
                let conv = problem.convection(&x).dot(&(m[0] + m[1]));
                sum += w * ((eps * flux).powi(2) + conv * conv);
            }
            let len = e.length();
            let active = sides.map(|tri| disc.cut.active_index(tri.tet).expect("triangle parent is active"));
            Ok(Some(active.map(|act| (act, mesh.diameter(disc.cut.active_tets()[act]) * len * sum))))
        })
        .collect::<Result<_>>()?;
    let mut e2 = vec![0.0; disc.cut.n_active()];
    for pair in edge_terms.into_iter().flatten() {
        for (act, v) in pair {
            e2[act] += v;
        }
    }
    Ok(IndicatorField::from_squares(r2, e2))
}

/// Dörfler bulk criterion: the smallest set of largest indicators with
/// `Σ η_T² ≥ θ² Σ η²`, ties broken by index. Returns sorted positions into `eta`.
pub fn mark_dorfler(eta: &[f64], theta: f64) -> Result<Vec<usize>> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::InvalidInput(format!("marking fraction must lie in (0, 1], got {theta}")));
    }
    let mut order: Vec<usize> = (0..eta.len()).collect();
    order.sort_by(|&i, &j| eta[j].total_cmp(&eta[i]).then(i.cmp(&j)));
    let total: f64 = order.iter().map(|&i| eta[i] * eta[i]).sum();
    let target = theta * theta * total;
    let mut marked = Vec::new();
    let mut acc = 0.0;
    for &i in &order {
        if acc >= target && !marked.is_empty() {
            break;
        }
        if eta[i] == 0.0 {
            break;
        }
        acc += eta[i] * eta[i];
        marked.push(i);
    }
    marked.sort_unstable();
    Ok(marked)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveConfig {
    pub m: usize,
    pub stabilization: StabKind,
    /// Stabilization parameter; `None` uses the kind's default.
    pub rho: Option<f64>,
    pub theta: f64,
    pub max_levels: usize,
    /// Stop after the first level with at least this many active dofs.
    pub dof_budget: usize,
    /// Stop after the first level whose H1 error is at most this value.
    pub target_h1: Option<f64>,
    pub tol: f64,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            m: 1,
            stabilization: StabKind::NormalVolume,
            rho: None,
            theta: 0.5,
            max_levels: 8,
            dof_budget: 50_000,
            target_h1: None,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdaptiveLevel {
    pub record: ErrorRecord,
    pub indicators: IndicatorField,
    /// Number of marked active tetrahedra (0 on the last level).
    pub marked: usize,
}

/// Solve → estimate → mark → refine, starting from `mesh`.
///
/// `on_level` sees each level's discretization, solution and indicators
/// before the mesh is refined.
pub fn adaptive_loop(
    problem: &ProblemSpec,
    mesh: TetMesh,
    cfg: &AdaptiveConfig,
    mut on_level: impl FnMut(usize, &Discretization, &[f64], &IndicatorField) -> Result<()>,
) -> Result<Vec<AdaptiveLevel>> {
    if cfg.max_levels == 0 {
        return Err(Error::InvalidInput("adaptive loop needs at least one level".into()));
    }
    if !(cfg.theta > 0.0 && cfg.theta <= 1.0) {
        return Err(Error::InvalidInput(format!("marking fraction must lie in (0, 1], got {}", cfg.theta)));
    }
    let mut mesh = Arc::new(mesh);
    let mut levels = Vec::new();
    for level in 0..cfg.max_levels {
        let start = Instant::now();
        let disc = Discretization::new(&problem.surface, mesh.clone(), cfg.m, 1)?;
        let rho = cfg.rho.unwrap_or_else(|| cfg.stabilization.default_rho(disc.h()));
        let sys = assemble_system(&disc, problem, cfg.stabilization, rho)?;
        let asm_ms = start.elapsed().as_secs_f64() * 1e3;
        let sol = solve_system(&sys, cfg.tol)?;
        if !sol.converged() {
            return Err(Error::InvalidInput(format!(
                "solver stopped with {:?} at level {level} (residual {:.3e})",
                sol.status, sol.residual
            )));
        }
        let (l2, h1) = surface_errors(&disc, &sol.x, problem, disc.quad_degree + 2)?;
        let indicators = compute_indicators(&disc, &sol.x, problem)?;
        on_level(level, &disc, &sol.x, &indicators)?;
        let done = level + 1 == cfg.max_levels
            || disc.n_active_dofs() >= cfg.dof_budget
            || cfg.target_h1.is_some_and(|t| h1 <= t);
        let marked = if done {
            Vec::new()
        } else {
            mark_dorfler(&indicators.eta, cfg.theta)?
        };
        levels.push(AdaptiveLevel {
            record: ErrorRecord {
                level,
                h: disc.h(),
                n_active: disc.n_active_dofs(),
                err_l2: Some(l2),
                err_h1: Some(h1),
                err_star: None,
                cond: None,
                asm_ms,
                solve_ms: sol.elapsed_ms,
                eta_global: Some(indicators.global),
                theta: Some(cfg.theta),
            },
            indicators,
            marked: marked.len(),
        });
        if done {
            break;
        }
        let tets: Vec<usize> = marked.iter().map(|&a| disc.cut.active_tets()[a]).collect();
        mesh = Arc::new(bisect_refine(&mesh, &tets)?);
    }
    Ok(levels)
}
