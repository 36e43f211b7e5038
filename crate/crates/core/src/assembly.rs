//! Bilinear forms on the mapped discrete surface and their stabilizations.
//!
//! Element kernels return dense blocks over active dof indices. The global
//! assemblers evaluate kernels in parallel, then merge the blocks in active
//! tetrahedron order so the resulting matrices do not depend on scheduling.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::Matrix3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fe::{ActiveDofMap, FeSpace, TetGeometry, MAX_LOCAL};
use crate::isomap::{build_isomap, tet_surface_points, tet_volume_points, IsoMap, SurfacePoint};
use crate::levelset::{extract_cut_topology, interpolate_levelset, CutTopology, DiscreteLevelSet};
use crate::mesh::{TetMesh, Vec3};
use crate::problem::ProblemSpec;
use crate::quadrature::{get_rule, Domain};
use crate::sparse::{CsrMatrix, TripletBuilder};
use crate::surface::AnalyticSurface;

/// Everything needed to assemble on one background mesh: level set, cut,
/// geometry map, trial space and active dofs.
#[derive(Debug, Clone)]
pub struct Discretization {
    pub surface: AnalyticSurface,
    pub phi: DiscreteLevelSet,
    pub cut: CutTopology,
    pub map: IsoMap,
    pub space: Arc<FeSpace>,
    pub dofs: ActiveDofMap,
    /// Surface quadrature degree `2m + 2(k - 1)`.
    pub quad_degree: usize,
}

impl Discretization {
    /// Builds the discretization with elements of degree `m` and geometry of degree `k ≤ m`.
    pub fn new(surface: &AnalyticSurface, mesh: Arc<TetMesh>, m: usize, k: usize) -> Result<Self> {
        if k > m {
            return Err(Error::InvalidInput(format!("geometry degree k={k} exceeds element degree m={m}")));
        }
        let phi = interpolate_levelset(surface, mesh.clone(), k)?;
        let cut = extract_cut_topology(&phi)?;
        let map = build_isomap(&phi, &cut)?;
        let space = if m == k {
            phi.space().clone()
        } else {
            Arc::new(FeSpace::new(mesh, m)?)
        };
        let dofs = ActiveDofMap::new(&space, cut.active_tets());
        Ok(Self {
            surface: *surface,
            phi,
            cut,
            map,
            space,
            dofs,
            quad_degree: 2 * m + 2 * (k - 1),
        })
    }

    pub fn mesh(&self) -> &Arc<TetMesh> {
        self.space.mesh()
    }

    pub fn m(&self) -> usize {
        self.space.degree()
    }

    pub fn k(&self) -> usize {
        self.phi.degree()
    }

    pub fn n_active_dofs(&self) -> usize {
        self.dofs.len()
    }

    /// Largest diameter over active tetrahedra.
    pub fn h(&self) -> f64 {
        let mesh = self.mesh();
        self.cut.active_tets().iter().map(|&t| mesh.diameter(t)).fold(0.0, f64::max)
    }

    /// Active indices of the dofs of tetrahedron `t`.
    pub fn local_dofs(&self, t: usize) -> Vec<usize> {
        self.space
            .tet_dofs(t)
            .iter()
            .map(|&g| self.dofs.active_index(g).expect("dofs of active tetrahedra are active"))
            .collect()
    }

    pub fn surface_points(&self, active: usize, degree: usize) -> Result<Vec<SurfacePoint>> {
        let t = self.cut.active_tets()[active];
        tet_surface_points(&self.cut, &self.map, &self.space.geometry(t)?, active, degree)
    }

    /// Evaluates a finite element function given by active coefficients at a surface point.
    ///
    /// Returns the value and the full (mapped) gradient.
    pub fn eval_at(&self, coeffs: &[f64], p: &SurfacePoint, geo: &TetGeometry) -> (f64, Vec3) {
        let basis = self.space.eval_basis(geo, &p.lambda);
        let mut v = 0.0;
        let mut g = Vec3::zeros();
        for (i, &dof) in self.space.tet_dofs(p.tet).iter().enumerate() {
            let c = coeffs[self.dofs.active_index(dof).expect("active dof")];
            v += c * basis.values[i];
            g += basis.grads[i] * c;
        }
        (v, p.grad_transform * g)
    }
}

/// Dense element contribution over active dof indices (row-major matrix).
#[derive(Debug, Clone, PartialEq)]
pub struct LocalBlock {
    pub dofs: Vec<usize>,
    pub matrix: Vec<f64>,
    pub rhs: Vec<f64>,
}

impl LocalBlock {
    fn zeros(dofs: Vec<usize>) -> Self {
        let n = dofs.len();
        Self {
            dofs,
            matrix: vec![0.0; n * n],
            rhs: vec![0.0; n],
        }
    }

    fn add(&mut self, a: usize, b: usize, v: f64) {
        let n = self.dofs.len();
        self.matrix[a * n + b] += v;
    }
}

/// Basis values and mapped gradients at one surface point.
struct PointBasis {
    n: usize,
    values: [f64; MAX_LOCAL],
    grads: [Vec3; MAX_LOCAL],
}

fn point_basis(space: &FeSpace, geo: &TetGeometry, lambda: &[f64; 4], transform: &Matrix3<f64>) -> PointBasis {
    let b = space.eval_basis(geo, lambda);
    let mut grads = [Vec3::zeros(); MAX_LOCAL];
    for i in 0..b.n {
        grads[i] = transform * b.grads[i];
    }
    PointBasis {
        n: b.n,
        values: b.values,
        grads,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StabKind {
    None,
    Ghost,
    FullGradSurface,
    FullGradVolume,
    NormalVolume,
}

impl StabKind {
    pub const ALL: [StabKind; 5] = [
        StabKind::None,
        StabKind::Ghost,
        StabKind::FullGradSurface,
        StabKind::FullGradVolume,
        StabKind::NormalVolume,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StabKind::None => "none",
            StabKind::Ghost => "ghost",
            StabKind::FullGradSurface => "full_grad_surface",
            StabKind::FullGradVolume => "full_grad_volume",
            StabKind::NormalVolume => "normal_volume",
        }
    }

    /// Default parameter: `h` for the full volume gradient, 1 otherwise.
    pub fn default_rho(self, h: f64) -> f64 {
        match self {
            StabKind::FullGradVolume => h,
            _ => 1.0,
        }
    }
}

impl fmt::Display for StabKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StabKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StabKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = StabKind::ALL.iter().map(|k| k.name()).collect();
                Error::InvalidInput(format!("unknown stabilization '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormKind {
    LaplaceBeltrami,
    ConvectionDiffusion,
}

/// Assembled linear system over active dofs.
#[derive(Debug, Clone)]
pub struct TraceSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    pub form: FormKind,
    pub stabilization: StabKind,
    pub rho: f64,
    /// Streamline parameter `δ_T` per active tetrahedron (convection forms only).
    pub deltas: Option<Vec<f64>>,
    /// Caveats attached during assembly.
    pub flags: Vec<String>,
}

impl TraceSystem {
    pub fn dim(&self) -> usize {
        self.rhs.len()
    }

    /// Adds a stabilization matrix and records its kind.
    pub fn add_stabilization(&mut self, kind: StabKind, rho: f64, matrix: &CsrMatrix, m: usize) -> Result<()> {
        self.matrix = self.matrix.add_scaled(matrix, 1.0)?;
        self.stabilization = kind;
        self.rho = rho;
        if kind == StabKind::Ghost && m > 1 {
            self.flags.push("no conditioning guarantee".into());
        }
        Ok(())
    }
}

fn merge(n: usize, blocks: &[LocalBlock]) -> (CsrMatrix, Vec<f64>) {
    let mut b = TripletBuilder::new(n, n);
    let mut rhs = vec![0.0; n];
    for blk in blocks {
        b.push_block(&blk.dofs, &blk.matrix);
        for (&d, &r) in blk.dofs.iter().zip(&blk.rhs) {
            rhs[d] += r;
        }
    }
    (b.build(), rhs)
}

fn for_active_tets<T: Send>(disc: &Discretization, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    if disc.cut.n_active() == 0 {
        return Err(Error::SurfaceNotFound);
    }
    (0..disc.cut.n_active()).into_par_iter().map(f).collect()
}

/// Element block of `∫ ∇_Γ u·∇_Γ v + uv` and `∫ f v` on the surface part of the `active`-th tetrahedron.
pub fn lb_element(disc: &Discretization, problem: &ProblemSpec, active: usize) -> Result<LocalBlock> {
    let t = disc.cut.active_tets()[active];
    let geo = disc.space.geometry(t)?;
    let mut blk = LocalBlock::zeros(disc.local_dofs(t));
    for p in disc.surface_points(active, disc.quad_degree)? {
        let pb = point_basis(&disc.space, &geo, &p.lambda, &p.grad_transform);
        let sg: Vec<Vec3> = (0..pb.n).map(|i| p.projector * pb.grads[i]).collect();
        let f = problem.forcing(&p.x);
        for a in 0..pb.n {
            for b in 0..pb.n {
                blk.add(a, b, p.weight * (sg[a].dot(&sg[b]) + pb.values[a] * pb.values[b]));
            }
            blk.rhs[a] += p.weight * f * pb.values[a];
        }
    }
    Ok(blk)
}

/// Assembles the Laplace–Beltrami system `-Δ_Γ u + u = f` without stabilization.
pub fn assemble_lb(disc: &Discretization, problem: &ProblemSpec) -> Result<TraceSystem> {
    let blocks = for_active_tets(disc, |a| lb_element(disc, problem, a))?;
    let (matrix, rhs) = merge(disc.n_active_dofs(), &blocks);
    Ok(TraceSystem {
        matrix,
        rhs,
        form: FormKind::LaplaceBeltrami,
        stabilization: StabKind::None,
        rho: 0.0,
        deltas: None,
        flags: Vec::new(),
    })
}

/// Element block of a surface or volume stabilization on the `active`-th tetrahedron.
pub fn stabilization_element(disc: &Discretization, kind: StabKind, rho: f64, active: usize) -> Result<LocalBlock> {
    let t = disc.cut.active_tets()[active];
    let geo = disc.space.geometry(t)?;
    let mut blk = LocalBlock::zeros(disc.local_dofs(t));
    match kind {
        StabKind::None | StabKind::Ghost => {}
        StabKind::FullGradSurface => {
            for p in disc.surface_points(active, disc.quad_degree)? {
                let pb = point_basis(&disc.space, &geo, &p.lambda, &p.grad_transform);
                let dn: Vec<f64> = (0..pb.n).map(|i| p.normal.dot(&pb.grads[i])).collect();
                for a in 0..pb.n {
                    for b in 0..pb.n {
                        blk.add(a, b, rho * p.weight * (dn[a] * dn[b]));
                    }
                }
            }
        }
        StabKind::FullGradVolume | StabKind::NormalVolume => {
            for v in tet_volume_points(&disc.map, t, &geo, disc.quad_degree)? {
                let pb = point_basis(&disc.space, &geo, &v.lambda, &v.grad_transform);
                if kind == StabKind::FullGradVolume {
                    for a in 0..pb.n {
                        for b in 0..pb.n {
                            blk.add(a, b, rho * v.weight * pb.grads[a].dot(&pb.grads[b]));
                        }
                    }
                } else {
                    let (_, g) = disc.phi.eval(t, &geo, &v.lambda);
                    let n = g / g.norm();
                    let dn: Vec<f64> = (0..pb.n).map(|i| n.dot(&pb.grads[i])).collect();
                    for a in 0..pb.n {
                        for b in 0..pb.n {
                            blk.add(a, b, rho * v.weight * (dn[a] * dn[b]));
                        }
                    }
                }
            }
        }
    }
    Ok(blk)
}

/// Ghost penalty block `ρ ∫_F [∇u·n_F][∇v·n_F]` on mesh face `face`.
pub fn ghost_face_element(disc: &Discretization, face: usize, rho: f64) -> Result<LocalBlock> {
    let mesh = disc.mesh();
    let f = &mesh.faces().faces[face];
    let [t1, t2] = f.tets;
    let (g1, g2) = (disc.space.geometry(t1)?, disc.space.geometry(t2)?);
    let d1 = disc.local_dofs(t1);
    let d2 = disc.local_dofs(t2);
    let mut dofs = d1.clone();
    for &d in &d2 {
        if !dofs.contains(&d) {
            dofs.push(d);
        }
    }
    let pos = |d: usize| dofs.iter().position(|&x| x == d).expect("dof in union");
    let p1: Vec<usize> = d1.iter().map(|&d| pos(d)).collect();
    let p2: Vec<usize> = d2.iter().map(|&d| pos(d)).collect();
    let v = f.vertices.map(|i| *mesh.vertex(i));
    let cross = (v[1] - v[0]).cross(&(v[2] - v[0]));
    let area = 0.5 * cross.norm();
    let normal = cross / cross.norm();
    let degree = (2 * (disc.m() - 1)).max(1);
    let rule = get_rule(Domain::Triangle, degree)?;
    let mut blk = LocalBlock::zeros(dofs.clone());
    let mut jump = vec![0.0; dofs.len()];
    for (b, w) in rule.iter() {
        let x = v[0] * b[0] + v[1] * b[1] + v[2] * b[2];
        jump.iter_mut().for_each(|j| *j = 0.0);
        let b1 = disc.space.eval_basis(&g1, &g1.barycentric(&x));
        let b2 = disc.space.eval_basis(&g2, &g2.barycentric(&x));
        for i in 0..b1.n {
            jump[p1[i]] += b1.grads[i].dot(&normal);
            jump[p2[i]] -= b2.grads[i].dot(&normal);
        }
        let wt = rho * 2.0 * w * area;
        for a in 0..dofs.len() {
            for c in 0..dofs.len() {
                blk.add(a, c, wt * (jump[a] * jump[c]));
            }
        }
    }
    Ok(blk)
}

/// Assembles the stabilization addend `s_h` over active dofs.
pub fn assemble_stabilization(disc: &Discretization, kind: StabKind, rho: f64) -> Result<CsrMatrix> {
    if !(rho > 0.0) && kind != StabKind::None {
        return Err(Error::InvalidInput(format!("stabilization parameter must be positive, got {rho}")));
    }
    let n = disc.n_active_dofs();
    let blocks = match kind {
        StabKind::None => return Ok(CsrMatrix::zeros(n, n)),
        StabKind::Ghost => disc
            .cut
            .interior_faces()
            .par_iter()
            .map(|&f| ghost_face_element(disc, f, rho))
            .collect::<Result<Vec<_>>>()?,
        _ => for_active_tets(disc, |a| stabilization_element(disc, kind, rho, a))?,
    };
    Ok(merge(n, &blocks).0)
}

/// Evaluates `s_h(u, u)` by integrating the squared integrand directly.
///
/// This avoids the cancellation of `u^T S u` for nearly annihilated `u`.
pub fn stabilization_form(disc: &Discretization, kind: StabKind, rho: f64, u: &[f64]) -> Result<f64> {
    let values: Vec<f64> = match kind {
        StabKind::None => return Ok(0.0),
        StabKind::Ghost => {
            let mesh = disc.mesh();
            let degree = (2 * (disc.m() - 1)).max(1);
            let rule = get_rule(Domain::Triangle, degree)?;
            disc.cut
                .interior_faces()
                .par_iter()
                .map(|&f| {
                    let face = &mesh.faces().faces[f];
                    let [t1, t2] = face.tets;
                    let (g1, g2) = (disc.space.geometry(t1)?, disc.space.geometry(t2)?);
                    let v = face.vertices.map(|i| *mesh.vertex(i));
                    let cross = (v[1] - v[0]).cross(&(v[2] - v[0]));
                    let normal = cross / cross.norm();
                    let grad = |t: usize, geo: &TetGeometry, x: &Vec3| {
                        let b = disc.space.eval_basis(geo, &geo.barycentric(x));
                        disc.local_dofs(t)
                            .iter()
                            .enumerate()
                            .fold(Vec3::zeros(), |acc, (i, &d)| acc + b.grads[i] * u[d])
                    };
                    Ok(rule
                        .iter()
                        .map(|(b, w)| {
                            let x = v[0] * b[0] + v[1] * b[1] + v[2] * b[2];
                            let jump = (grad(t1, &g1, &x) - grad(t2, &g2, &x)).dot(&normal);
                            rho * w * cross.norm() * jump * jump
                        })
                        .sum::<f64>())
                })
                .collect::<Result<_>>()?
        }
        _ => for_active_tets(disc, |a| {
            let t = disc.cut.active_tets()[a];
            let geo = disc.space.geometry(t)?;
            let dofs = disc.local_dofs(t);
            let grad = |lambda: &[f64; 4], transform: &Matrix3<f64>| {
                let pb = point_basis(&disc.space, &geo, lambda, transform);
                dofs.iter().enumerate().fold(Vec3::zeros(), |acc, (i, &d)| acc + pb.grads[i] * u[d])
            };
            let mut sum = 0.0;
            if kind == StabKind::FullGradSurface {
                for p in disc.surface_points(a, disc.quad_degree)? {
                    sum += rho * p.weight * p.normal.dot(&grad(&p.lambda, &p.grad_transform)).powi(2);
                }
            } else {
                for v in tet_volume_points(&disc.map, t, &geo, disc.quad_degree)? {
                    let g = grad(&v.lambda, &v.grad_transform);
                    sum += rho
                        * v.weight
                        * if kind == StabKind::FullGradVolume {
                            g.norm_squared()
                        } else {
                            let (_, gp) = disc.phi.eval(t, &geo, &v.lambda);
                            (gp.dot(&g) / gp.norm()).powi(2)
                        };
                }
            }
            Ok(sum)
        })?,
    };
    Ok(values.iter().sum())
}

/// Constants of the streamline parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupgParams {
    pub delta0: f64,
    pub delta1: f64,
}

impl Default for SupgParams {
    fn default() -> Self {
        Self {
            delta0: 0.5,
            delta1: 0.25,
        }
    }
}

/// Streamline parameter `δ_T` from the local Péclet number `h_T ‖w‖ / (2ε)`.
///
/// The `1/c` cap is skipped when `c = 0`.
pub fn supg_delta(h: f64, w_norm: f64, eps: f64, c: f64, params: &SupgParams) -> f64 {
    let peclet = h * w_norm / (2.0 * eps);
    let delta = if peclet > 1.0 {
        params.delta0 * h / w_norm
    } else {
        params.delta1 * h * h / eps
    };
    if c > 0.0 {
        delta.min(1.0 / c)
    } else {
        delta
    }
}

/// Element block of the skew-symmetric convection–diffusion form plus streamline terms.
///
/// Returns the block and `δ_T`.
pub fn supg_element(
    disc: &Discretization,
    problem: &ProblemSpec,
    params: &SupgParams,
    active: usize,
) -> Result<(LocalBlock, f64)> {
    let t = disc.cut.active_tets()[active];
    let geo = disc.space.geometry(t)?;
    let points = disc.surface_points(active, disc.quad_degree)?;
    let w_norm = points.iter().map(|p| problem.convection(&p.x).norm()).fold(0.0, f64::max);
    let h = disc.mesh().diameter(t);
    let eps = problem.epsilon;
    let c = problem.reaction;
    let delta = supg_delta(h, w_norm, eps, c, params);
    let hessians = disc.space.basis_hessians(&geo);
    let mut blk = LocalBlock::zeros(disc.local_dofs(t));
    for p in &points {
        let pb = point_basis(&disc.space, &geo, &p.lambda, &p.grad_transform);
        let n = pb.n;
        let sg: Vec<Vec3> = (0..n).map(|i| p.projector * pb.grads[i]).collect();
        let w = problem.convection(&p.x);
        let div_w = problem.convection_divergence(&p.x);
        let f = problem.forcing(&p.x);
        let wg: Vec<f64> = sg.iter().map(|g| w.dot(g)).collect();
        // Elementwise surface Laplacian tr(P D²φ); identically zero for m = 1.
        let lap: Vec<f64> = (0..n)
            .map(|i| if disc.m() > 1 { (p.projector * hessians[i]).trace() } else { 0.0 })
            .collect();
        for a in 0..n {
            for b in 0..n {
                // Trial function b, test function a.
                let galerkin = eps * sg[b].dot(&sg[a])
                    + 0.5 * (wg[b] * pb.values[a] - wg[a] * pb.values[b])
                    + (c + 0.5 * div_w) * pb.values[b] * pb.values[a];
                let residual = -eps * lap[b] + wg[b] + (c + div_w) * pb.values[b];
                blk.add(a, b, p.weight * (galerkin + delta * residual * wg[a]));
            }
            blk.rhs[a] += p.weight * f * (pb.values[a] + delta * wg[a]);
        }
    }
    Ok((blk, delta))
}

/// Assembles the SUPG-stabilized convection–diffusion system (without `s_h`).
pub fn assemble_supg(disc: &Discretization, problem: &ProblemSpec, params: &SupgParams) -> Result<TraceSystem> {
    if !(problem.epsilon > 0.0) {
        return Err(Error::InvalidInput(format!("diffusion must be positive, got {}", problem.epsilon)));
    }
    let parts = for_active_tets(disc, |a| supg_element(disc, problem, params, a))?;
    let deltas = parts.iter().map(|p| p.1).collect();
    let blocks: Vec<LocalBlock> = parts.into_iter().map(|p| p.0).collect();
    let (matrix, rhs) = merge(disc.n_active_dofs(), &blocks);
    Ok(TraceSystem {
        matrix,
        rhs,
        form: FormKind::ConvectionDiffusion,
        stabilization: StabKind::None,
        rho: 0.0,
        deltas: Some(deltas),
        flags: Vec::new(),
    })
}

/// Assembles the problem's natural form (SUPG for convection, Laplace–Beltrami otherwise)
/// and adds the stabilization `kind` with parameter `rho`.
pub fn assemble_system(disc: &Discretization, problem: &ProblemSpec, kind: StabKind, rho: f64) -> Result<TraceSystem> {
    let mut sys = if problem.has_convection() {
        assemble_supg(disc, problem, &SupgParams::default())?
    } else {
        assemble_lb(disc, problem)?
    };
    if kind != StabKind::None {
        let s = assemble_stabilization(disc, kind, rho)?;
        sys.add_stabilization(kind, rho, &s, disc.m())?;
    }
    Ok(sys)
}

/// Surface mass matrix `∫_Γh u v` (used by conditioning and coercivity probes).
pub fn assemble_mass(disc: &Discretization) -> Result<CsrMatrix> {
    let blocks = for_active_tets(disc, |a| {
        let t = disc.cut.active_tets()[a];
        let geo = disc.space.geometry(t)?;
        let mut blk = LocalBlock::zeros(disc.local_dofs(t));
        for p in disc.surface_points(a, disc.quad_degree)? {
            let b = disc.space.eval_basis(&geo, &p.lambda);
            for i in 0..b.n {
                for j in 0..b.n {
                    blk.add(i, j, p.weight * (b.values[i] * b.values[j]));
                }
            }
        }
        Ok(blk)
    })?;
    Ok(merge(disc.n_active_dofs(), &blocks).0)
}

/// Volume mass matrix `∫_{ω_h} u v` over the active tetrahedra (mapped).
pub fn assemble_band_mass(disc: &Discretization) -> Result<CsrMatrix> {
    let blocks = for_active_tets(disc, |a| {
        let t = disc.cut.active_tets()[a];
        let geo = disc.space.geometry(t)?;
        let mut blk = LocalBlock::zeros(disc.local_dofs(t));
        for v in tet_volume_points(&disc.map, t, &geo, disc.quad_degree)? {
            let b = disc.space.eval_basis(&geo, &v.lambda);
            for i in 0..b.n {
                for j in 0..b.n {
                    blk.add(i, j, v.weight * (b.values[i] * b.values[j]));
                }
            }
        }
        Ok(blk)
    })?;
    Ok(merge(disc.n_active_dofs(), &blocks).0)
}
