//! Manufactured surface problems `-ε Δ_Γ u + w·∇_Γ u + (c + div_Γ w) u = f`.
//!
//! All fields are written in local coordinates `y = x - shift` of the
//! surface, so a shifted surface carries its solution along. Off the surface,
//! `u` and `f` are extended constantly along normals through the closest
//! point `p(x)`.

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::mesh::Vec3;
use crate::surface::{AnalyticSurface, Shape};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProblemKind {
    /// `u = y1 y2 / r^2` on a sphere.
    SphereHarmonic,
    /// `u = y1 y2`, `w = a × y`, `c = 1` on a sphere.
    RotatingConvection { axis: Vec3 },
    /// Gaussian bump `u = exp(-|y - y0|^2 / σ^2)` centered at `y0` on a sphere.
    Spike { center: Vec3, sigma: f64 },
    /// Affine `u = g·y + b` on a plane with tangential `g`.
    Affine { gradient: Vec3, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemSpec {
    pub surface: AnalyticSurface,
    pub kind: ProblemKind,
    /// Diffusion coefficient.
    pub epsilon: f64,
    /// Constant reaction coefficient.
    pub reaction: f64,
}

fn sphere_radius(surface: &AnalyticSurface) -> Result<f64> {
    match surface.shape {
        Shape::Sphere { radius } if radius > 0.0 => Ok(radius),
        _ => Err(Error::InvalidInput("problem requires a sphere of positive radius".into())),
    }
}

pub fn sphere_harmonic_problem(r: f64) -> Result<ProblemSpec> {
    let surface = AnalyticSurface::sphere(r);
    sphere_radius(&surface)?;
    Ok(ProblemSpec {
        surface,
        kind: ProblemKind::SphereHarmonic,
        epsilon: 1.0,
        reaction: 1.0,
    })
}

pub fn rotating_convection_problem(r: f64, epsilon: f64, axis: Vec3) -> Result<ProblemSpec> {
    let surface = AnalyticSurface::sphere(r);
    sphere_radius(&surface)?;
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput(format!("diffusion must be positive, got {epsilon}")));
    }
    if (axis.norm() - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidInput("rotation axis must have unit length".into()));
    }
    Ok(ProblemSpec {
        surface,
        kind: ProblemKind::RotatingConvection { axis },
        epsilon,
        reaction: 1.0,
    })
}

/// Gaussian bump of width `sigma` centered at the projection of `center` onto the sphere.
pub fn spike_problem(r: f64, center: Vec3, sigma: f64) -> Result<ProblemSpec> {
    let surface = AnalyticSurface::sphere(r);
    sphere_radius(&surface)?;
    if !(sigma > 0.0) || center.norm() == 0.0 {
        return Err(Error::InvalidInput("spike needs sigma > 0 and a nonzero center".into()));
    }
    Ok(ProblemSpec {
        surface,
        kind: ProblemKind::Spike {
            center: center * (r / center.norm()),
            sigma,
        },
        epsilon: 1.0,
        reaction: 1.0,
    })
}

/// Affine solution on the plane `{n·x = offset}`; the normal part of `gradient` is removed.
pub fn planar_problem(normal: [f64; 3], offset: f64, gradient: Vec3, value: f64) -> Result<ProblemSpec> {
    let surface = AnalyticSurface::plane(normal, offset);
    surface.validate()?;
    let n = Vec3::from(normal).normalize();
    Ok(ProblemSpec {
        surface,
        kind: ProblemKind::Affine {
            gradient: gradient - n * n.dot(&gradient),
            value,
        },
        epsilon: 1.0,
        reaction: 1.0,
    })
}

impl ProblemSpec {
    pub fn name(&self) -> &'static str {
        match self.kind {
            ProblemKind::SphereHarmonic => "sphere_harmonic",
            ProblemKind::RotatingConvection { .. } => "rotating",
            ProblemKind::Spike { .. } => "spike",
            ProblemKind::Affine { .. } => "affine",
        }
    }

    /// Same problem on the surface translated by `s`.
    pub fn shifted(&self, s: Vec3) -> Self {
        Self {
            surface: self.surface.shifted(s),
            ..*self
        }
    }

    pub fn has_convection(&self) -> bool {
        matches!(self.kind, ProblemKind::RotatingConvection { .. })
    }

    fn radius(&self) -> f64 {
        match self.surface.shape {
            Shape::Sphere { radius } => radius,
            _ => 1.0,
        }
    }

    fn local(&self, x: &Vec3) -> Vec3 {
        x - self.surface.shift
    }

    /// Ambient function `U` whose restriction to the surface is the solution, and its gradient.
    fn ambient(&self, x: &Vec3) -> (f64, Vec3) {
        let y = self.local(x);
        match self.kind {
            ProblemKind::SphereHarmonic => {
                let s = 1.0 / (self.radius() * self.radius());
                (s * y.x * y.y, Vec3::new(s * y.y, s * y.x, 0.0))
            }
            ProblemKind::RotatingConvection { .. } => (y.x * y.y, Vec3::new(y.y, y.x, 0.0)),
            ProblemKind::Spike { center, sigma } => {
                let d = y - center;
                let g = (-d.norm_squared() / (sigma * sigma)).exp();
                (g, d * (-2.0 * g / (sigma * sigma)))
            }
            ProblemKind::Affine { gradient, value } => (gradient.dot(&y) + value, gradient),
        }
    }

    /// Exact solution extended constantly along normals, `u^e(x) = u(p(x))`.
    pub fn exact(&self, x: &Vec3) -> f64 {
        self.ambient(&self.surface.closest_point(x)).0
    }

    /// Gradient of the extension, `∇u^e(x) = Dp(x)^T ∇U(p(x))`.
    pub fn exact_grad(&self, x: &Vec3) -> Vec3 {
        let p = self.surface.closest_point(x);
        let dp: Matrix3<f64> = self.surface.closest_point_jacobian(x);
        dp.transpose() * self.ambient(&p).1
    }

    /// Surface gradient `∇_Γ u` at the closest point of `x`.
    pub fn surface_grad(&self, x: &Vec3) -> Vec3 {
        let p = self.surface.closest_point(x);
        let n = self.surface.normal(&p);
        let g = self.ambient(&p).1;
        g - n * n.dot(&g)
    }

    /// Convection field `w` (zero for pure diffusion problems).
    pub fn convection(&self, x: &Vec3) -> Vec3 {
        match self.kind {
            ProblemKind::RotatingConvection { axis } => axis.cross(&self.local(x)),
            _ => Vec3::zeros(),
        }
    }

    /// `div_Γ w`; zero for rigid rotations.
    pub fn convection_divergence(&self, _x: &Vec3) -> f64 {
        0.0
    }

    /// Right-hand side `f(p(x))`.
    pub fn forcing(&self, x: &Vec3) -> f64 {
        let p = self.surface.closest_point(x);
        let y = self.local(&p);
        let (u, grad) = self.ambient(&p);
        match self.kind {
            ProblemKind::SphereHarmonic => {
                let r = self.radius();
                (6.0 / (r * r) + 1.0) * u
            }
            ProblemKind::RotatingConvection { axis } => {
                let r = self.radius();
                let w = axis.cross(&y);
                self.epsilon * 6.0 / (r * r) * u + w.dot(&grad) + self.reaction * u
            }
            ProblemKind::Spike { center, sigma } => {
                // u = g(s) with s = y·y0 on |y| = r.
                let r2 = self.radius().powi(2);
                let s = y.dot(&center);
                let s2 = sigma * sigma;
                let grad_s2 = r2 - s * s / r2;
                let lap = u * (4.0 / (s2 * s2) * grad_s2 - 2.0 / s2 * 2.0 * s / r2);
                -lap + u
            }
            ProblemKind::Affine { .. } => u,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_surface_points(p: &ProblemSpec, n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let x = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                p.surface.closest_point(&(x + p.surface.shift))
            })
            .collect()
    }

    /// Fourth-order central difference Laplacian of `f` at `x`.
    fn fd_laplacian(f: impl Fn(&Vec3) -> f64, x: &Vec3, h: f64) -> f64 {
        let mut lap = 0.0;
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = h;
            lap += (-f(&(x + 2.0 * e)) + 16.0 * f(&(x + e)) - 30.0 * f(x) + 16.0 * f(&(x - e)) - f(&(x - 2.0 * e)))
                / (12.0 * h * h);
        }
        lap
    }

    fn fd_gradient(f: impl Fn(&Vec3) -> f64, x: &Vec3, h: f64) -> Vec3 {
        let mut g = Vec3::zeros();
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = h;
            g[k] = (-f(&(x + 2.0 * e)) + 8.0 * f(&(x + e)) - 8.0 * f(&(x - e)) + f(&(x - 2.0 * e))) / (12.0 * h);
        }
        g
    }

    /// The Laplacian of the normal extension equals `Δ_Γ u` on the surface.
    fn residual(p: &ProblemSpec, x: &Vec3, h: f64) -> (f64, f64) {
        let ue = |y: &Vec3| p.exact(y);
        let lap = fd_laplacian(ue, x, h);
        let grad = fd_gradient(ue, x, h);
        let w = p.convection(x);
        let u = p.exact(x);
        let f = p.forcing(x);
        let res = -p.epsilon * lap + w.dot(&grad) + (p.reaction + p.convection_divergence(x)) * u - f;
        let scale = (p.epsilon * lap).abs() + w.dot(&grad).abs() + u.abs() + f.abs();
        (res, scale)
    }

    #[test]
    fn sphere_harmonic_forcing_is_seven_u() {
        let p = sphere_harmonic_problem(1.0).unwrap();
        let x = Vec3::new(0.48, 0.6, 0.64);
        assert!((p.forcing(&x) - 7.0 * x.x * x.y).abs() < 1e-15);
    }

    #[test]
    fn pde_residuals_vanish() {
        let problems = [
            sphere_harmonic_problem(1.0).unwrap(),
            sphere_harmonic_problem(0.8).unwrap().shifted(Vec3::new(0.1, 0.0, -0.05)),
            rotating_convection_problem(1.0, 1e-2, Vec3::z()).unwrap(),
            rotating_convection_problem(1.0, 1.0, Vec3::new(1.0, 2.0, 2.0) / 3.0).unwrap(),
            spike_problem(1.0, Vec3::new(1.0, 1.0, 1.0), 0.25).unwrap(),
        ];
        for p in &problems {
            for x in random_surface_points(p, 200, 7) {
                let (res, scale) = residual(p, &x, 1e-3);
                assert!(res.abs() <= 1e-8 * scale.max(1.0), "{}: {res}", p.name());
            }
        }
    }

    #[test]
    fn narrow_spike_residual_with_scaled_step() {
        let p = spike_problem(1.0, Vec3::new(0.0, 0.0, 1.0), 0.1).unwrap();
        for x in random_surface_points(&p, 200, 9) {
            let (res, scale) = residual(&p, &x, 5e-4);
            assert!(res.abs() <= 1e-8 * scale.max(1.0), "{res}");
        }
        assert!((p.exact(&Vec3::new(0.0, 0.0, 1.0)) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rotation_is_tangential_and_divergence_free() {
        let a = Vec3::new(0.0, 0.6, 0.8);
        let p = rotating_convection_problem(1.0, 1e-5, a).unwrap();
        for x in random_surface_points(&p, 200, 3) {
            let w = p.convection(&x);
            assert!(w.dot(&p.surface.normal(&x)).abs() < 1e-10);
            // Surface divergence tr(P ∇w) by differences.
            let h = 1e-5;
            let n = p.surface.normal(&x);
            let proj = Matrix3::identity() - n * n.transpose();
            let mut jac = Matrix3::zeros();
            for k in 0..3 {
                let mut e = Vec3::zeros();
                e[k] = h;
                jac.set_column(k, &((p.convection(&(x + e)) - p.convection(&(x - e))) / (2.0 * h)));
            }
            assert!((proj * jac).trace().abs() < 1e-10);
        }
        // Coercivity c + div/2 for the convection setup.
        assert!(p.reaction + 0.5 * p.convection_divergence(&Vec3::x()) >= 1.0);
    }

    #[test]
    fn planar_affine_problem() {
        let p = planar_problem([0.0, 0.0, 1.0], 0.3, Vec3::new(1.0, -2.0, 5.0), 0.5).unwrap();
        let x = Vec3::new(0.2, 0.1, 0.9);
        assert!((p.exact(&x) - (0.2 - 0.2 + 0.5)).abs() < 1e-15);
        assert!((p.forcing(&x) - p.exact(&x)).abs() < 1e-15);
        assert!((p.exact_grad(&x) - Vec3::new(1.0, -2.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn harmonic_has_zero_mean() {
        // Midpoint-in-angle quadrature; odd symmetry in y1 makes the sum vanish.
        let p = sphere_harmonic_problem(1.0).unwrap();
        let n = 64;
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..2 * n {
                let th = (i as f64 + 0.5) * std::f64::consts::PI / n as f64;
                let ph = (j as f64 + 0.5) * std::f64::consts::PI / n as f64;
                let x = Vec3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos());
                sum += p.exact(&x) * th.sin();
            }
        }
        assert!(sum.abs() < 1e-10);
    }

    /// Gauss–Legendre nodes and weights on [-1, 1] by Newton iteration.
    fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
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
                (x, 2.0 / ((1.0 - x * x) * dp * dp))
            })
            .collect()
    }

    #[test]
    fn spike_forcing_integrates_to_solution_integral() {
        // On a closed surface the Laplacian integrates to zero. Gauss–Legendre
        // in z and the trapezoidal rule in the azimuth.
        let p = spike_problem(1.0, Vec3::new(0.3, -0.4, 0.8), 0.25).unwrap();
        let nphi = 256;
        let (mut fu, mut uu) = (0.0, 0.0);
        for (z, wz) in gauss_legendre(96) {
            let rho = (1.0 - z * z).sqrt();
            for j in 0..nphi {
                let ph = 2.0 * std::f64::consts::PI * j as f64 / nphi as f64;
                let x = Vec3::new(rho * ph.cos(), rho * ph.sin(), z);
                let w = wz * 2.0 * std::f64::consts::PI / nphi as f64;
                fu += p.forcing(&x) * w;
                uu += p.exact(&x) * w;
            }
        }
        assert!((fu - uu).abs() < 1e-6 * uu.abs().max(1.0), "{fu} {uu}");
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(rotating_convection_problem(1.0, 0.0, Vec3::z()).is_err());
        assert!(rotating_convection_problem(1.0, 1.0, Vec3::new(1.0, 1.0, 0.0)).is_err());
        assert!(spike_problem(1.0, Vec3::z(), 0.0).is_err());
        assert!(sphere_harmonic_problem(-1.0).is_err());
    }
}
