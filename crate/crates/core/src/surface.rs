//! Analytic level-set surfaces with closest-point projections.

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::mesh::Vec3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Sphere { radius: f64 },
    /// Torus around the z axis.
    Torus { major: f64, minor: f64 },
    Ellipsoid { semi_axes: [f64; 3] },
    /// `{x : normal . x = offset}` with a unit normal.
    Plane { normal: [f64; 3], offset: f64 },
}

/// A closed (or planar) surface `{phi = 0}`, optionally translated by `shift`.
///
/// The sphere and plane use signed distance functions. The torus uses its
/// distance-like function, which is smooth away from the core circle. The
/// ellipsoid uses a scaled quadratic, so `phi` is a polynomial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticSurface {
    pub shape: Shape,
    pub shift: Vec3,
}

impl AnalyticSurface {
    pub fn sphere(radius: f64) -> Self {
        Self::new(Shape::Sphere { radius })
    }

    pub fn torus(major: f64, minor: f64) -> Self {
        Self::new(Shape::Torus { major, minor })
    }

    pub fn ellipsoid(semi_axes: [f64; 3]) -> Self {
        Self::new(Shape::Ellipsoid { semi_axes })
    }

    pub fn plane(normal: [f64; 3], offset: f64) -> Self {
        let n = Vec3::from(normal).normalize();
        Self::new(Shape::Plane {
            normal: [n.x, n.y, n.z],
            offset,
        })
    }

    fn new(shape: Shape) -> Self {
        Self {
            shape,
            shift: Vec3::zeros(),
        }
    }

    /// The same surface translated by `s`: `phi_new(x) = phi(x - s)`.
    pub fn shifted(&self, s: Vec3) -> Self {
        Self {
            shape: self.shape,
            shift: self.shift + s,
        }
    }

    /// Looks up a catalog surface by name with the default parameters used by the study runner.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "sphere" => Ok(Self::sphere(1.0)),
            "torus" => Ok(Self::torus(0.9, 0.3)),
            "ellipsoid" => Ok(Self::ellipsoid([1.1, 1.0, 0.8])),
            "plane" => Ok(Self::plane([1.0, 0.0, 0.0], 0.1)),
            other => Err(Error::InvalidInput(format!(
                "unknown surface '{other}' (expected sphere, torus, ellipsoid or plane)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.shape {
            Shape::Sphere { radius } => radius > 0.0,
            Shape::Torus { major, minor } => minor > 0.0 && major > minor,
            Shape::Ellipsoid { semi_axes } => semi_axes.iter().all(|&a| a > 0.0),
            Shape::Plane { normal, .. } => Vec3::from(normal).norm() > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid surface parameters {:?}", self.shape)))
        }
    }

    /// Characteristic length (radius, tube radius, smallest semi-axis).
    pub fn feature_size(&self) -> f64 {
        match self.shape {
            Shape::Sphere { radius } => radius,
            Shape::Torus { minor, .. } => minor,
            Shape::Ellipsoid { semi_axes } => semi_axes.iter().copied().fold(f64::INFINITY, f64::min),
            Shape::Plane { .. } => 1.0,
        }
    }

    pub fn phi(&self, x: &Vec3) -> f64 {
        let y = x - self.shift;
        match self.shape {
            Shape::Sphere { radius } => y.norm() - radius,
            Shape::Torus { major, minor } => {
                let rho = (y.x * y.x + y.y * y.y).sqrt();
                ((rho - major).powi(2) + y.z * y.z).sqrt() - minor
            }
            Shape::Ellipsoid { semi_axes: a } => {
                let q: f64 = (0..3).map(|i| (y[i] / a[i]).powi(2)).sum();
                0.5 * self.feature_size() * (q - 1.0)
            }
            Shape::Plane { normal, offset } => Vec3::from(normal).dot(&y) - offset,
        }
    }

    pub fn grad_phi(&self, x: &Vec3) -> Vec3 {
        let y = x - self.shift;
        match self.shape {
            Shape::Sphere { .. } => y / y.norm(),
            Shape::Torus { major, .. } => {
                let rho = (y.x * y.x + y.y * y.y).sqrt();
                let core = Vec3::new(major * y.x / rho, major * y.y / rho, 0.0);
                let d = y - core;
                d / d.norm()
            }
            Shape::Ellipsoid { semi_axes: a } => {
                let s = self.feature_size();
                Vec3::new(s * y.x / (a[0] * a[0]), s * y.y / (a[1] * a[1]), s * y.z / (a[2] * a[2]))
            }
            Shape::Plane { normal, .. } => Vec3::from(normal),
        }
    }

    /// Closest point `p(x)` on the surface.
    pub fn closest_point(&self, x: &Vec3) -> Vec3 {
        let y = x - self.shift;
        let p = match self.shape {
            Shape::Sphere { radius } => {
                let r = y.norm();
                if r == 0.0 {
                    Vec3::new(0.0, 0.0, radius)
                } else {
                    y * (radius / r)
                }
            }
            Shape::Torus { major, minor } => {
                let rho = (y.x * y.x + y.y * y.y).sqrt();
                let core = if rho == 0.0 {
                    Vec3::new(major, 0.0, 0.0)
                } else {
                    Vec3::new(major * y.x / rho, major * y.y / rho, 0.0)
                };
                let d = y - core;
                core + d * (minor / d.norm())
            }
            Shape::Ellipsoid { semi_axes } => ellipsoid_closest_point(&y, semi_axes),
            Shape::Plane { normal, offset } => {
                let n = Vec3::from(normal);
                y - n * (n.dot(&y) - offset)
            }
        };
        p + self.shift
    }

    /// Unit normal `n(x) = grad d(x)`, evaluated through the closest point.
    pub fn normal(&self, x: &Vec3) -> Vec3 {
        let g = self.grad_phi(&self.closest_point(x));
        g / g.norm()
    }

    /// Signed distance, negative inside.
    pub fn signed_distance(&self, x: &Vec3) -> f64 {
        let d = (x - self.closest_point(x)).norm();
        if self.phi(x) < 0.0 {
            -d
        } else {
            d
        }
    }

    /// Jacobian of the closest-point map.
    pub fn closest_point_jacobian(&self, x: &Vec3) -> Matrix3<f64> {
        match self.shape {
            Shape::Sphere { radius } => {
                let y = x - self.shift;
                let r = y.norm();
                let n = y / r;
                (Matrix3::identity() - n * n.transpose()) * (radius / r)
            }
            Shape::Plane { normal, .. } => {
                let n = Vec3::from(normal);
                Matrix3::identity() - n * n.transpose()
            }
            _ => {
                let h = 1e-6 * self.feature_size();
                let mut jac = Matrix3::zeros();
                for k in 0..3 {
                    let mut e = Vec3::zeros();
                    e[k] = h;
                    let col = (self.closest_point(&(x + e)) - self.closest_point(&(x - e))) / (2.0 * h);
                    jac.set_column(k, &col);
                }
                jac
            }
        }
    }
}

/// Closest point on the ellipsoid `sum (y_i/a_i)^2 = 1` by safeguarded Newton on
/// the Lagrange multiplier equation `sum (a_i y_i / (a_i^2 + t))^2 = 1`.
fn ellipsoid_closest_point(y: &Vec3, a: [f64; 3]) -> Vec3 {
    let f = |t: f64| -> (f64, f64) {
        let mut v = -1.0;
        let mut dv = 0.0;
        for i in 0..3 {
            let s = a[i] * a[i] + t;
            let q = a[i] * y[i] / s;
            v += q * q;
            dv += -2.0 * q * q / s;
        }
        (v, dv)
    };
    let amin2 = a.iter().map(|x| x * x).fold(f64::INFINITY, f64::min);
    let mut lo = -amin2 * (1.0 - 1e-14);
    let mut hi = 1.0;
    while f(hi).0 > 0.0 {
        hi *= 2.0;
        if hi > 1e12 {
            break;
        }
    }
    let mut t = if f(0.0).0 > 0.0 { 0.0 } else { 0.5 * (lo + 0.0) };
    for _ in 0..200 {
        let (v, dv) = f(t);
        if v.abs() < 1e-14 {
            break;
        }
        if v > 0.0 {
            lo = lo.max(t);
        } else {
            hi = hi.min(t);
        }
        let mut next = t - v / dv;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - t).abs() <= 1e-16 * (1.0 + t.abs()) {
            t = next;
            break;
        }
        t = next;
    }
    Vec3::new(
        y.x * a[0] * a[0] / (a[0] * a[0] + t),
        y.y * a[1] * a[1] / (a[1] * a[1] + t),
        y.z * a[2] * a[2] / (a[2] * a[2] + t),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn band_points(s: &AnalyticSurface, n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let band = 0.2 * s.feature_size();
        let mut out = Vec::new();
        while out.len() < n {
            let x = Vec3::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5))
                + s.shift;
            if s.signed_distance(&x).abs() <= band {
                out.push(x);
            }
        }
        out
    }

    fn catalog() -> Vec<AnalyticSurface> {
        vec![
            AnalyticSurface::sphere(1.0),
            AnalyticSurface::sphere(0.7).shifted(Vec3::new(0.1, -0.05, 0.02)),
            AnalyticSurface::torus(0.9, 0.3),
            AnalyticSurface::ellipsoid([1.1, 1.0, 0.8]),
        ]
    }

    #[test]
    fn closest_point_lies_on_surface() {
        for s in catalog() {
            for x in band_points(&s, 200, 3) {
                let p = s.closest_point(&x);
                assert!(s.phi(&p).abs() < 1e-10, "{:?}: {}", s.shape, s.phi(&p));
                // x - p is normal to the surface at p.
                let n = s.grad_phi(&p).normalize();
                let d = x - p;
                assert!((d - n * n.dot(&d)).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn gradient_bounded_below_in_band() {
        for s in catalog() {
            for x in band_points(&s, 200, 5) {
                assert!(s.grad_phi(&x).norm() >= 0.5);
            }
        }
    }

    #[test]
    fn sphere_projection_is_radial() {
        let s = AnalyticSurface::sphere(2.0);
        let x = Vec3::new(0.3, -1.7, 0.9);
        assert_eq!(s.closest_point(&x), x * (2.0 / x.norm()));
    }

    #[test]
    fn closest_point_jacobian_matches_differences() {
        let s = AnalyticSurface::sphere(1.0).shifted(Vec3::new(0.05, 0.0, 0.0));
        let x = Vec3::new(0.4, 0.6, 0.75);
        let jac = s.closest_point_jacobian(&x);
        let h = 1e-6;
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = h;
            let fd = (s.closest_point(&(x + e)) - s.closest_point(&(x - e))) / (2.0 * h);
            assert!((fd - jac.column(k)).norm() < 1e-8);
        }
    }

    #[test]
    fn plane_distance() {
        let s = AnalyticSurface::plane([1.0, 0.0, 0.0], 0.5);
        let x = Vec3::new(0.9, 0.2, 0.3);
        assert!((s.signed_distance(&x) - 0.4).abs() < 1e-15);
        assert_eq!(s.closest_point(&x), Vec3::new(0.5, 0.2, 0.3));
    }
}
