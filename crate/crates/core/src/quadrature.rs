//! Positive-weight quadrature rules on the reference triangle and tetrahedron.
//!
//! Rules are conical (collapsed-coordinate) products of a Gauss–Legendre rule
//! with Gauss–Jacobi rules, so every weight is positive and every point lies
//! strictly inside the reference simplex. The reference triangle is
//! `{x, y >= 0, x + y <= 1}` with measure 1/2, the reference tetrahedron
//! `{x, y, z >= 0, x + y + z <= 1}` with measure 1/6.

use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Highest polynomial degree for which a rule is provided.
pub const MAX_DEGREE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Triangle,
    Tetrahedron,
}

impl Domain {
    pub fn measure(self) -> f64 {
        match self {
            Domain::Triangle => 0.5,
            Domain::Tetrahedron => 1.0 / 6.0,
        }
    }
}

/// A quadrature rule on a reference simplex.
///
/// Points are stored as barycentric coordinates (3 for triangles, 4 for
/// tetrahedra, the unused slot is zero for triangles). Weights are in
/// reference-measure units, so they sum to [`Domain::measure`].
#[derive(Debug, Clone)]
pub struct QuadRule {
    pub domain: Domain,
    pub points: Vec<[f64; 4]>,
    pub weights: Vec<f64>,
    pub degree: usize,
}

impl QuadRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Reference Cartesian coordinates of point `i` (the trailing barycentric entries).
    pub fn reference_point(&self, i: usize) -> [f64; 3] {
        let b = &self.points[i];
        match self.domain {
            Domain::Triangle => [b[1], b[2], 0.0],
            Domain::Tetrahedron => [b[1], b[2], b[3]],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64; 4], f64)> + '_ {
        self.points.iter().zip(self.weights.iter().copied())
    }
}

/// Returns the cached rule on `domain` exact for polynomials of total degree `degree`.
pub fn get_rule(domain: Domain, degree: usize) -> Result<&'static QuadRule> {
    static TRI: OnceLock<Vec<QuadRule>> = OnceLock::new();
    static TET: OnceLock<Vec<QuadRule>> = OnceLock::new();
    if degree > MAX_DEGREE {
        return Err(Error::RuleUnavailable {
            degree,
            max: MAX_DEGREE,
        });
    }
    let table = match domain {
        Domain::Triangle => TRI.get_or_init(|| (0..=MAX_DEGREE).map(triangle_rule).collect()),
        Domain::Tetrahedron => TET.get_or_init(|| (0..=MAX_DEGREE).map(tetrahedron_rule).collect()),
    };
    Ok(&table[degree.max(1)])
}

fn points_for_degree(degree: usize) -> usize {
    (degree.max(1) + 2) / 2
}

fn triangle_rule(degree: usize) -> QuadRule {
    let n = points_for_degree(degree);
    let gu = gauss_jacobi_unit(n, 0);
    let gv = gauss_jacobi_unit(n, 1);
    let mut points = Vec::with_capacity(n * n);
    let mut weights = Vec::with_capacity(n * n);
    for &(v, wv) in &gv {
        for &(u, wu) in &gu {
            let x = u * (1.0 - v);
            let y = v;
            points.push([1.0 - x - y, x, y, 0.0]);
            weights.push(wu * wv);
        }
    }
    QuadRule {
        domain: Domain::Triangle,
        points,
        weights,
        degree: degree.max(1),
    }
}

fn tetrahedron_rule(degree: usize) -> QuadRule {
    let n = points_for_degree(degree);
    let gu = gauss_jacobi_unit(n, 0);
    let gv = gauss_jacobi_unit(n, 1);
    let gw = gauss_jacobi_unit(n, 2);
    let mut points = Vec::with_capacity(n * n * n);
    let mut weights = Vec::with_capacity(n * n * n);
    for &(w, ww) in &gw {
        for &(v, wv) in &gv {
            for &(u, wu) in &gu {
                let x = u * (1.0 - v) * (1.0 - w);
                let y = v * (1.0 - w);
                let z = w;
                points.push([1.0 - x - y - z, x, y, z]);
                weights.push(wu * wv * ww);
            }
        }
    }
    QuadRule {
        domain: Domain::Tetrahedron,
        points,
        weights,
        degree: degree.max(1),
    }
}

/// Gauss–Legendre rule on `[0, 1]` exact for polynomials of `degree`; weights sum to 1.
pub fn gauss_legendre_unit(degree: usize) -> Vec<(f64, f64)> {
    gauss_jacobi_unit(points_for_degree(degree), 0)
}

/// Gauss–Jacobi nodes and weights on `[0, 1]` for the weight `(1 - t)^alpha`,
/// computed with the Golub–Welsch eigenvalue method.
fn gauss_jacobi_unit(n: usize, alpha: u32) -> Vec<(f64, f64)> {
    let a = alpha as f64;
    // Jacobi polynomials on [-1, 1] with weight (1 - x)^a (1 + x)^0.
    let b = 0.0;
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        let kf = k as f64;
        let s = 2.0 * kf + a + b;
        jac[(k, k)] = if k == 0 {
            (b - a) / (a + b + 2.0)
        } else {
            (b * b - a * a) / (s * (s + 2.0))
        };
        if k + 1 < n {
            let k1 = kf + 1.0;
            let s1 = 2.0 * k1 + a + b;
            let num = 4.0 * k1 * (k1 + a) * (k1 + b) * (k1 + a + b);
            let den = s1 * s1 * (s1 + 1.0) * (s1 - 1.0);
            let off = (num / den).sqrt();
            jac[(k, k + 1)] = off;
            jac[(k + 1, k)] = off;
        }
    }
    // mu0 = int_{-1}^{1} (1-x)^a dx = 2^{a+1} / (a+1)
    let mu0 = 2f64.powf(a + 1.0) / (a + 1.0);
    let eig = SymmetricEigen::new(jac);
    let mut nodes: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let x = eig.eigenvalues[i];
            let v0 = eig.eigenvectors[(0, i)];
            let w = mu0 * v0 * v0;
            ((1.0 + x) / 2.0, w / 2f64.powf(a + 1.0))
        })
        .collect();
    nodes.sort_by(|p, q| p.0.total_cmp(&q.0));
    nodes
}

#[cfg(test)]
mod tests {
    use super::*;

    fn factorial(n: u32) -> f64 {
        (1..=n).map(|k| k as f64).product()
    }

    #[test]
    fn degree_one_triangle_is_centroid() {
        let rule = get_rule(Domain::Triangle, 1).unwrap();
        assert_eq!(rule.len(), 1);
        assert!((rule.weights[0] - 0.5).abs() < 1e-15);
        for c in &rule.points[0][..3] {
            assert!((c - 1.0 / 3.0).abs() < 1e-14);
        }
    }

    #[test]
    fn weights_positive_and_points_inside() {
        for domain in [Domain::Triangle, Domain::Tetrahedron] {
            for d in 1..=MAX_DEGREE {
                let rule = get_rule(domain, d).unwrap();
                let sum: f64 = rule.weights.iter().sum();
                assert!((sum - domain.measure()).abs() < 1e-14, "{domain:?} {d}: {sum}");
                assert!(rule.weights.iter().all(|&w| w > 0.0));
                for p in &rule.points {
                    assert!(p.iter().all(|&c| (0.0..=1.0).contains(&c)));
                }
            }
        }
    }

    #[test]
    fn triangle_monomials_exact() {
        for d in 1..=MAX_DEGREE {
            let rule = get_rule(Domain::Triangle, d).unwrap();
            for a in 0..=d as u32 {
                for b in 0..=(d as u32 - a) {
                    let exact = factorial(a) * factorial(b) / factorial(a + b + 2);
                    let approx: f64 = (0..rule.len())
                        .map(|i| {
                            let [x, y, _] = rule.reference_point(i);
                            rule.weights[i] * x.powi(a as i32) * y.powi(b as i32)
                        })
                        .sum();
                    assert!((approx - exact).abs() < 1e-13, "d={d} a={a} b={b}");
                }
            }
        }
    }

    #[test]
    fn tetrahedron_monomials_exact() {
        for d in 1..=MAX_DEGREE {
            let rule = get_rule(Domain::Tetrahedron, d).unwrap();
            for a in 0..=d as u32 {
                for b in 0..=(d as u32 - a) {
                    for c in 0..=(d as u32 - a - b) {
                        let exact =
                            factorial(a) * factorial(b) * factorial(c) / factorial(a + b + c + 3);
                        let approx: f64 = (0..rule.len())
                            .map(|i| {
                                let [x, y, z] = rule.reference_point(i);
                                rule.weights[i]
                                    * x.powi(a as i32)
                                    * y.powi(b as i32)
                                    * z.powi(c as i32)
                            })
                            .sum();
                        assert!((approx - exact).abs() < 1e-13, "d={d} ({a},{b},{c})");
                    }
                }
            }
        }
    }

    #[test]
    fn legendre_integrates_monomials() {
        for deg in 1..=9 {
            let rule = gauss_legendre_unit(deg);
            for p in 0..=deg {
                let q: f64 = rule.iter().map(|(x, w)| w * x.powi(p as i32)).sum();
                assert!((q - 1.0 / (p as f64 + 1.0)).abs() < 1e-14, "deg {deg} p {p}");
            }
        }
    }

    #[test]
    fn degree_above_cap_rejected() {
        assert!(matches!(
            get_rule(Domain::Triangle, 11),
            Err(Error::RuleUnavailable { degree: 11, .. })
        ));
    }

    #[test]
    fn affine_covariance_on_physical_tetrahedron() {
        // p(x) = x0^2 x1 + 3 x2 - 1 over a skewed tetrahedron, compared with the
        // degree-10 rule as reference on the same affine image.
        let verts = [[0.2, 0.1, -0.3], [1.4, 0.0, 0.2], [0.5, 1.1, 0.0], [0.3, 0.4, 0.9]];
        let p = |x: [f64; 3]| x[0] * x[0] * x[1] + 3.0 * x[2] - 1.0;
        let integrate = |rule: &QuadRule| {
            let e = |i: usize| [0, 1, 2].map(|k| verts[i][k] - verts[0][k]);
            let (e1, e2, e3) = (e(1), e(2), e(3));
            let det = e1[0] * (e2[1] * e3[2] - e2[2] * e3[1]) - e1[1] * (e2[0] * e3[2] - e2[2] * e3[0])
                + e1[2] * (e2[0] * e3[1] - e2[1] * e3[0]);
            rule.iter()
                .map(|(b, w)| {
                    let x = [0, 1, 2].map(|k| (0..4).map(|i| b[i] * verts[i][k]).sum::<f64>());
                    w * p(x) * det.abs()
                })
                .sum::<f64>()
        };
        let reference = integrate(get_rule(Domain::Tetrahedron, 10).unwrap());
        let cubic = integrate(get_rule(Domain::Tetrahedron, 3).unwrap());
        assert!((reference - cubic).abs() < 1e-12);
    }
}
