//! Jacobi-preconditioned Krylov solvers and a Lanczos condition estimator.

use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assembly::{FormKind, TraceSystem};
use crate::error::{Error, Result};
use crate::sparse::{dot, norm2, CsrMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    Breakdown,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Final true relative residual `‖b - Ax‖ / ‖b‖`.
    pub residual: f64,
    pub status: SolveStatus,
    pub elapsed_ms: f64,
    /// `½ xᵀAx - bᵀx` after every CG iteration (empty for BiCGStab).
    pub energy: Vec<f64>,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

fn jacobi(a: &CsrMatrix) -> Vec<f64> {
    a.diagonal()
        .into_iter()
        .map(|d| if d.abs() > 0.0 { 1.0 / d } else { 1.0 })
        .collect()
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn true_residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
    let ax = a.mul_vec(x);
    let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    norm2(&r)
}

fn check_dims(a: &CsrMatrix, b: &[f64]) -> Result<()> {
    if a.nrows() != a.ncols() || a.nrows() != b.len() {
        return Err(Error::InvalidInput(format!(
            "system of size {}x{} with rhs of length {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    Ok(())
}

/// Jacobi-preconditioned conjugate gradients from a zero initial guess.
pub fn solve_cg(a: &CsrMatrix, b: &[f64], tol: f64, maxit: usize) -> Result<SolveReport> {
    check_dims(a, b)?;
    check_finite(b, "right-hand side")?;
    let start = Instant::now();
    let n = b.len();
    let bnorm = norm2(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(SolveReport {
            x,
            iterations: 0,
            residual: 0.0,
            status: SolveStatus::Converged,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
            energy: Vec::new(),
        });
    }
    let dinv = jacobi(a);
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&dinv).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut energy = Vec::new();
    let mut fx = 0.0;
    let mut status = SolveStatus::MaxIterations;
    let mut it = 0;
    while it < maxit {
        if norm2(&r) <= tol * bnorm {
            status = SolveStatus::Converged;
            break;
        }
        a.mul_vec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        check_finite(&ap, "conjugate gradient iterate")?;
        if !(pap > 0.0) {
            status = SolveStatus::Breakdown;
            break;
        }
        let alpha = rz / pap;
        // f(x + αp) - f(x) = -α rᵀp + ½α² pᵀAp, and rᵀp = rᵀz.
        fx += -alpha * rz + 0.5 * alpha * alpha * pap;
        energy.push(fx);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * dinv[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        it += 1;
    }
    check_finite(&x, "conjugate gradient solution")?;
    let residual = true_residual(a, &x, b) / bnorm;
    if status == SolveStatus::MaxIterations && residual <= tol {
        status = SolveStatus::Converged;
    }
    Ok(SolveReport {
        x,
        iterations: it,
        residual,
        status,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        energy,
    })
}

/// Right Jacobi-preconditioned BiCGStab from a zero initial guess.
pub fn solve_bicgstab(a: &CsrMatrix, b: &[f64], tol: f64, maxit: usize) -> Result<SolveReport> {
    check_dims(a, b)?;
    check_finite(b, "right-hand side")?;
    let start = Instant::now();
    let n = b.len();
    let bnorm = norm2(b);
    let mut x = vec![0.0; n];
    let finish = |x: Vec<f64>, iterations, status, start: Instant| -> Result<SolveReport> {
        check_finite(&x, "BiCGStab solution")?;
        let residual = if bnorm == 0.0 { 0.0 } else { true_residual(a, &x, b) / bnorm };
        let status = if status != SolveStatus::Converged && residual <= tol {
            SolveStatus::Converged
        } else {
            status
        };
        Ok(SolveReport {
            x,
            iterations,
            residual,
            status,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
            energy: Vec::new(),
        })
    };
    if bnorm == 0.0 {
        return finish(x, 0, SolveStatus::Converged, start);
    }
    let dinv = jacobi(a);
    let mut r = b.to_vec();
    let r0 = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut phat = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut shat = vec![0.0; n];
    let mut t = vec![0.0; n];
    for it in 0..maxit {
        if norm2(&r) <= tol * bnorm {
            return finish(x, it, SolveStatus::Converged, start);
        }
        let rho_new = dot(&r0, &r);
        if rho_new == 0.0 || omega == 0.0 {
            return finish(x, it, SolveStatus::Breakdown, start);
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
            phat[i] = p[i] * dinv[i];
        }
        a.mul_vec_into(&phat, &mut v);
        check_finite(&v, "BiCGStab iterate")?;
        let r0v = dot(&r0, &v);
        if r0v == 0.0 {
            return finish(x, it, SolveStatus::Breakdown, start);
        }
        alpha = rho / r0v;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm2(&s) <= tol * bnorm {
            for i in 0..n {
                x[i] += alpha * phat[i];
            }
            return finish(x, it + 1, SolveStatus::Converged, start);
        }
        for i in 0..n {
            shat[i] = s[i] * dinv[i];
        }
        a.mul_vec_into(&shat, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * phat[i] + omega * shat[i];
            r[i] = s[i] - omega * t[i];
        }
    }
    finish(x, maxit, SolveStatus::MaxIterations, start)
}

/// Solves an assembled system with CG when it is symmetric and BiCGStab otherwise.
pub fn solve_system(sys: &TraceSystem, tol: f64) -> Result<SolveReport> {
    let maxit = (4 * sys.dim()).max(1000);
    match sys.form {
        FormKind::LaplaceBeltrami => solve_cg(&sys.matrix, &sys.rhs, tol, maxit),
        FormKind::ConvectionDiffusion => solve_bicgstab(&sys.matrix, &sys.rhs, tol, maxit),
    }
}

/// Extreme eigenvalue estimates of the Jacobi-scaled matrix `D^{-1/2} A D^{-1/2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CondEstimate {
    pub lambda_max: f64,
    /// Smallest Ritz value outside the detected kernel.
    pub lambda_min: f64,
    pub steps: usize,
    /// Ritz values below `1e-10 λ_max`.
    pub kernel_dim: usize,
    /// Dofs with non-positive diagonal, left out of the scaled matrix.
    pub excluded: usize,
    /// Residual bound of the smallest Ritz pair is below 1% of its value.
    pub reliable: bool,
}

impl CondEstimate {
    pub fn condition(&self) -> f64 {
        self.lambda_max / self.lambda_min
    }

    pub fn singular(&self) -> bool {
        self.kernel_dim > 0
    }
}

/// Lanczos steps used by [`estimate_condition`].
pub const LANCZOS_STEPS: usize = 200;

/// Relative threshold for kernel Ritz values.
pub const KERNEL_THRESHOLD: f64 = 1e-10;

/// Lanczos with full reorthogonalization on the Jacobi-scaled matrix.
pub fn estimate_condition(a: &CsrMatrix, seed: u64) -> Result<CondEstimate> {
    estimate_condition_with(a, seed, LANCZOS_STEPS)
}

pub fn estimate_condition_with(a: &CsrMatrix, seed: u64, steps: usize) -> Result<CondEstimate> {
    if a.nrows() != a.ncols() {
        return Err(Error::InvalidInput("condition estimate needs a square matrix".into()));
    }
    let diag = a.diagonal();
    let keep: Vec<usize> = (0..diag.len()).filter(|&i| diag[i] > 0.0).collect();
    let excluded = diag.len() - keep.len();
    let n = keep.len();
    if n == 0 {
        return Err(Error::InvalidInput("matrix has no positive diagonal entries".into()));
    }
    let scale: Vec<f64> = keep.iter().map(|&i| 1.0 / diag[i].sqrt()).collect();
    let apply = |x: &[f64], y: &mut [f64]| {
        let mut xf = vec![0.0; diag.len()];
        for (k, &i) in keep.iter().enumerate() {
            xf[i] = x[k] * scale[k];
        }
        let yf = a.mul_vec(&xf);
        for (k, &i) in keep.iter().enumerate() {
            y[k] = yf[i] * scale[k];
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = steps.min(n);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut alphas = Vec::with_capacity(steps);
    let mut betas: Vec<f64> = Vec::with_capacity(steps);
    let mut q = random_orthogonal(&mut rng, n, &basis).ok_or(Error::Consistency("Lanczos start failed".into()))?;
    let mut w = vec![0.0; n];
    let mut restarts = 0;
    let mut norm_est: f64 = 0.0;
    while basis.len() < steps {
        apply(&q, &mut w);
        if !w.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Lanczos vector".into()));
        }
        let alpha = dot(&q, &w);
        basis.push(q.clone());
        alphas.push(alpha);
        norm_est = norm_est.max(alpha.abs());
        // Full reorthogonalization, two passes of classical Gram–Schmidt.
        for _ in 0..2 {
            for v in &basis {
                let c = dot(v, &w);
                for i in 0..n {
                    w[i] -= c * v[i];
                }
            }
        }
        if basis.len() == steps {
            break;
        }
        let beta = norm2(&w);
        norm_est = norm_est.max(beta);
        if beta <= 1e-12 * norm_est.max(f64::MIN_POSITIVE) {
            // Invariant subspace: restart with a fresh direction, uncoupled.
            if restarts == 3 || basis.len() == n {
                break;
            }
            match random_orthogonal(&mut rng, n, &basis) {
                Some(v) => {
                    q = v;
                    betas.push(0.0);
                    restarts += 1;
                }
                None => break,
            }
        } else {
            for i in 0..n {
                q[i] = w[i] / beta;
            }
            betas.push(beta);
        }
    }
    let m = alphas.len();
    let mut t = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alphas[i];
        if i + 1 < m {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    let last_beta = norm2(&w);
    let eig = SymmetricEigen::new(t);
    let mut pairs: Vec<(f64, f64)> = (0..m)
        .map(|i| (eig.eigenvalues[i], (last_beta * eig.eigenvectors[(m - 1, i)]).abs()))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let lambda_max = pairs.last().map(|p| p.0).unwrap_or(0.0);
    if !(lambda_max > 0.0) {
        return Err(Error::Consistency("Lanczos produced no positive Ritz value".into()));
    }
    let kernel_dim = pairs.iter().filter(|p| p.0 < KERNEL_THRESHOLD * lambda_max).count();
    let (lambda_min, bound) = pairs
        .iter()
        .find(|p| p.0 >= KERNEL_THRESHOLD * lambda_max)
        .copied()
        .unwrap_or((lambda_max, 0.0));
    Ok(CondEstimate {
        lambda_max,
        lambda_min,
        steps: m,
        kernel_dim,
        excluded,
        reliable: bound <= 1e-2 * lambda_min,
    })
}

fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    for _ in 0..3 {
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for _ in 0..2 {
            for b in basis {
                let c = dot(b, &v);
                for i in 0..n {
                    v[i] -= c * b[i];
                }
            }
        }
        let nv = norm2(&v);
        if nv > 1e-8 {
            v.iter_mut().for_each(|x| *x /= nv);
            return Some(v);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::TripletBuilder;

    fn laplace_1d(n: usize, shift: f64) -> CsrMatrix {
        let mut b = TripletBuilder::new(n, n);
        for i in 0..n {
            b.push(i, i, 2.0 + shift);
            if i > 0 {
                b.push(i, i - 1, -1.0);
                b.push(i - 1, i, -1.0);
            }
        }
        b.build()
    }

    #[test]
    fn identity_in_one_iteration() {
        let a = CsrMatrix::identity(5);
        let b = vec![1.0, -2.0, 3.0, 0.5, 4.0];
        let rep = solve_cg(&a, &b, 1e-12, 10).unwrap();
        assert_eq!(rep.iterations, 1);
        assert_eq!(rep.x, b);
    }

    #[test]
    fn diagonal_system() {
        let d = [1.0, 2.0, 3.0, 10.0, 0.5];
        let a = CsrMatrix::from_dense(&DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&d)));
        let b = vec![0.3, -0.7, 1.1, 2.0, -3.0];
        let rep = solve_cg(&a, &b, 1e-14, 10).unwrap();
        for i in 0..5 {
            assert!((rep.x[i] - b[i] / d[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn cg_energy_decreases() {
        let a = laplace_1d(200, 0.01);
        let b: Vec<f64> = (0..200).map(|i| ((i * 7 % 13) as f64).sin()).collect();
        let rep = solve_cg(&a, &b, 1e-10, 1000).unwrap();
        assert!(rep.converged());
        assert!(rep.residual <= 1e-10);
        for w in rep.energy.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0].abs());
        }
    }

    #[test]
    fn bicgstab_nonsymmetric() {
        let n = 100;
        let mut b = TripletBuilder::new(n, n);
        for i in 0..n {
            b.push(i, i, 3.0);
            if i > 0 {
                b.push(i, i - 1, -1.5);
            }
            if i + 1 < n {
                b.push(i, i + 1, -0.5);
            }
        }
        let a = b.build();
        let rhs: Vec<f64> = (0..n).map(|i| (i as f64).cos()).collect();
        let rep = solve_bicgstab(&a, &rhs, 1e-12, 500).unwrap();
        assert!(rep.converged());
        let x = a.to_dense().lu().solve(&nalgebra::DVector::from_column_slice(&rhs)).unwrap();
        for i in 0..n {
            assert!((rep.x[i] - x[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_rhs_rejected() {
        let a = CsrMatrix::identity(2);
        assert!(matches!(solve_cg(&a, &[1.0, f64::NAN], 1e-10, 10), Err(Error::NonFinite(_))));
    }

    #[test]
    fn max_iterations_is_a_status() {
        let a = laplace_1d(100, 0.0);
        let b = vec![1.0; 100];
        let rep = solve_cg(&a, &b, 1e-14, 3).unwrap();
        assert_eq!(rep.status, SolveStatus::MaxIterations);
    }

    #[test]
    fn jacobi_scaling_normalizes_diagonal() {
        let a = CsrMatrix::from_dense(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 4.0]));
        let c = estimate_condition(&a, 1).unwrap();
        assert!((c.condition() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_spd_matches_dense_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 50;
        let g = DMatrix::<f64>::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let spd = &g * g.transpose() + DMatrix::<f64>::identity(n, n) * 0.5;
        let c = estimate_condition(&CsrMatrix::from_dense(&spd), 3).unwrap();
        let d: Vec<f64> = (0..n).map(|i| 1.0 / spd[(i, i)].sqrt()).collect();
        let scaled = DMatrix::from_fn(n, n, |i, j| spd[(i, j)] * d[i] * d[j]);
        let ev = SymmetricEigen::new(scaled).eigenvalues;
        let exact = ev.max() / ev.min();
        assert!((c.condition() / exact - 1.0).abs() <= 0.05, "{} {}", c.condition(), exact);
    }

    #[test]
    fn kernel_detected() {
        // Graph Laplacian of a path: constants span the kernel.
        let n = 30;
        let mut b = TripletBuilder::new(n, n);
        for i in 0..n - 1 {
            b.push(i, i, 1.0);
            b.push(i + 1, i + 1, 1.0);
            b.push(i, i + 1, -1.0);
            b.push(i + 1, i, -1.0);
        }
        let c = estimate_condition(&b.build(), 5).unwrap();
        assert_eq!(c.kernel_dim, 1);
        assert!(c.lambda_min > 0.0);
    }

    #[test]
    fn deterministic_given_seed() {
        let a = laplace_1d(400, 0.001);
        assert_eq!(estimate_condition(&a, 9).unwrap(), estimate_condition(&a, 9).unwrap());
    }
}
