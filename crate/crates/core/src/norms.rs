//! Discretization errors on `Γ_h`, convergence orders and the report table.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::assembly::Discretization;
use crate::error::{Error, Result};
use crate::problem::ProblemSpec;

/// Squared error contributions per active tetrahedron: `(L2², H1², star²)`.
fn error_parts(
    disc: &Discretization,
    u: &[f64],
    problem: &ProblemSpec,
    degree: usize,
    deltas: Option<&[f64]>,
) -> Result<Vec<[f64; 3]>> {
    if u.len() != disc.n_active_dofs() {
        return Err(Error::InvalidInput(format!(
            "coefficient vector has length {}, expected {}",
            u.len(),
            disc.n_active_dofs()
        )));
    }
    (0..disc.cut.n_active())
        .into_par_iter()
        .map(|a| {
            let t = disc.cut.active_tets()[a];
            let geo = disc.space.geometry(t)?;
            let delta = deltas.map_or(0.0, |d| d[a]);
            let mut acc = [0.0; 3];
            for p in disc.surface_points(a, degree)? {
                let (uh, guh) = disc.eval_at(u, &p, &geo);
                let e = problem.exact(&p.x) - uh;
                let ge = p.projector * (problem.exact_grad(&p.x) - guh);
                let w = problem.convection(&p.x);
                acc[0] += p.weight * e * e;
                acc[1] += p.weight * ge.norm_squared();
                acc[2] += p.weight
                    * (problem.epsilon * ge.norm_squared()
                        + delta * w.dot(&ge).powi(2)
                        + problem.reaction * e * e);
            }
            Ok(acc)
        })
        .collect()
}

/// `‖u^e - u_h‖_{L²(Γ_h)}` and `‖P_h(∇u^e - ∇u_h)‖_{L²(Γ_h)}`, integrated with a rule of `degree`.
pub fn surface_errors(disc: &Discretization, u: &[f64], problem: &ProblemSpec, degree: usize) -> Result<(f64, f64)> {
    let parts = error_parts(disc, u, problem, degree, None)?;
    let l2: f64 = parts.iter().map(|p| p[0]).sum();
    let h1: f64 = parts.iter().map(|p| p[1]).sum();
    Ok((l2.sqrt(), h1.sqrt()))
}

/// Streamline norm `(ε‖∇_Γ e‖² + Σ_T δ_T‖w·∇_Γ e‖² + c‖e‖²)^{1/2}` of `e = u^e - u_h`.
pub fn star_norm(disc: &Discretization, u: &[f64], problem: &ProblemSpec, deltas: &[f64], degree: usize) -> Result<f64> {
    if deltas.len() != disc.cut.n_active() {
        return Err(Error::InvalidInput("one δ_T per active tetrahedron required".into()));
    }
    let parts = error_parts(disc, u, problem, degree, Some(deltas))?;
    Ok(parts.iter().map(|p| p[2]).sum::<f64>().sqrt())
}

/// One row of a study report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ErrorRecord {
    pub level: usize,
    pub h: f64,
    pub n_active: usize,
    pub err_l2: Option<f64>,
    pub err_h1: Option<f64>,
    pub err_star: Option<f64>,
    pub cond: Option<f64>,
    pub asm_ms: f64,
    pub solve_ms: f64,
    pub eta_global: Option<f64>,
    pub theta: Option<f64>,
}

/// `log(e1/e2) / log(h1/h2)`; `None` when an error is zero or missing, or `h` does not decrease.
pub fn eoc(e1: Option<f64>, e2: Option<f64>, h1: f64, h2: f64) -> Option<f64> {
    match (e1, e2) {
        (Some(a), Some(b)) if a > 0.0 && b > 0.0 && h1 > h2 && h2 > 0.0 => Some((a / b).ln() / (h1 / h2).ln()),
        _ => None,
    }
}

/// EOCs of L2, H1 and star errors for each level against its predecessor.
pub fn eoc_table(records: &[ErrorRecord]) -> Vec<[Option<f64>; 3]> {
    let mut out = vec![[None; 3]];
    for w in records.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        out.push([
            eoc(a.err_l2, b.err_l2, a.h, b.h),
            eoc(a.err_h1, b.err_h1, a.h, b.h),
            eoc(a.err_star, b.err_star, a.h, b.h),
        ]);
    }
    out.truncate(records.len());
    out
}

/// EOCs measured against `N^{-1/2}` (for adaptive meshes where `h` is not uniform).
pub fn eoc_by_dofs(e1: f64, e2: f64, n1: usize, n2: usize) -> Option<f64> {
    if e1 > 0.0 && e2 > 0.0 && n2 > n1 {
        Some((e1 / e2).ln() / (0.5 * (n2 as f64 / n1 as f64).ln()))
    } else {
        None
    }
}

pub const CSV_HEADER: &str = "level,h,n_active,err_l2,err_h1,err_star,eoc_l2,eoc_h1,eoc_star,cond,asm_ms,solve_ms";

/// Sentinel written for undefined entries.
pub const MISSING: &str = "-";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| MISSING.to_string(), |x| format!("{x:.6e}"))
}

fn fmt_eoc(v: Option<f64>) -> String {
    v.map_or_else(|| MISSING.to_string(), |x| format!("{x:.4}"))
}

/// Renders the report table. Timings are written only when `timings` is set,
/// so that reports are reproducible bit for bit by default.
pub fn render_csv(records: &[ErrorRecord], adaptive: bool, timings: bool) -> String {
    let mut s = String::from(CSV_HEADER);
    if adaptive {
        s.push_str(",eta_global,theta");
    }
    s.push('\n');
    for (r, e) in records.iter().zip(eoc_table(records)) {
        let time = |ms: f64| if timings { format!("{ms:.3}") } else { MISSING.to_string() };
        let _ = write!(
            s,
            "{},{:.6e},{},{},{},{},{},{},{},{},{},{}",
            r.level,
            r.h,
            r.n_active,
            fmt_opt(r.err_l2),
            fmt_opt(r.err_h1),
            fmt_opt(r.err_star),
            fmt_eoc(e[0]),
            fmt_eoc(e[1]),
            fmt_eoc(e[2]),
            fmt_opt(r.cond),
            time(r.asm_ms),
            time(r.solve_ms)
        );
        if adaptive {
            let _ = write!(s, ",{},{}", fmt_opt(r.eta_global), r.theta.map_or(MISSING.to_string(), |t| t.to_string()));
        }
        s.push('\n');
    }
    s
}
