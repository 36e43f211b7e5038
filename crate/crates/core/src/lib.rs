//! Trace finite elements for elliptic equations on implicitly defined surfaces.
//!
//! A tetrahedral mesh of a box is cut by a discrete zero level set, and the
//! finite element functions of the cut tetrahedra are restricted to the
//! discrete surface. Optional quadratic geometry comes from a local
//! deformation of the cut band ([`isomap`]). A volume or face stabilization
//! ([`assembly::StabKind`]) keeps the linear systems well conditioned.
//!
//! ```
//! use std::sync::Arc;
//! use tracefem::assembly::{assemble_system, Discretization, StabKind};
//! use tracefem::mesh::{build_box_mesh, BoxDomain};
//! use tracefem::problem::sphere_harmonic_problem;
//! use tracefem::solver::solve_system;
//!
//! let problem = sphere_harmonic_problem(1.0)?;
//! let mesh = Arc::new(build_box_mesh(BoxDomain::cube(-4.0 / 3.0, 4.0 / 3.0), 6)?);
//! let disc = Discretization::new(&problem.surface, mesh, 1, 1)?;
//! let system = assemble_system(&disc, &problem, StabKind::NormalVolume, 1.0)?;
//! assert!(solve_system(&system, 1e-10)?.converged());
//! # Ok::<(), tracefem::Error>(())
//! ```
//!
//! The guide in `book/` walks through each module; its code blocks run as
//! doc-tests of this crate.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod mesh;
pub mod quadrature;

pub use error::{Error, Result};
pub mod fe;
pub mod levelset;
pub mod surface;
pub mod isomap;
pub mod problem;
pub mod sparse;
pub mod assembly;
pub mod solver;
pub mod norms;
pub mod estimator;
pub mod vtk;
pub mod study;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/discretization.md")]
    mod discretization {}
    #[doc = include_str!("../../../book/src/conditioning.md")]
    mod conditioning {}
    #[doc = include_str!("../../../book/src/convection.md")]
    mod convection {}
    #[doc = include_str!("../../../book/src/adaptivity.md")]
    mod adaptivity {}
    #[doc = include_str!("../../../book/src/studies.md")]
    mod studies {}
}
