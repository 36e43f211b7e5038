use thiserror::Error;

/// Errors produced by the trace finite element pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-conforming mesh: face {face:?} is shared by {count} tetrahedra")]
    NonConforming { face: [usize; 3], count: usize },

    /// An internal invariant was violated. Indicates a bug rather than bad input.
    #[error("internal consistency failure: {0}")]
    Consistency(String),

    #[error("surface not found: the discrete level set does not change sign")]
    SurfaceNotFound,

    #[error("degenerate cut: linear level set vanishes identically on tetrahedron {tet}")]
    DegenerateCut { tet: usize },

    #[error("surface topology error: {0}")]
    Topology(String),

    #[error("d_h search failed in tetrahedron {tet}: no sign change within |d| <= {delta:e}")]
    SearchFailed { tet: usize, delta: f64 },

    #[error("mesh too coarse for isoparametric map: det(DΘ_h) = {det:.3e} in tetrahedron {tet}")]
    MeshTooCoarse { tet: usize, det: f64 },

    #[error("singular isoparametric Jacobian in tetrahedron {tet}")]
    SingularMap { tet: usize },

    #[error("degenerate tetrahedron {tet}")]
    DegenerateElement { tet: usize },

    #[error("quadrature rule of degree {degree} unavailable (maximum is {max})")]
    RuleUnavailable { degree: usize, max: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
