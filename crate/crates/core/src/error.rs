use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes shared by every computation path.
///
/// Variants split into two families: input validation (bad parameters, bad
/// files, unmet structural preconditions) and numeric failure (a computation
/// was attempted on valid input but a required condition does not hold).
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParams { field: String, reason: String },

    #[error("matrix is not skew-Hermitian (relative defect {defect:.3e})")]
    NotSkewHermitian { defect: f64 },

    #[error("eigendecomposition failed: {0}")]
    EigFailure(String),

    #[error("matrix is singular")]
    SingularMatrix,

    #[error("log-determinant has imaginary part {imag:.3e} above tolerance {tol:.3e}")]
    ImaginaryResidual { imag: f64, tol: f64 },

    #[error("matrix is not Hurwitz (spectral abscissa {abscissa:.6e})")]
    NotHurwitz { abscissa: f64 },

    #[error("Lyapunov solve residual {residual:.3e} exceeds tolerance {tol:.3e}")]
    IllConditioned { residual: f64, tol: f64 },

    #[error("controllability Gramian unavailable: A is not Hurwitz")]
    GramianUnavailable,

    #[error("resolvent is singular at frequency {lambda}")]
    SingularResolvent { lambda: f64 },

    #[error("admissibility grid too coarse: adjacent largest-eigenvalue ratio {ratio:.3} at frequency {lambda:.4e}")]
    GridTooCoarse { ratio: f64, lambda: f64 },

    #[error("risk sensitivity {theta} is not admissible (margin {margin:.6e})")]
    NotAdmissible { theta: f64, margin: f64 },

    #[error("tail bound cannot certify tolerance {tol:.3e} (required cutoff {required_cut:.3e})")]
    TailBoundFailure { tol: f64, required_cut: f64 },

    #[error("quadrature did not converge: estimated error {est_error:.3e} after {panels} panels")]
    QuadratureFailure { est_error: f64, panels: usize },

    #[error("pencil is singular at risk sensitivity {theta}")]
    SingularPencil { theta: f64 },

    #[error("Riccati solution blew up at risk sensitivity {theta} (norm {norm:.3e})")]
    BlowUp { theta: f64, norm: f64 },

    #[error("Hermitian drift {drift:.3e} exceeds limit {limit:.3e}")]
    HermitianDrift { drift: f64, limit: f64 },

    #[error("commutator operator has a near-zero eigenvalue (min |omega| = {min_abs_omega:.3e}, tolerance {tol:.3e})")]
    ZeroEigenvalue { min_abs_omega: f64, tol: f64 },

    #[error("spectral condition violated: theta * rho(PK) = {value:.6e} >= 1 (rho = {spectral_radius:.6e})")]
    SpectralConditionViolated { value: f64, spectral_radius: f64 },

    #[error("matrix Mho = B J B^T is singular")]
    SingularMho,

    #[error("weighting matrix S is not square and nonsingular")]
    NonSquareS,

    #[error("covariance factorization failed: {0}")]
    FactorizationFailure(String),

    #[error("Monte Carlo exponent overflowed ({0})")]
    DegenerateSamples(String),

    #[error("truncation too small: block error {larger:.3e} at the larger basis exceeds {smaller:.3e}")]
    TruncationTooSmall { smaller: f64, larger: f64 },
}

impl Error {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParams {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Machine-readable variant name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParams { .. } => "InvalidParams",
            Error::NotSkewHermitian { .. } => "NotSkewHermitian",
            Error::EigFailure(_) => "EigFailure",
            Error::SingularMatrix => "SingularMatrix",
            Error::ImaginaryResidual { .. } => "ImaginaryResidual",
            Error::NotHurwitz { .. } => "NotHurwitz",
            Error::IllConditioned { .. } => "IllConditioned",
            Error::GramianUnavailable => "GramianUnavailable",
            Error::SingularResolvent { .. } => "SingularResolvent",
            Error::GridTooCoarse { .. } => "GridTooCoarse",
            Error::NotAdmissible { .. } => "NotAdmissible",
            Error::TailBoundFailure { .. } => "TailBoundFailure",
            Error::QuadratureFailure { .. } => "QuadratureFailure",
            Error::SingularPencil { .. } => "SingularPencil",
            Error::BlowUp { .. } => "BlowUp",
            Error::HermitianDrift { .. } => "HermitianDrift",
            Error::ZeroEigenvalue { .. } => "ZeroEigenvalue",
            Error::SpectralConditionViolated { .. } => "SpectralConditionViolated",
            Error::SingularMho => "SingularMho",
            Error::NonSquareS => "NonSquareS",
            Error::FactorizationFailure(_) => "FactorizationFailure",
            Error::DegenerateSamples(_) => "DegenerateSamples",
            Error::TruncationTooSmall { .. } => "TruncationTooSmall",
        }
    }

    /// True for failures caused by malformed input rather than by the numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidParams { .. } | Error::SingularMho | Error::NonSquareS
        )
    }

    /// Field name associated with a validation failure, if any.
    pub fn field(&self) -> Option<&str> {
        match self {
            Error::InvalidParams { field, .. } => Some(field),
            _ => None,
        }
    }
}
