use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Input(String),

    /// A bracket endpoint did not have the sign the existence argument needs.
    #[error("hypothesis violated at {what}: f({lo}) = {f_lo}, f({hi}) = {f_hi}")]
    HypothesisViolation {
        what: &'static str,
        lo: f64,
        hi: f64,
        f_lo: f64,
        f_hi: f64,
    },

    #[error("solver did not reach tolerance {tol:e} (residual {residual:e})")]
    NotConverged { tol: f64, residual: f64 },

    #[error("non-finite loss or gradient at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("row span is degenerate (Gram condition number {condition:e})")]
    DegenerateSpan { condition: f64 },

    #[error("certificate unavailable: Hessian is singular (min |eigenvalue| = {min_abs_eigenvalue:e})")]
    CertificateUnavailable { min_abs_eigenvalue: f64 },

    #[error("finite-difference Hessian unreliable: symmetry residual {residual:e}")]
    NumericalWarning { residual: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
