use thiserror::Error;

/// Errors shared across the crate. Numerical routines return these instead
/// of panicking so callers (and the CLI) can distinguish bad inputs from
/// genuine numerical breakdown.
#[derive(Debug, Error)]
pub enum Error {
    /// A matrix that must be positive semidefinite has an eigenvalue below
    /// the tolerance used for clipping.
    #[error("matrix is not positive semidefinite (min eigenvalue {min_eig:.3e})")]
    NotPsd { min_eig: f64 },

    /// A non-finite value appeared where finite input is required.
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    /// An input lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The quadrature produced an unusable value (for example a vanishing
    /// normalizer in a posterior ratio).
    #[error("quadrature failure: {0}")]
    Quadrature(String),

    /// An importance-sampled estimate has too few effective samples.
    #[error("Monte Carlo estimate degenerate: effective sample size {ess:.1} of {n}")]
    McDegenerate { ess: f64, n: usize },

    /// The requested channel has zero observation variance in every
    /// direction, so the posterior is a point mass and no denoiser exists.
    #[error("degenerate channel: observation variance vanishes")]
    DegenerateChannel,

    /// An iterative estimator left the region where its state is meaningful.
    #[error("iteration diverged: {0}")]
    Diverged(String),

    /// A vector that must be normalized has (numerically) zero norm.
    #[error("zero norm in {context}")]
    ZeroNorm { context: &'static str },

    /// An iterative solver ran out of iterations before reaching tolerance.
    #[error("no convergence after {iters} iterations (residual {residual:.3e})")]
    NoConvergence { iters: usize, residual: f64 },

    /// Structurally invalid arguments (dimension mismatches and the like).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
