use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate state: {0}")]
    DegenerateState(String),

    #[error("gamma_beta asymptote: |1 - s*eta*z' + (eta*z')^2| = {denominator:e}")]
    AsymptoteHit { denominator: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("non-finite values: {0}")]
    NonFinite(String),

    #[error("gradient norm {0:e} is too small")]
    ZeroGradient(f64),

    #[error("need at least {needed} probes, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("operator is not symmetric: u'Hv = {uhv:e}, v'Hu = {vhu:e}")]
    AsymmetricOperator { uhv: f64, vhu: f64 },

    #[error("Lanczos did not converge within {iterations} iterations")]
    NotConverged {
        iterations: usize,
        best: Box<crate::spectral::Spectrum>,
    },

    #[error("Lanczos broke down {restarts} times")]
    BreakdownLoop { restarts: usize },

    #[error("dense eigensolve failed: {0}")]
    EigensolveFailed(String),

    #[error("{}: bad magic {found:#010x}, expected {expected:#010x}", path.display())]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{}: truncated file ({detail})", path.display())]
    TruncatedFile { path: PathBuf, detail: String },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("requested {requested} samples but only {available} are available")]
    InsufficientData { requested: usize, available: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
