use std::path::PathBuf;

/// Errors raised anywhere in the solver stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("mass index {index} outside 1..={n_max}")]
    IndexOutOfRange { index: usize, n_max: usize },

    #[error("dimension {0} is not supported here")]
    UnsupportedDimension(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("kernel table is asymmetric at ({n},{m}): {forward} != {backward}")]
    AsymmetricKernel {
        n: usize,
        m: usize,
        forward: f64,
        backward: f64,
    },

    #[error("diffusion profile must be non-increasing, but d({next}) > d({n})", next = n + 1)]
    NotNonIncreasing { n: usize },

    #[error(
        "step too large: dt * 2 * sum_m alpha(n,m) f_m = {value} > 0.5 at cell {cell}, mass {n}"
    )]
    StepTooLarge { cell: usize, n: usize, value: f64 },

    #[error("non-finite density at t = {t}: mass {n}, cell {cell}")]
    NonFinite { t: f64, n: usize, cell: usize },

    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("cannot sample from an identically zero field")]
    EmptyField,

    #[error("{path}:{line}: key `{key}`: {msg}")]
    Config {
        path: PathBuf,
        line: usize,
        key: String,
        msg: String,
    },

    #[error("{path}:{line}: {msg}")]
    Csv {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
