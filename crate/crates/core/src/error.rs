use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("fields live on different grids")]
    GridMismatch,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed snapshot: {0}")]
    Snapshot(String),

    #[error(
        "{what} did not converge after {iterations} iterations (relative residual {residual:.3e})"
    )]
    NotConverged {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("spectrum: {0}")]
    Spectrum(String),

    #[error("resonance data unreliable: {0}")]
    Resonance(String),

    #[error("value {value} outside the tabulated range [{min}, {max}]")]
    OutOfRange { value: f64, min: f64, max: f64 },

    #[error("degenerate frame: {0}")]
    DegenerateFrame(String),

    #[error("non-finite field value at t = {t}")]
    NonFinite { t: f64 },

    #[error("initial data outside the admissible class: {0}")]
    Predicate(String),

    #[error("integrator: {0}")]
    Integrator(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
