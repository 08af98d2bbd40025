use thiserror::Error;

/// Unified error type for the whole crate.
///
/// Variants are grouped by layer: case/config ingestion, network topology,
/// numerical solvers, and simulation orchestration. `AtTick` wraps a solver
/// error with the simulation tick at which it occurred so a six-hour run that
/// dies half-way through is diagnosable.
#[derive(Debug, Error)]
pub enum Error {
    #[error("case parse error at line {line}: {msg}")]
    CaseParse { line: usize, msg: String },

    #[error("config error at line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("topology error: {0}")]
    Topology(String),

    #[error("observability error: {0}")]
    Observability(String),

    #[error("power flow diverged after {iterations} iterations (max mismatch {mismatch:.3e} pu)")]
    PowerFlowDiverged { iterations: usize, mismatch: f64 },

    #[error("WLS did not converge after {iterations} iterations (last step norm {step_norm:.3e})")]
    NonConvergence { iterations: usize, step_norm: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("simulation failed at tick {tick}: {source}")]
    AtTick {
        tick: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Attach tick context to a solver error bubbling out of the timeline.
    pub fn at_tick(self, tick: u64) -> Error {
        Error::AtTick {
            tick,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
