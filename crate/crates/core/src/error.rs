use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("singular machine: R^2 + X_d' X_q' = {0:e}")]
    SingularMachine(f64),

    #[error("terminal voltage magnitude must be positive, got {0}")]
    NonPositiveVoltage(f64),

    #[error("singular network matrix ({0})")]
    SingularNetwork(String),

    #[error("simulation diverged at t = {t:.6} s: {reason}")]
    Diverged { t: f64, reason: String },

    #[error("equilibrium search failed: {0}")]
    Equilibrium(String),

    #[error("sampling rate {rate} Hz exceeds the integration rate 1/h = {max} Hz")]
    SamplingRate { rate: f64, max: f64 },

    #[error("regressor extraction left a constant term {0:e} (inconsistent substitution)")]
    RegressorConstant(f64),

    #[error("closed-form regressor requires R = 0, got R = {0}")]
    NonzeroResistance(f64),

    #[error("estimator information matrix lost positive definiteness (min eigenvalue {0:e})")]
    NotPositiveDefinite(f64),

    #[error("signal `{name}` left its bound ({value:e} > {bound:e}) at t = {t:.6} s")]
    SignalBound {
        name: &'static str,
        value: f64,
        bound: f64,
        t: f64,
    },

    #[error("unit-norm constraint violated: theta1^2 + theta2^2 = {0}")]
    NotUnitNorm(f64),

    #[error("input `{name}` is not measured at t = {t:.6} s")]
    MissingInput { name: &'static str, t: f64 },

    #[error("empty record stream")]
    EmptyStream,

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: row {row}: {reason}")]
    CsvRow {
        path: String,
        row: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
