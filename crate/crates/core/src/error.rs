use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid risk level {0}: must lie in (0, 1]")]
    InvalidRiskLevel(f64),

    #[error("collision cone undefined: |p_rel| = {distance} <= r_safe = {r_safe}")]
    ConeDomain { distance: f64, r_safe: f64 },

    #[error("inadmissible control ({ax}, {ay}): per-axis limit is {a_max}")]
    InadmissibleControl { ax: f64, ay: f64, a_max: f64 },

    #[error("invalid value for `{field}`: {reason}")]
    Invariant { field: String, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invariant(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invariant {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
