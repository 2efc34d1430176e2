use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NewtonDivergence { iterations: usize, residual: f64 },

    #[error("singular Newton Jacobian at tilt {alpha} rad")]
    SingularJacobian { alpha: f64 },

    #[error("singular adjoint system (condition estimate {condition:e})")]
    SingularAdjointSystem { condition: f64 },

    #[error("integration failed at step {step}: {source}")]
    Integrator {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("shooting segment {segment} failed: {source}")]
    Segment {
        segment: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid value for `{field}`: {message}")]
    InvalidField { field: String, message: String },

    #[error("missing field `{0}`")]
    MissingField(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(field: &str, message: impl Into<String>) -> Self {
        Error::InvalidField {
            field: field.to_string(),
            message: message.into(),
        }
    }
}
