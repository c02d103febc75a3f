use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Incompatible shapes. The message names the offending axes.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A caller violated an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A function under evaluation produced NaN or infinity.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// Named tensor absent or ill-shaped when filling parameters.
    #[error("parameter `{name}`: {detail}")]
    Param { name: String, detail: String },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
