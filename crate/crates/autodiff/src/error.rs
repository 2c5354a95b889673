use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("shape {shape:?} holds {expected} values but {actual} were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: index {index} out of range for {len} entries")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },

    #[error("gradient needs a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),

    #[error("non-finite gradient produced while differentiating {op}")]
    NonFiniteGradient { op: &'static str },

    #[error("function value is not finite when perturbing {param}[{index}]")]
    NonFiniteEvaluation { param: String, index: usize },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("{0}")]
    InvalidArgument(String),
}
