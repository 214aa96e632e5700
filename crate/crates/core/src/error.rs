use alloc::string::String;
use thiserror::Error;

/// Errors produced by the core algorithms. IO errors do not appear here;
/// everything in this crate operates on in-memory values.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch ({context}): {left:?} vs {right:?}")]
    ShapeMismatch {
        context: String,
        left: [usize; 3],
        right: [usize; 3],
    },

    /// Spatial extent incompatible with the subnet's downsampling ladder.
    #[error("axis {axis} has length {len}, not divisible by {divisor}")]
    Indivisible {
        axis: char,
        len: usize,
        divisor: usize,
    },

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A metric that has no defined value for the given inputs
    /// (e.g. surface distances of an empty mask).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn shape(context: impl Into<String>, left: [usize; 3], right: [usize; 3]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            left,
            right,
        }
    }
}
