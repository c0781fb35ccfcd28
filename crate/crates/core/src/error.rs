use core::fmt;

pub type Result<T> = core::result::Result<T, CoreError>;

#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// An index (position, code id, span bound) fell outside its valid range.
    OutOfRange { what: &'static str, index: usize, bound: usize },
    /// Two shapes that must agree did not.
    ShapeMismatch { what: &'static str, expected: usize, got: usize },
    /// A NaN or infinity was found where finite values are required.
    NonFinite(&'static str),
    /// A parameter lies outside its admissible interval.
    InvalidParameter(&'static str),
    /// A required input was not supplied.
    Missing(&'static str),
    /// Custom spans overlap each other.
    OverlappingSpans { first: (usize, usize), second: (usize, usize) },
    /// Empty input where at least one element is needed.
    Empty(&'static str),
    /// A loss target is visible to the row that predicts it.
    Leakage { position: usize },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::OutOfRange { what, index, bound } => {
                write!(f, "{what} index {index} out of range (bound {bound})")
            }
            CoreError::ShapeMismatch { what, expected, got } => {
                write!(f, "{what}: expected {expected}, got {got}")
            }
            CoreError::NonFinite(what) => write!(f, "non-finite value in {what}"),
            CoreError::InvalidParameter(what) => write!(f, "invalid parameter: {what}"),
            CoreError::Missing(what) => write!(f, "missing input: {what}"),
            CoreError::OverlappingSpans { first, second } => write!(
                f,
                "spans {}..{} and {}..{} overlap",
                first.0, first.1, second.0, second.1
            ),
            CoreError::Empty(what) => write!(f, "empty input: {what}"),
            CoreError::Leakage { position } => {
                write!(f, "loss target at position {position} is an unmasked, visible token")
            }
        }
    }
}

#[cfg(any(test, feature = "std"))]
impl std::error::Error for CoreError {}
