//! Error types shared across the crate.
//!
//! Policy: contract violations a caller can plausibly hit (bad shapes, bad
//! probabilities, malformed files) come back as `Err`; internal invariant
//! breaks panic via `assert!`.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two shapes that had to agree did not. Names both shapes.
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A numeric argument outside its documented domain.
    Domain(String),
    /// An operation called in a state that cannot serve it
    /// (e.g. backward before any train-mode forward).
    State(String),
    /// A structural constraint between values was violated
    /// (e.g. group masking requires equal keep probabilities).
    Constraint(String),
    /// An identifier (layer index, tensor name) that does not exist.
    Lookup(String),
    /// A request too large for the exhaustive path; the message names the fallback.
    TooLarge(String),
    /// Stratified sampling would select zero examples for a class.
    EmptyClass { class: usize },
    /// An operation that needs at least one value got none.
    EmptyInput(String),
    /// Batch statistics are undefined for this batch size.
    DegenerateBatch { batch: usize },
    /// Malformed IDX bytes.
    Idx(IdxError),
    /// A filesystem read or write failed; the message names the path.
    Io(String),
}

/// Distinct IDX parse failures, each carrying the byte offset it was detected at.
#[derive(Debug, Clone, PartialEq)]
pub enum IdxError {
    BadMagic { offset: usize, found: u32 },
    /// `what` names the structure being read, including its expected
    /// dimensionality for header reads.
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
        what: &'static str,
    },
    TrailingBytes { offset: usize, extra: usize },
    ZeroDimension { offset: usize, index: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::Domain(what) => write!(f, "domain error: {what}"),
            Error::State(what) => write!(f, "state error: {what}"),
            Error::Constraint(what) => write!(f, "constraint error: {what}"),
            Error::Lookup(what) => write!(f, "lookup error: {what}"),
            Error::TooLarge(what) => write!(f, "size error: {what}"),
            Error::EmptyClass { class } => {
                write!(f, "stratified subsample selects zero examples for class {class}")
            }
            Error::EmptyInput(what) => write!(f, "empty input: {what}"),
            Error::DegenerateBatch { batch } => {
                write!(f, "batch statistics undefined for batch of {batch} in train mode")
            }
            Error::Idx(e) => write!(f, "idx parse error: {e}"),
            Error::Io(what) => write!(f, "io error: {what}"),
        }
    }
}

impl fmt::Display for IdxError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IdxError::BadMagic { offset, found } => {
                write!(
                    f,
                    "bad magic 0x{found:08x} at byte {offset} (expected 0x00000803 images or 0x00000801 labels)"
                )
            }
            IdxError::Truncated { offset, needed, available, what } => {
                write!(
                    f,
                    "truncated {what} at byte {offset}: need {needed} bytes, have {available}"
                )
            }
            IdxError::TrailingBytes { offset, extra } => {
                write!(f, "{extra} trailing bytes past expected end at byte {offset}")
            }
            IdxError::ZeroDimension { offset, index } => {
                write!(f, "dimension {index} is zero at byte {offset}")
            }
        }
    }
}

impl std::error::Error for Error {}

impl From<IdxError> for Error {
    fn from(e: IdxError) -> Self {
        Error::Idx(e)
    }
}
