use alloc::string::String;
use alloc::vec::Vec;

/// Errors surfaced by the public operations of this crate.
///
/// Graph primitives assume validated shapes and panic on misuse; every
/// module-level entry point checks its inputs and reports one of these.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("transmission below {t_min} on {fraction:.4} of pixels")]
    DegenerateTransmission { t_min: f64, fraction: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("adapter error: {0}")]
    Adapter(String),
    #[error("lookup error: no entry for {0:?}")]
    Lookup(String),
    #[error("no task matches instruction {instruction:?}; known tasks: {known:?}")]
    Routing {
        instruction: String,
        known: Vec<String>,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
