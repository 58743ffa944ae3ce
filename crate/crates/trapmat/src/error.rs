//! Crate-wide error taxonomy.

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Operand shapes do not agree for the named operation.
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A matrix or entry list failed structural validation.
    InvalidMatrix(String),
    /// A parameter is outside its legal range.
    Parameter(String),
    /// Security table file is missing, malformed, or has no matching row.
    Config(String),
    /// Delegation does not beat computing locally at this size.
    LocalComputeAdvised { n: usize, nu: usize },
    /// State machine method called out of order.
    Phase {
        expected: &'static str,
        got: &'static str,
    },
    /// Message session id does not match the session it was delivered to.
    SessionMismatch,
    /// Message kind or payload is not valid for the current state.
    MalformedMessage(String),
    /// Wire bytes could not be decoded; offset is from the start of the frame.
    Decode { offset: u64, detail: String },
    /// Underlying byte transport failed or closed mid-round.
    Transport(String),
    /// A server reply failed a correctness check; the session is torn down.
    DishonestServer { stage: &'static str },
    /// Targeted generator has no blocks left; refill with a new delegated batch.
    GeneratorExhausted,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => write!(
                f,
                "{op}: shapes {}x{} and {}x{} do not agree",
                left.0, left.1, right.0, right.1
            ),
            Error::InvalidMatrix(msg) => write!(f, "invalid matrix: {msg}"),
            Error::Parameter(msg) => write!(f, "invalid parameter: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::LocalComputeAdvised { n, nu } => write!(
                f,
                "delegation not beneficial at n = {n} (minimum useful dimension {nu}); \
                 compute the product locally"
            ),
            Error::Phase { expected, got } => {
                write!(f, "protocol phase error: expected {expected}, state is {got}")
            }
            Error::SessionMismatch => write!(f, "message session id does not match"),
            Error::MalformedMessage(msg) => write!(f, "malformed message: {msg}"),
            Error::Decode { offset, detail } => {
                write!(f, "decode error at byte {offset}: {detail}")
            }
            Error::Transport(msg) => write!(f, "transport error: {msg}"),
            Error::DishonestServer { stage } => {
                write!(f, "server failed the {stage} check; session aborted")
            }
            Error::GeneratorExhausted => {
                write!(f, "targeted generator exhausted; delegate a new batch to refill")
            }
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Transport(e.to_string())
    }
}
