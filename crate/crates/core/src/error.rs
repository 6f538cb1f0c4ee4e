//! Crate-wide error type.
//!
//! Every fallible operation in this crate returns [`Error`]. The variants map
//! onto the failure classes of the public contracts: shape/congruence
//! violations, caller contract violations, numeric domain violations,
//! configuration problems, protocol violations, transport failures and wire
//! decode failures.

use thiserror::Error;

/// Unified error type for the whole crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes (or tree congruence) do not match the operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// A caller-side precondition was violated (empty batch, missing gradient,
    /// non-scalar loss, missing anchor, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numeric input is outside its valid domain (count level outside (0,1],
    /// all-zero reference volume, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration (unknown strategy, bad split, degenerate size, ...).
    #[error("config error: {0}")]
    Config(String),

    /// A peer sent a message that violates the federation protocol
    /// (incongruent upload, payload outside the shared partition, ...).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// The transport layer failed (connection refused, broken stream).
    /// Retriable: the protocol state is unchanged when this is returned.
    #[error("transport error: {0}")]
    Transport(String),

    /// A wire or checkpoint blob could not be decoded. `offset` is the byte
    /// position at which decoding failed.
    #[error("decode error at byte {offset}: {reason}")]
    Decode { offset: usize, reason: String },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }
    pub fn transport(msg: impl Into<String>) -> Self {
        Error::Transport(msg.into())
    }
    pub fn decode(offset: usize, reason: impl Into<String>) -> Self {
        Error::Decode {
            offset,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
