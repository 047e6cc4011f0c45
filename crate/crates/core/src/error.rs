//! Crate-wide error type.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Input data violated a precondition (non-finite value, empty set, ...).
    InvalidInput(String),
    /// Shape or dimension mismatch between two values that must agree.
    ShapeMismatch(String),
    /// A token fell outside the configured vocabulary.
    TokenOutOfRange { token: u16, vocab: usize },
    /// A numeric quantity became non-finite; carries the offending block name.
    NonFinite(String),
    /// Configuration failed validation.
    Config(String),
    /// Checkpoint/manifest digest mismatch.
    DigestMismatch { expected: String, found: String },
    Io(std::io::Error),
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidInput(m) => write!(f, "invalid input: {m}"),
            Error::ShapeMismatch(m) => write!(f, "shape mismatch: {m}"),
            Error::TokenOutOfRange { token, vocab } => {
                write!(f, "token {token} out of range for vocabulary of {vocab}")
            }
            Error::NonFinite(block) => write!(f, "non-finite value in {block}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::DigestMismatch { expected, found } => {
                write!(f, "manifest digest mismatch: checkpoint has {expected}, dataset has {found}")
            }
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Serde(m) => write!(f, "serialization error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
