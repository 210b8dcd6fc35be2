//! Error type shared by the core crate.

use alloc::string::String;
use core::fmt;

/// Errors raised by tensor ops, model construction and PEFT surgery.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// A shape or value precondition was violated.
    Contract(String),
    /// A non-finite value appeared in the forward pass, with the op that
    /// produced it.
    NonFinite { op: &'static str },
    /// A PEFT spec was rejected (bad rank, empty subset, ...).
    InvalidSpec(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Contract(msg) => write!(f, "contract violation: {msg}"),
            CoreError::NonFinite { op } => {
                write!(f, "non-finite value produced by op `{op}`")
            }
            CoreError::InvalidSpec(msg) => write!(f, "invalid PEFT spec: {msg}"),
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
