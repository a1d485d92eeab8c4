//! Minimal deterministic numerical core: dense float64 tensors on a
//! reverse-mode differentiation tape, a handful of neural layers
//! (linear, embedding, GRU cell, multi-head attention), Adam, and a
//! versioned binary parameter container.
//!
//! Everything is float64 and single-threaded per training run. Parameter
//! snapshots loaded from disk are immutable and safe to share across
//! read-only inference workers.

mod adam;
mod layers;
mod serialize;
mod store;
mod tape;

pub use adam::AdamState;
pub use layers::{linear_forward, GruCell, MultiHeadAttention};
pub use serialize::{load_params, save_params, FORMAT_MAGIC, FORMAT_VERSION};
pub use store::{Param, ParamStore, Session};
pub use tape::{Tape, TensorId};

use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum NdError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parameter file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, NdError>;
