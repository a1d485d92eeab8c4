//! Event-conditioned stock price forecasting pipeline.
//!
//! Frozen per-ticker forecasters produce n-step baseline predictions;
//! discrete price-change labels from a pluggable indicator provider drive
//! a learned stock-state head that amplifies or attenuates the baseline.

pub mod evalkit;
pub mod forecasters;
pub mod indicators;
pub mod labels;
pub mod market;
pub mod pipeline;
pub mod sentievent;
pub mod timel;
pub mod times;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Nd(#[from] ndcore::NdError),
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;
