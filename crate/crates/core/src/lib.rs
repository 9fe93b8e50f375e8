//! Difference-attention LSTM forecasting with cascaded error correction.
//!
//! The base network ([`attention::DaLstmModel`]) runs an LSTM over the input
//! window, appends squared first differences to every hidden state, and reads
//! an attention-weighted sum of those features. A second LSTM
//! ([`error_correction::EcLstmModel`]) predicts the base model's next residual
//! from its recent residuals, and the two outputs are added
//! ([`training::CascadeModel`]).

pub mod attention;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod error_correction;
pub mod forecaster;
pub mod lstm;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
pub use forecaster::Forecaster;
