//! Full-band hybrid acoustic echo cancellation.
//!
//! The pipeline aligns the far-end reference with GCC-PHAT, removes the
//! linear echo with a partitioned-block frequency-domain Kalman filter and
//! suppresses the residual with a Taylor-style neural post-filter operating
//! on pseudo-QMF subbands.

pub mod error;
pub mod evaluate;
pub mod filterbank;
pub mod kalman;
pub mod kv;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod signal;
pub mod simulate;
pub mod tde;
pub mod tensor;
pub mod train;

pub use error::{AecError, Result};
