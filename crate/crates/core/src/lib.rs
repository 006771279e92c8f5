//! Resolution-aware retrieval-augmented zero-shot forecasting.
//!
//! A target station's short context is split into frequency bands with a
//! multilevel wavelet transform. Each band retrieves its own set of
//! reference stations (more stations for slower bands), an encoder–decoder
//! with a transfer component forecasts that band's coefficients, and the
//! bands are fused back with the inverse transform.
//!
//! Module map:
//!
//! - [`data`]: stations, CSV ingestion, synthetic fields, windows, splits
//! - [`retrieval`]: haversine distance, top-k retrieval, per-band plans
//! - [`multires`]: decimated orthonormal DWT and its inverse
//! - [`diff`]: reverse-mode autodiff, parameters, Adam, checkpoints
//! - [`model`]: location embedding, encoder, transfer components, decoder
//! - [`train`]: losses and the two-phase training procedure
//! - [`eval`]: metrics, baselines, correlation analysis, sweeps

pub mod data;
pub mod diff;
pub mod error;
pub mod eval;
pub mod model;
pub mod multires;
pub mod retrieval;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
