//! Spatio-temporal traffic forecasting on road networks.
//!
//! The model couples two views of a window of recent traffic speeds:
//! a spatial view built from graph convolutions whose propagation matrix
//! is a learned point-wise-mutual-information transform of vertex
//! co-visit frequencies, and a temporal view built from multi-path 1-D
//! convolutions over the window whose outputs are blended by
//! prediction-time attention. A gated fusion combines the two into
//! multi-step speed forecasts. Training minimizes mean squared error
//! with Adam, optionally sharpened by an adversarial critic.
//!
//! Everything is computed in `f64` on a from-scratch reverse-mode
//! autodiff tape; runs are deterministic given a seed.

pub mod data;
pub mod error;
pub mod gan;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod spatial;
pub mod tape;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
