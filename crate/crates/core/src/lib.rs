//! Desk-scale laboratory for centralized uplink equalization in cell-free
//! multi-user MIMO with capacity-limited fronthaul.
//!
//! The crate simulates the full uplink chain — correlated Rayleigh channels,
//! pilot and data transmission, per-AP low-resolution quantization — and
//! provides two centralized equalizers operating on the quantized signals:
//!
//! * a Bussgang-linearized LMMSE baseline ([`lmmse`]), and
//! * an in-context-learning transformer ([`model`]) that reads a prompt of
//!   large-scale fading tokens, pilot context pairs, and the received data
//!   signal ([`prompt`]), trained offline over many random tasks ([`train`]).
//!
//! [`eval`] runs Monte-Carlo MSE comparisons between the two.

pub mod channel;
pub mod data;
pub mod error;
pub mod eval;
pub mod frame;
pub mod linalg;
pub mod lmmse;
pub mod model;
pub mod prompt;
pub mod quant;
pub mod seed;
pub mod train;

pub use error::{Error, Result};

/// Complex scalar used throughout the simulation chain.
pub type C64 = num_complex::Complex<f64>;

/// Complex matrix / vector aliases (dynamic dimensions).
pub type CMat = nalgebra::DMatrix<C64>;
pub type CVec = nalgebra::DVector<C64>;
