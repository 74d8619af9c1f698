//! Covariance-based joint activity and data detection for massive random
//! access with massive MIMO.
//!
//! The library simulates the uplink system model (devices transmitting
//! preassigned non-orthogonal signature sequences over a Rayleigh fading
//! channel), evaluates the log-det maximum-likelihood objective over the
//! nonnegative sequence powers, and solves it with an active-set spectral
//! projected-gradient algorithm alongside coordinate-descent and
//! oracle-support baselines.

pub mod container;
pub mod detection;
pub mod harness;
pub mod model;
pub mod objective;
pub mod solvers;
pub mod validate;

/// Double-precision complex scalar used throughout.
pub type C64 = nalgebra::Complex<f64>;

/// Dense complex matrix.
pub type CMatrix = nalgebra::DMatrix<C64>;

/// Dense complex vector.
pub type CVector = nalgebra::DVector<C64>;

/// Dense real vector.
pub type RVector = nalgebra::DVector<f64>;
