//! Numerical laboratory for mean-field-game master equations on the torus.
//!
//! The crate discretizes the forward-backward HJB / Fokker-Planck system, builds the
//! value function `U(t, x, m)` from its solutions and checks monotonicity, regularity
//! and common-noise properties of that value function.

pub mod certify;
pub mod cli;
pub mod error;
pub mod mfg;
pub mod noise;
pub mod model;
pub mod torus;
pub mod valuefn;

pub use error::{Error, Result};
