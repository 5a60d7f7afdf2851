//! Minimal CPU neural-network substrate with hand-written backprop.
//!
//! Everything is generic over [`scalar::Scalar`] so the same network code
//! trains in f32 and can be finite-difference-checked in f64.

pub mod attention;
pub mod checkpoint;
pub mod conv;
pub mod layers;
pub mod linear;
pub mod norm;
pub mod optim;
pub mod param;
pub mod rng;
pub mod scalar;

pub use param::{Layer, Mode, ParamSet};
pub use scalar::Scalar;
