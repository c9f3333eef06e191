//! Numeric building blocks: dense matrices, reverse-mode autodiff, RNG
//! streams, the Adam optimizer, and matrix CSV I/O.

pub mod adam;
pub mod io;
pub mod matrix;
pub mod rng;
pub mod tape;
