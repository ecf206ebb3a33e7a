//! Sensitivity-decoupled feature learning for JPEG compression artifacts
//! reduction.
//!
//! The crate trains two feature encoders over compressed/original image
//! pairs — one adversarially aligned so its features ignore compression,
//! one supervised by a quality-factor classifier so its features track
//! compression strength — and then trains a dual-guidance restoration
//! network that consumes both as decoding guidance. Everything runs on a
//! small CPU autodiff engine so training is reproducible bit-for-bit
//! under a fixed seed, and all channel widths can be shrunk uniformly
//! for desk-scale runs.

pub mod autodiff;
pub mod dagn;
pub mod encoders;
pub mod imaging;
pub mod metrics;
pub mod nn;
pub mod train;
