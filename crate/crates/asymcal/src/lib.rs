//! Post-training quantization engine for desk-scale models.
//!
//! The crate quantizes linear-layer weights one layer at a time using a
//! second-order compensation loop: quantize a column, then adjust the
//! remaining columns to cancel the output error. Two calibration
//! objectives are supported, a symmetric one that matches the layer's own
//! quantized-input output, and an asymmetric one that matches the
//! full-precision stream's output, which stops error from compounding
//! across layers. Brute-force oracles, a toy-model pipeline, and a kernel
//! benchmark harness back the fast paths.

pub mod bench;
pub mod engine;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod pipeline;
pub mod quantizer;
pub mod report;
pub mod tensor;
pub mod toymodel;

pub use error::{Error, Result};
pub use tensor::{Dtype, Matrix, Seed};
