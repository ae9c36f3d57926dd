//! Symmetric dual-tower training with input swapping, and IVF-Flat / IVF-PQ
//! indexes whose coarse structure is built in query-tower space.
//!
//! The crate is organised bottom-up:
//!
//! - [`linalg`] and [`rng`]: dense `f32` vectors/matrices, 64-bit accumulating
//!   kernels and a platform-stable seeded generator.
//! - [`encoder`]: linear and one-hidden-layer dual-tower models over a shared
//!   input space, so either tower can encode either kind of input.
//! - [`training`]: original, swap and total hinge losses, their analytic
//!   gradients, finite-difference checking, the SGD loop and the linear-model
//!   closed forms used for collapse analysis.
//! - [`diagnostics`]: alignment error, covariance anisotropy and ground-truth
//!   pair similarity statistics.
//! - [`clustering`], [`quantization`], [`index`]: k-means++/Lloyd, product
//!   quantization with ADC, and the two index build modes.
//! - [`eval`]: exact search oracle, IR metrics and the nprobe sweep.
//! - [`data_io`]: synthetic benchmark generator and binary/TSV file formats.

pub mod clustering;
mod codec;
pub mod data_io;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod index;
pub mod linalg;
pub mod quantization;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use linalg::{Mat32, Vec32};
pub use rng::Rng;
