//! Tchebichef transform domain super-resolution.
//!
//! The crate is organised bottom-up:
//!
//! * [`tcheb`]: orthonormal Tchebichef polynomials, moment transforms and
//!   the 64-kernel transform layer.
//! * [`autodiff`]: a tape-based reverse-mode engine with the handful of
//!   operators the network needs, Adam and Glorot initialisation.
//! * [`network`]: the transform-domain super-resolution model.
//! * [`data`]: image I/O, colour conversion, bicubic resampling,
//!   degradation, augmentation and patch extraction.
//! * [`metrics`]: PSNR / SSIM and directory evaluation.
//! * [`train`]: the epoch loop shared by the CLI and the tests.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod metrics;
pub mod network;
pub mod plane;
pub mod tcheb;
pub mod train;

pub use error::{Error, Result};
pub use plane::{ImagePlane, ValueRange};
