//! Low-light image enhancement with hierarchy-sorted selective-scan blocks.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense arrays, reverse-mode autodiff and the FFT.
//! - [`hierarchy`]: brightness and semantic score maps and the token sort
//!   plans derived from them.
//! - [`ssm`]: the selective scan and the four-direction baseline.
//! - [`backbone`] and [`denet`]: the enhancement network.
//! - [`losses`] and [`metrics`]: training objective, PSNR/SSIM and Canny.
//! - [`model`]: the full network and its configuration.
//! - [`pipeline`]: datasets, training, checkpoints, inference.

pub mod backbone;
pub mod denet;
pub mod error;
pub mod hierarchy;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod selftest;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Real, Tensor, Var};
