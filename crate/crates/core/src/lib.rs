//! Gaussian group squeezing and evaluation tools for infrared small target
//! datasets.
//!
//! The crate is organized by pipeline stage:
//!
//! - [`raster`] and [`rng`]: image/mask types, PNG/PGM I/O, seeded streams;
//! - [`squeezer`]: mask-aware non-uniform quantization and target re-implanting;
//! - [`diffusion`]: noise schedules, forward noising, latent losses, jump sampling;
//! - [`backends`]: reconstruction backends, including an external process protocol;
//! - [`evaluation`]: pixel and target-level metrics, soft-IoU loss, SCR;
//! - [`pipeline`] and [`manifest`]: dataset handling, augmentation runs, reports.

pub mod backends;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod manifest;
pub mod pipeline;
pub mod raster;
pub mod rng;
pub mod squeezer;

pub use error::{Error, Result};
