//! Image-based geotechnical characterisation of coal mine spoil.
//!
//! The crate bundles the BMAC scoring engine, dataset handling, five
//! convolutional backbones, CNN fine-tuning, deep hybrid heads, the
//! bag-of-features baseline, evaluation statistics and the experiment runner.

pub mod backbone;
pub mod bmac;
pub mod bof;
pub mod classical;
pub mod cnn;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod hybrid;

pub use error::{Error, ErrorKind, Result};
