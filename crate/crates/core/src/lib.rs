//! Nonlinear hyperspectral unmixing toolkit.

pub mod attention;
pub mod cli;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod init;
pub mod io;
pub mod metrics;
pub mod mixing;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
