//! Experiment drivers behind the command-line interface.

pub mod fit_pinv;
pub mod images;
pub mod mse_affine;
pub mod report;
pub mod swissroll;
pub mod texture_gan;
