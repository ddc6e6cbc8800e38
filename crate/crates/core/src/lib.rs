//! Spatial prediction of gridded wildfire activity.
//!
//! The library fits a four-stage model to a panel of monthly pixel
//! observations of fire counts and burnt areas with missing cells:
//! a latent-Gaussian occurrence chain, low-rank surface smoothing of
//! positive-part moments, a bivariate latent-field chain that borrows
//! strength across the two variables, and a random-forest rectification of
//! predicted counts. A log-Gaussian Cox competitor, a threshold-weighted
//! scoring rule with cross-validation masking, and a synthetic-panel
//! generator round out the toolkit. `pyrocast` (the binary) drives the
//! stages over CSV artifacts.

pub mod bivariate;
pub mod config;
pub mod error;
pub mod eval;
pub mod forest;
pub mod gmrf;
pub mod io;
pub mod lgcp;
pub mod mathx;
pub mod panel;
pub mod mesh;
pub mod occurrence;
pub mod rngx;
pub mod sparse;
pub mod surfaces;
pub mod synth;

pub use error::{Error, Result};
