//! Adversarial sparse-view CT streak artifact reduction.
//!
//! The crate is organised along the pipeline:
//!
//! - [`tomo_sim`]: phantoms, parallel-beam projection, filtered backprojection and
//!   the paired sparse/dense dataset container.
//! - [`perceptual`]: frozen 16-layer feature extractor with named tap points.
//! - [`networks`]: encoder–decoder generator and the single-scale / pyramid
//!   discriminators.
//! - [`losses`]: focus maps, focus-weighted least-squares adversarial losses,
//!   perceptual and MSE regularizers.
//! - [`training`]: cross-validation folds, adversarial training and inference.
//! - [`evaluation`]: SSIM / PSNR / RMSE and region-of-interest statistics.

pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod perceptual;
pub mod tomo_sim;
pub mod training;

pub use error::{Error, Result};
