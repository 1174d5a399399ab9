//! Descriptor-free keypoint detection trained with policy gradients.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! - [`prob`]: softmax, masked log-softmax, Gaussian smoothing and KL divergence
//!   over image grids.
//! - [`sampler`]: balanced top-K keypoint sampling (density balancing, NMS,
//!   top-K) and subpixel refinement.
//! - [`geometry`]: ground-truth point transfer, covisibility and nearest
//!   neighbour matching.
//! - [`objective`]: repeatability reward, the policy-gradient loss, the
//!   regularizer and their closed-form gradients.
//! - [`model`]: a small convolutional detector with hand-written backward pass,
//!   AdamW and the training loop.
//! - [`synth`]: the light/dark dot toy model and planar synthetic scenes.
//! - [`distill`]: generalized-mean merging of two detectors, the distillation
//!   loss and a discrete checker for pointwise-maximum merging.
//! - [`eval`]: repeatability, DLT/RANSAC homographies, corner end-point error,
//!   pose error and AUC.
//! - [`cli`]: the `dadkit` command line.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the `*64` aliases
//! below are the instantiations used by the command line and the training code.

#[cfg(test)]
macro_rules! assert_close {
    ($a:expr, $b:expr, $tol:expr) => {{
        let (a, b, tol): (f64, f64, f64) = ($a, $b, $tol);
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }};
}

pub mod cli;
pub mod distill;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod grid;
pub mod model;
pub mod objective;
pub mod prob;
pub mod sampler;
pub mod scalar;
pub mod synth;

pub use error::{Error, Result};
pub use grid::{Grid, Mask};
pub use scalar::Real;

pub type Grid64 = grid::Grid<f64>;
pub type ScoreMap64 = prob::ScoreMap<f64>;
pub type ProbMap64 = prob::ProbMap<f64>;
pub type LogProbMap64 = prob::LogProbMap<f64>;
pub type KeypointSet64 = sampler::KeypointSet<f64>;
pub type Homography64 = geometry::HomographyTransfer<f64>;
pub type DetectorParams64 = model::DetectorParams<f64>;
pub type PairSample64 = synth::PairSample<f64>;

pub type Grid32 = grid::Grid<f32>;
pub type ScoreMap32 = prob::ScoreMap<f32>;
pub type ProbMap32 = prob::ProbMap<f32>;
pub type DetectorParams32 = model::DetectorParams<f32>;
