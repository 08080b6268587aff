//! Joint optimization of camera poses and 3D Gaussian primitives starting
//! from imperfect camera registrations.
//!
//! The pieces:
//! - [`geometry`]: SE(3), the 6D rotation map, cameras, epipolar distances,
//!   similarity alignment.
//! - [`scene`]: scene graphs of confidence-weighted correspondences, the
//!   on-disk format and a synthetic scene generator.
//! - [`gaussians`]: the Gaussian cloud, noisy Langevin-style updates,
//!   relocation and the parsimony regularizer.
//! - [`renderer`]: a differentiable CPU rasterizer and photometric losses.
//! - [`refiner`]: the shared-MLP pose refiner and a per-camera baseline.
//! - [`trainer`]: the joint objective and training loop.
//! - [`eval`]: pose metrics and test-time pose optimization.

pub mod error;
pub mod eval;
pub mod gaussians;
pub mod geometry;
pub mod optim;
pub mod refiner;
pub mod renderer;
pub mod scene;
pub mod trainer;

pub use error::{Error, Result};
