//! Small-resolution differentiable Gaussian-splat rasterizer.
//!
//! Each Gaussian is projected with a first-order (Jacobian) approximation of
//! the perspective map, depth-sorted by camera-space `z` and composited front
//! to back over a black background. Pixels are evaluated exactly inside each
//! splat's 3σ bounding box; there is no tiling.

mod image;
pub mod metrics;
mod raster;

pub use image::ImageBuffer;
pub use metrics::{l1_with_grad, psnr, ssim, ssim_with_grad};
pub use raster::{ALPHA_MAX, ALPHA_MIN, COV2D_DILATION, NEAR_PLANE};

use crate::error::{Error, Result};
use crate::gaussians::{CloudGrads, GaussianCloud};
use crate::geometry::{Intrinsics, Pose, Tangent6};

/// Rendered image plus debugging buffers.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: ImageBuffer,
    /// Alpha-weighted camera depth per pixel.
    pub depth: Vec<f64>,
    /// Accumulated opacity per pixel (`1 − final transmittance`).
    pub alpha: Vec<f64>,
    /// Fingerprint of the set of contributing (Gaussian, pixel) pairs.
    /// Changes exactly when a visibility or clamping boundary is crossed.
    pub signature: u64,
    pub contributions: usize,
}

pub fn render(cloud: &GaussianCloud, pose: &Pose, k: &Intrinsics) -> RenderOutput {
    let splats = raster::project(cloud, pose, k);
    let lists = raster::PixelLists::build(&splats, k.width, k.height);
    let f = raster::forward(&splats, &lists, k.width, k.height);
    RenderOutput {
        image: ImageBuffer {
            width: k.width,
            height: k.height,
            rgb: f.rgb,
        },
        depth: f.depth,
        alpha: f.alpha,
        signature: f.signature,
        contributions: f.contributions,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_dssim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_dssim: 0.2 }
    }
}

/// `(1 − λ)·L1 + λ·D-SSIM` with its two terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricLoss {
    pub total: f64,
    pub l1: f64,
    pub dssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderGradients {
    pub gaussians: CloudGrads,
    /// Left tangent `[ω, v]` at the rendering pose.
    pub camera: Tangent6,
}

/// Photometric loss against `target` and its gradient w.r.t. an arbitrary
/// rendered image, without the rasterizer reverse pass.
pub fn photometric_loss(
    rendered: &ImageBuffer,
    target: &ImageBuffer,
    weights: &LossWeights,
) -> Result<(PhotometricLoss, Vec<f64>)> {
    let (l1, g1) = l1_with_grad(rendered, target)?;
    let lambda = weights.lambda_dssim;
    let (s, gs) = ssim_with_grad(rendered, target)?;
    let dssim = (1.0 - s) / 2.0;
    let grad = g1
        .iter()
        .zip(&gs)
        .map(|(a, b)| (1.0 - lambda) * a - lambda * 0.5 * b)
        .collect();
    Ok((
        PhotometricLoss {
            total: (1.0 - lambda) * l1 + lambda * dssim,
            l1,
            dssim,
        },
        grad,
    ))
}

/// Forward render, photometric loss and the analytic reverse pass.
pub fn render_backward(
    cloud: &GaussianCloud,
    pose: &Pose,
    k: &Intrinsics,
    target: &ImageBuffer,
    weights: &LossWeights,
) -> Result<(PhotometricLoss, RenderGradients, RenderOutput)> {
    if target.width != k.width || target.height != k.height {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", k.width, k.height),
            actual: format!("{}x{}", target.width, target.height),
        });
    }
    let splats = raster::project(cloud, pose, k);
    let lists = raster::PixelLists::build(&splats, k.width, k.height);
    let f = raster::forward(&splats, &lists, k.width, k.height);
    let output = RenderOutput {
        image: ImageBuffer {
            width: k.width,
            height: k.height,
            rgb: f.rgb,
        },
        depth: f.depth,
        alpha: f.alpha,
        signature: f.signature,
        contributions: f.contributions,
    };
    let (loss, grad_rgb) = photometric_loss(&output.image, target, weights)?;
    let (gaussians, camera) = raster::backward(cloud, pose, k, &splats, &lists, &grad_rgb);
    Ok((loss, RenderGradients { gaussians, camera }, output))
}
