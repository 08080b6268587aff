//! Shared finite-difference machinery and independent oracles for the
//! integration suites.
#![allow(dead_code)]

use gaussba::gaussians::{Gaussian, GaussianCloud};
use gaussba::geometry::{so3_exp, Pose};
use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

pub mod gradcheck;
pub mod oracle;

pub const FD_FLOOR: f64 = 1e-6;

/// Relative error with an absolute floor for gradients that are ~0.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

pub fn central_diff(h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

pub fn random_rotation(rng: &mut impl Rng, max_angle: f64) -> Matrix3<f64> {
    let axis = Vector3::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    )
    .normalize();
    so3_exp(&(axis * rng.random_range(0.0..max_angle)))
}

pub fn random_pose(rng: &mut impl Rng) -> Pose {
    Pose::new(
        random_rotation(rng, std::f64::consts::PI),
        Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
    )
}

/// Identifies one scalar parameter of a Gaussian.
#[derive(Debug, Clone, Copy)]
pub enum Param {
    Mean(usize),
    LogScale(usize),
    Quat(usize),
    Opacity,
    Color(usize),
}

pub const ALL_PARAMS: [Param; 14] = [
    Param::Mean(0),
    Param::Mean(1),
    Param::Mean(2),
    Param::LogScale(0),
    Param::LogScale(1),
    Param::LogScale(2),
    Param::Quat(0),
    Param::Quat(1),
    Param::Quat(2),
    Param::Quat(3),
    Param::Opacity,
    Param::Color(0),
    Param::Color(1),
    Param::Color(2),
];

pub fn param_mut(g: &mut Gaussian, p: Param) -> &mut f64 {
    match p {
        Param::Mean(k) => &mut g.mean[k],
        Param::LogScale(k) => &mut g.log_scale[k],
        Param::Quat(k) => &mut g.rotation_q[k],
        Param::Opacity => &mut g.opacity_logit,
        Param::Color(k) => &mut g.color[k],
    }
}

pub fn grad_of(grads: &gaussba::gaussians::CloudGrads, i: usize, p: Param) -> f64 {
    match p {
        Param::Mean(k) => grads.mean[i][k],
        Param::LogScale(k) => grads.log_scale[i][k],
        Param::Quat(k) => grads.rotation_q[i][k],
        Param::Opacity => grads.opacity_logit[i],
        Param::Color(k) => grads.color[i][k],
    }
}

/// Random Gaussians in front of an identity camera, inside the view frustum
/// of a small image.
pub fn random_cloud_in_view(rng: &mut impl Rng, n: usize) -> GaussianCloud {
    let gaussians = (0..n)
        .map(|_| {
            let z = rng.random_range(2.5..4.0);
            let mut q = [0.0f64; 4];
            for v in &mut q {
                *v = rng.sample(StandardNormal);
            }
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            Gaussian {
                mean: [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), z],
                log_scale: [
                    rng.random_range(0.12f64..0.35).ln(),
                    rng.random_range(0.12f64..0.35).ln(),
                    rng.random_range(0.12f64..0.35).ln(),
                ],
                rotation_q: q.map(|v| v / norm),
                opacity_logit: rng.random_range(-1.5..1.5),
                color: [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)],
            }
        })
        .collect();
    GaussianCloud::new(gaussians)
}
