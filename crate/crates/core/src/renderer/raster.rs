//! Projection, depth sorting and per-pixel front-to-back compositing, with
//! the matching reverse pass.
//!
//! Work is split into fixed blocks of image rows. Blocks run in parallel but
//! partial gradients are reduced in block order, so results never depend on
//! the thread count.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::gaussians::{quat_backward, CloudGrads, GaussianCloud};
use crate::geometry::{generator, Intrinsics, Pose, Tangent6};

pub const ALPHA_MAX: f64 = 0.999;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const NEAR_PLANE: f64 = 0.01;
/// Screen-space low-pass added to every projected covariance (pixels²).
pub const COV2D_DILATION: f64 = 0.3;
const ROWS_PER_BLOCK: usize = 8;

#[derive(Debug, Clone)]
pub(crate) struct Splat {
    pub index: usize,
    pub p_cam: Vector3<f64>,
    pub cov_cam: Matrix3<f64>,
    pub jac: Matrix2x3<f64>,
    pub mean2d: Vector2<f64>,
    /// Inverse 2D covariance `[a, b, c]` = `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

/// Projects and culls every Gaussian, returning splats sorted front to back
/// (stable on cloud index for equal depths).
pub(crate) fn project(cloud: &GaussianCloud, pose: &Pose, k: &Intrinsics) -> Vec<Splat> {
    let (w, h) = (k.width as f64, k.height as f64);
    let mut splats: Vec<Splat> = cloud
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(index, g)| {
            let opacity = g.opacity();
            if opacity < ALPHA_MIN {
                return None;
            }
            let p = pose.transform_point(&g.mean());
            if p.z <= NEAR_PLANE {
                return None;
            }
            let (iz, iz2) = (1.0 / p.z, 1.0 / (p.z * p.z));
            let jac = Matrix2x3::new(k.fx * iz, 0.0, -k.fx * p.x * iz2, 0.0, k.fy * iz, -k.fy * p.y * iz2);
            let cov_cam = pose.rotation * g.covariance() * pose.rotation.transpose();
            let cov2d = jac * cov_cam * jac.transpose() + Matrix2::identity() * COV2D_DILATION;
            let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(1, 0)];
            if !(det > 0.0) {
                return None;
            }
            let conic = [cov2d[(1, 1)] / det, -cov2d[(0, 1)] / det, cov2d[(0, 0)] / det];
            let mid = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
            let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
            let radius = 3.0 * lambda_max.sqrt();
            let mean2d = Vector2::new(k.fx * p.x * iz + k.cx, k.fy * p.y * iz + k.cy);
            let (lo_x, hi_x) = ((mean2d.x - radius).floor(), (mean2d.x + radius).ceil());
            let (lo_y, hi_y) = ((mean2d.y - radius).floor(), (mean2d.y + radius).ceil());
            if hi_x < 0.0 || hi_y < 0.0 || lo_x > w - 1.0 || lo_y > h - 1.0 {
                return None;
            }
            Some(Splat {
                index,
                p_cam: p,
                cov_cam,
                jac,
                mean2d,
                conic,
                opacity,
                color: g.color(),
                x0: lo_x.max(0.0) as usize,
                x1: hi_x.min(w - 1.0) as usize,
                y0: lo_y.max(0.0) as usize,
                y1: hi_y.min(h - 1.0) as usize,
            })
        })
        .collect();
    splats.sort_by(|a, b| a.p_cam.z.total_cmp(&b.p_cam.z));
    splats
}

/// Per-pixel lists of splat positions in depth order (CSR layout).
pub(crate) struct PixelLists {
    offsets: Vec<usize>,
    entries: Vec<u32>,
}

impl PixelLists {
    pub(crate) fn build(splats: &[Splat], width: usize, height: usize) -> Self {
        let mut counts = vec![0usize; width * height + 1];
        for s in splats {
            for y in s.y0..=s.y1 {
                for x in s.x0..=s.x1 {
                    counts[y * width + x + 1] += 1;
                }
            }
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let mut cursor = counts.clone();
        let mut entries = vec![0u32; *counts.last().unwrap()];
        for (pos, s) in splats.iter().enumerate() {
            for y in s.y0..=s.y1 {
                for x in s.x0..=s.x1 {
                    let c = &mut cursor[y * width + x];
                    entries[*c] = pos as u32;
                    *c += 1;
                }
            }
        }
        Self {
            offsets: counts,
            entries,
        }
    }

    fn get(&self, pixel: usize) -> &[u32] {
        &self.entries[self.offsets[pixel]..self.offsets[pixel + 1]]
    }
}

/// Alpha of `s` at pixel center `(px, py)`: `(alpha, gaussian falloff, clamped)`.
#[inline]
fn splat_alpha(s: &Splat, px: f64, py: f64) -> Option<(f64, f64, f64, f64, bool)> {
    let dx = px - s.mean2d.x;
    let dy = py - s.mean2d.y;
    let [a, b, c] = s.conic;
    let power = 0.5 * (a * dx * dx + c * dy * dy) + b * dx * dy;
    if power < 0.0 {
        return None;
    }
    let falloff = (-power).exp();
    let raw = s.opacity * falloff;
    if raw < ALPHA_MIN {
        return None;
    }
    if raw > ALPHA_MAX {
        Some((ALPHA_MAX, falloff, dx, dy, true))
    } else {
        Some((raw, falloff, dx, dy, false))
    }
}

pub(crate) struct ForwardImage {
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Order-independent fingerprint of which (splat, pixel) pairs
    /// contributed and which were clamped.
    pub signature: u64,
    pub contributions: usize,
}

fn mix(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F) ^ c;
    z ^= z >> 31;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 29)
}

pub(crate) fn forward(splats: &[Splat], lists: &PixelLists, width: usize, height: usize) -> ForwardImage {
    let blocks: Vec<usize> = (0..height).step_by(ROWS_PER_BLOCK).collect();
    let parts: Vec<ForwardImage> = blocks
        .par_iter()
        .map(|&y_start| {
            let y_end = (y_start + ROWS_PER_BLOCK).min(height);
            let n = (y_end - y_start) * width;
            let mut out = ForwardImage {
                rgb: vec![0.0; 3 * n],
                depth: vec![0.0; n],
                alpha: vec![0.0; n],
                signature: 0,
                contributions: 0,
            };
            for y in y_start..y_end {
                for x in 0..width {
                    let pixel = y * width + x;
                    let local = pixel - y_start * width;
                    let mut t = 1.0;
                    let mut color = Vector3::zeros();
                    let mut depth = 0.0;
                    for &pos in lists.get(pixel) {
                        let s = &splats[pos as usize];
                        let Some((alpha, _, _, _, clamped)) = splat_alpha(s, x as f64, y as f64) else {
                            continue;
                        };
                        let w = alpha * t;
                        color += s.color * w;
                        depth += s.p_cam.z * w;
                        t *= 1.0 - alpha;
                        out.contributions += 1;
                        out.signature = out.signature.wrapping_add(mix(s.index as u64, pixel as u64, clamped as u64));
                    }
                    out.rgb[3 * local..3 * local + 3].copy_from_slice(color.as_slice());
                    out.depth[local] = depth;
                    out.alpha[local] = 1.0 - t;
                }
            }
            out
        })
        .collect();

    let mut image = ForwardImage {
        rgb: Vec::with_capacity(width * height * 3),
        depth: Vec::with_capacity(width * height),
        alpha: Vec::with_capacity(width * height),
        signature: 0,
        contributions: 0,
    };
    for p in parts {
        image.rgb.extend(p.rgb);
        image.depth.extend(p.depth);
        image.alpha.extend(p.alpha);
        image.signature = image.signature.wrapping_add(p.signature);
        image.contributions += p.contributions;
    }
    image
}

/// Screen-space gradients of one splat: mean2d (2), conic (3), opacity, color (3).
type SplatGrad2d = [f64; 9];

fn backward_2d(splats: &[Splat], lists: &PixelLists, width: usize, height: usize, grad_rgb: &[f64]) -> Vec<SplatGrad2d> {
    let blocks: Vec<usize> = (0..height).step_by(ROWS_PER_BLOCK).collect();
    let parts: Vec<Vec<SplatGrad2d>> = blocks
        .par_iter()
        .map(|&y_start| {
            let y_end = (y_start + ROWS_PER_BLOCK).min(height);
            let mut acc = vec![[0.0; 9]; splats.len()];
            let mut chain: Vec<(usize, f64, f64, f64, f64, bool, f64)> = Vec::new();
            for y in y_start..y_end {
                for x in 0..width {
                    let pixel = y * width + x;
                    let dl = Vector3::new(grad_rgb[3 * pixel], grad_rgb[3 * pixel + 1], grad_rgb[3 * pixel + 2]);
                    if dl == Vector3::zeros() {
                        continue;
                    }
                    chain.clear();
                    let mut t = 1.0;
                    for &pos in lists.get(pixel) {
                        let s = &splats[pos as usize];
                        if let Some((alpha, falloff, dx, dy, clamped)) = splat_alpha(s, x as f64, y as f64) {
                            chain.push((pos as usize, alpha, falloff, dx, dy, clamped, t));
                            t *= 1.0 - alpha;
                        }
                    }
                    // Color composited behind the current splat, normalized by
                    // the transmittance in front of it.
                    let mut behind = Vector3::zeros();
                    for &(pos, alpha, falloff, dx, dy, clamped, t_i) in chain.iter().rev() {
                        let s = &splats[pos];
                        let g = &mut acc[pos];
                        let w = alpha * t_i;
                        g[6] += w * dl.x;
                        g[7] += w * dl.y;
                        g[8] += w * dl.z;
                        let d_alpha = t_i * (s.color - behind).dot(&dl);
                        behind = s.color * alpha + behind * (1.0 - alpha);
                        if clamped {
                            continue;
                        }
                        g[5] += d_alpha * falloff;
                        // α = o·exp(−power)
                        let d_power = -d_alpha * alpha;
                        let [a, b, c] = s.conic;
                        g[0] += d_power * -(a * dx + b * dy);
                        g[1] += d_power * -(b * dx + c * dy);
                        g[2] += d_power * 0.5 * dx * dx;
                        g[3] += d_power * dx * dy;
                        g[4] += d_power * 0.5 * dy * dy;
                    }
                }
            }
            acc
        })
        .collect();

    let mut total = vec![[0.0; 9]; splats.len()];
    for part in parts {
        for (t, p) in total.iter_mut().zip(part) {
            for k in 0..9 {
                t[k] += p[k];
            }
        }
    }
    total
}

/// Full reverse pass: image-space gradient to Gaussian parameters and the
/// camera's left tangent.
pub(crate) fn backward(
    cloud: &GaussianCloud,
    pose: &Pose,
    k: &Intrinsics,
    splats: &[Splat],
    lists: &PixelLists,
    grad_rgb: &[f64],
) -> (CloudGrads, Tangent6) {
    let g2d = backward_2d(splats, lists, k.width, k.height, grad_rgb);
    let mut grads = CloudGrads::zeros(cloud.len());
    let mut cam = [0.0; 6];
    let r = pose.rotation;
    let gens = [generator(0), generator(1), generator(2)];

    for (s, g) in splats.iter().zip(&g2d) {
        let gauss = &cloud.gaussians[s.index];
        grads.color[s.index] = [g[6], g[7], g[8]];
        let o = s.opacity;
        grads.opacity_logit[s.index] = g[5] * o * (1.0 - o);

        // conic → 2D covariance
        let q = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
        let g_q = Matrix2::new(g[2], 0.5 * g[3], 0.5 * g[3], g[4]);
        let g_cov2d = -(q * g_q * q);
        // 2D covariance → camera covariance and Jacobian
        let g_cov_cam = s.jac.transpose() * g_cov2d * s.jac;
        let g_jac = g_cov2d * s.jac * s.cov_cam * 2.0;

        let (x, y, z) = (s.p_cam.x, s.p_cam.y, s.p_cam.z);
        let (iz, iz2, iz3) = (1.0 / z, 1.0 / (z * z), 1.0 / (z * z * z));
        let (gu, gv) = (g[0], g[1]);
        let g_pc = Vector3::new(
            gu * k.fx * iz - g_jac[(0, 2)] * k.fx * iz2,
            gv * k.fy * iz - g_jac[(1, 2)] * k.fy * iz2,
            -gu * k.fx * x * iz2 - gv * k.fy * y * iz2 - g_jac[(0, 0)] * k.fx * iz2
                + g_jac[(0, 2)] * 2.0 * k.fx * x * iz3
                - g_jac[(1, 1)] * k.fy * iz2
                + g_jac[(1, 2)] * 2.0 * k.fy * y * iz3,
        );

        let g_mean = r.transpose() * g_pc;
        grads.mean[s.index] = g_mean.into();

        // Camera left tangent: p_c ↦ Exp(ω)p_c + v and Σ_c ↦ Exp(ω)Σ_c Exp(ω)ᵀ.
        let w = s.p_cam.cross(&g_pc);
        for kk in 0..3 {
            let e = &gens[kk];
            cam[kk] += w[kk] + g_cov_cam.dot(&(e * s.cov_cam - s.cov_cam * e));
            cam[3 + kk] += g_pc[kk];
        }

        // camera covariance → world covariance → scale and rotation
        let g_cov_world = r.transpose() * g_cov_cam * r;
        let rq = gauss.rotation();
        let scale = gauss.scale();
        let m = rq * Matrix3::from_diagonal(&scale);
        let g_m = (g_cov_world + g_cov_world.transpose()) * m;
        let rt_gm = rq.transpose() * g_m;
        grads.log_scale[s.index] = [rt_gm[(0, 0)] * scale.x, rt_gm[(1, 1)] * scale.y, rt_gm[(2, 2)] * scale.z];
        let g_rq = g_m * Matrix3::from_diagonal(&scale);
        grads.rotation_q[s.index] = quat_backward(&gauss.rotation_q, &g_rq);
    }
    (grads, cam)
}
