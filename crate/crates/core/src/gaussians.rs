//! Gaussian primitives, the Langevin-style update with exploration noise,
//! opacity-preserving relocation of dead Gaussians, and the parsimony
//! regularizer.

use nalgebra::{Matrix3, Vector3};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::AdamMoments;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rotation matrix of a unit quaternion stored as `[w, x, y, z]`.
pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

fn normalize_quat(q: &[f64; 4]) -> ([f64; 4], f64) {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    ([q[0] / n, q[1] / n, q[2] / n, q[3] / n], n)
}

/// Gradient of `L(R(q/|q|))` w.r.t. the raw quaternion, given `∂L/∂R`.
/// The result is orthogonal to `q`.
pub fn quat_backward(q: &[f64; 4], grad_r: &Matrix3<f64>) -> [f64; 4] {
    let ([w, x, y, z], n) = normalize_quat(q);
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    let g = [grad_r.dot(&dw), grad_r.dot(&dx), grad_r.dot(&dy), grad_r.dot(&dz)];
    let qn = [w, x, y, z];
    let proj: f64 = g.iter().zip(&qn).map(|(a, b)| a * b).sum();
    [
        (g[0] - qn[0] * proj) / n,
        (g[1] - qn[1] * proj) / n,
        (g[2] - qn[2] * proj) / n,
        (g[3] - qn[3] * proj) / n,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: [f64; 3],
    pub log_scale: [f64; 3],
    /// `[w, x, y, z]`, kept at unit norm.
    pub rotation_q: [f64; 4],
    pub opacity_logit: f64,
    pub color: [f64; 3],
}

impl Gaussian {
    pub fn isotropic(mean: Vector3<f64>, scale: f64, opacity: f64, color: Vector3<f64>) -> Self {
        Self {
            mean: mean.into(),
            log_scale: [scale.ln(); 3],
            rotation_q: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit(opacity),
            color: color.into(),
        }
    }

    pub fn mean(&self) -> Vector3<f64> {
        Vector3::from(self.mean)
    }

    pub fn color(&self) -> Vector3<f64> {
        Vector3::from(self.color)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        Vector3::from(self.log_scale).map(f64::exp)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        quat_to_matrix(&normalize_quat(&self.rotation_q).0)
    }

    /// `R diag(s²) Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let m = self.rotation() * Matrix3::from_diagonal(&self.scale());
        m * m.transpose()
    }

    fn renormalize(&mut self) {
        self.rotation_q = normalize_quat(&self.rotation_q).0;
    }
}

/// Fixed-capacity set of Gaussians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
}

impl GaussianCloud {
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        Self { gaussians }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Capacity never changes after construction.
    pub fn capacity(&self) -> usize {
        self.gaussians.len()
    }

    pub fn opacities(&self) -> Vec<f64> {
        self.gaussians.iter().map(Gaussian::opacity).collect()
    }
}

/// Per-Gaussian gradients, one entry per Gaussian in cloud order.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudGrads {
    pub mean: Vec<[f64; 3]>,
    pub log_scale: Vec<[f64; 3]>,
    pub rotation_q: Vec<[f64; 4]>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

impl CloudGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            mean: vec![[0.0; 3]; n],
            log_scale: vec![[0.0; 3]; n],
            rotation_q: vec![[0.0; 4]; n],
            opacity_logit: vec![0.0; n],
            color: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.opacity_logit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity_logit.is_empty()
    }

    pub fn add_assign(&mut self, other: &CloudGrads) {
        fn add<const N: usize>(a: &mut [[f64; N]], b: &[[f64; N]]) {
            for (x, y) in a.iter_mut().zip(b) {
                for k in 0..N {
                    x[k] += y[k];
                }
            }
        }
        add(&mut self.mean, &other.mean);
        add(&mut self.log_scale, &other.log_scale);
        add(&mut self.rotation_q, &other.rotation_q);
        add(&mut self.color, &other.color);
        for (x, y) in self.opacity_logit.iter_mut().zip(&other.opacity_logit) {
            *x += y;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().flatten().all(|v| v.is_finite())
            && self.log_scale.iter().flatten().all(|v| v.is_finite())
            && self.rotation_q.iter().flatten().all(|v| v.is_finite())
            && self.color.iter().flatten().all(|v| v.is_finite())
            && self.opacity_logit.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.mean
            .iter()
            .flatten()
            .chain(self.log_scale.iter().flatten())
            .chain(self.rotation_q.iter().flatten())
            .chain(self.color.iter().flatten())
            .chain(&self.opacity_logit)
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Learning rates for each Gaussian parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianLearningRates {
    pub mean: f64,
    pub log_scale: f64,
    pub rotation_q: f64,
    pub opacity_logit: f64,
    pub color: f64,
}

impl GaussianLearningRates {
    pub fn uniform(lr: f64) -> Self {
        Self {
            mean: lr,
            log_scale: lr,
            rotation_q: lr,
            opacity_logit: lr,
            color: lr,
        }
    }
}

/// Adam moments for every Gaussian parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOptimizer {
    mean: AdamMoments,
    log_scale: AdamMoments,
    rotation_q: AdamMoments,
    opacity_logit: AdamMoments,
    color: AdamMoments,
    step: u64,
}

impl GaussianOptimizer {
    pub fn new(n: usize) -> Self {
        Self {
            mean: AdamMoments::new(3 * n),
            log_scale: AdamMoments::new(3 * n),
            rotation_q: AdamMoments::new(4 * n),
            opacity_logit: AdamMoments::new(n),
            color: AdamMoments::new(3 * n),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Plain Adam update of every group.
    pub fn step(&mut self, cloud: &mut GaussianCloud, grads: &CloudGrads, lr: &GaussianLearningRates) {
        self.step += 1;
        let t = self.step;
        for (i, g) in cloud.gaussians.iter_mut().enumerate() {
            for k in 0..3 {
                g.mean[k] -= self.mean.delta(3 * i + k, grads.mean[i][k], lr.mean, t);
                g.log_scale[k] -= self.log_scale.delta(3 * i + k, grads.log_scale[i][k], lr.log_scale, t);
                g.color[k] -= self.color.delta(3 * i + k, grads.color[i][k], lr.color, t);
            }
            for k in 0..4 {
                g.rotation_q[k] -= self.rotation_q.delta(4 * i + k, grads.rotation_q[i][k], lr.rotation_q, t);
            }
            g.opacity_logit -= self.opacity_logit.delta(i, grads.opacity_logit[i], lr.opacity_logit, t);
            g.renormalize();
            for c in &mut g.color {
                *c = c.clamp(0.0, 1.0);
            }
        }
    }

    /// Forgets the moment history of one Gaussian (after it was relocated).
    pub fn reset(&mut self, i: usize) {
        self.mean.reset_range(3 * i, 3);
        self.log_scale.reset_range(3 * i, 3);
        self.rotation_q.reset_range(4 * i, 4);
        self.opacity_logit.reset_range(i, 1);
        self.color.reset_range(3 * i, 3);
    }
}

/// One optimizer step followed by exploration noise on the means.
///
/// The noise on each mean coordinate is `N(0, 1)·b·lr_mean·(1 − opacity)`.
/// With `b = 0` no random numbers are drawn, so the result is exactly the
/// plain optimizer step.
pub fn sgld_step(
    cloud: &mut GaussianCloud,
    grads: &CloudGrads,
    optimizer: &mut GaussianOptimizer,
    lr: &GaussianLearningRates,
    noise_scale: f64,
    rng: &mut impl Rng,
) -> Result<()> {
    if grads.len() != cloud.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} gradient entries", cloud.len()),
            actual: grads.len().to_string(),
        });
    }
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient("gaussian parameters".into()));
    }
    optimizer.step(cloud, grads, lr);
    if noise_scale > 0.0 {
        let base = noise_scale * lr.mean;
        for g in &mut cloud.gaussians {
            let std = base * (1.0 - g.opacity());
            for m in &mut g.mean {
                let n: f64 = rng.sample(StandardNormal);
                *m += std * n;
            }
        }
    }
    Ok(())
}

/// Outcome of one relocation pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Relocation {
    /// `(dead, source)` index pairs.
    pub moves: Vec<(usize, usize)>,
}

impl Relocation {
    pub fn count(&self) -> usize {
        self.moves.len()
    }

    /// Every index whose parameters changed.
    pub fn touched(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.moves.iter().flat_map(|&(d, s)| [d, s]).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Opacity each of `copies` co-located Gaussians needs so their composite
/// matches a single Gaussian of opacity `opacity` at the center.
pub fn split_opacity(opacity: f64, copies: usize) -> f64 {
    1.0 - (1.0 - opacity).powf(1.0 / copies as f64)
}

/// Scale multiplier for `copies` co-located Gaussians with opacity
/// `split_opacity(opacity, copies)` whose composite preserves the integrated
/// contribution of the original.
pub fn split_scale_factor(opacity: f64, copies: usize) -> f64 {
    let o = split_opacity(opacity, copies);
    let mut denom = 0.0;
    for i in 1..=copies {
        for k in 0..i {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            denom += binomial(i - 1, k) * sign * o.powi(k as i32 + 1) / ((k + 1) as f64).sqrt();
        }
    }
    opacity / denom
}

/// Teleports every Gaussian with opacity below `opacity_threshold` onto an
/// alive Gaussian drawn with probability proportional to opacity.
pub fn relocate(cloud: &mut GaussianCloud, opacity_threshold: f64, rng: &mut impl Rng) -> Result<Relocation> {
    if !(opacity_threshold > 0.0 && opacity_threshold < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "opacity threshold {opacity_threshold} outside (0, 1)"
        )));
    }
    let opacities = cloud.opacities();
    let dead: Vec<usize> = (0..cloud.len()).filter(|&i| opacities[i] < opacity_threshold).collect();
    if dead.is_empty() {
        return Ok(Relocation::default());
    }
    let alive: Vec<usize> = (0..cloud.len()).filter(|&i| opacities[i] >= opacity_threshold).collect();
    if alive.is_empty() {
        return Err(Error::AllDead(opacity_threshold));
    }
    let weights: Vec<f64> = alive.iter().map(|&i| opacities[i]).collect();
    let sampler = WeightedIndex::new(&weights).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let moves: Vec<(usize, usize)> = dead.iter().map(|&d| (d, alive[sampler.sample(rng)])).collect();

    let mut copies = vec![1usize; cloud.len()];
    for &(_, s) in &moves {
        copies[s] += 1;
    }
    // Source Gaussians in first-seen order; each splits once across its copies.
    let mut sources: Vec<usize> = moves.iter().map(|&(_, s)| s).collect();
    sources.sort_unstable();
    sources.dedup();
    for &s in &sources {
        let n = copies[s];
        let o = opacities[s];
        let new_o = split_opacity(o, n).min(1.0 - 1e-12);
        let factor = split_scale_factor(o, n);
        let g = &mut cloud.gaussians[s];
        g.opacity_logit = logit(new_o);
        for ls in &mut g.log_scale {
            *ls += factor.ln();
        }
    }
    for &(d, s) in &moves {
        cloud.gaussians[d] = cloud.gaussians[s].clone();
    }
    Ok(Relocation { moves })
}

/// `λ_o·mean_i(oᵢ) + λ_Σ·mean_i(Σⱼ sᵢⱼ)`; the square roots of the covariance
/// eigenvalues are exactly the scales in this parameterization. Averaging
/// over Gaussians keeps the term's weight independent of the cloud size.
pub fn regularizer_loss(cloud: &GaussianCloud, lambda_opacity: f64, lambda_scale: f64) -> (f64, CloudGrads) {
    let mut grads = CloudGrads::zeros(cloud.len());
    if cloud.is_empty() {
        return (0.0, grads);
    }
    let inv = 1.0 / cloud.len() as f64;
    let (wo, ws) = (lambda_opacity * inv, lambda_scale * inv);
    let mut loss = 0.0;
    for (i, g) in cloud.gaussians.iter().enumerate() {
        let o = g.opacity();
        loss += wo * o;
        grads.opacity_logit[i] = wo * o * (1.0 - o);
        for k in 0..3 {
            let s = g.log_scale[k].exp();
            loss += ws * s;
            grads.log_scale[i][k] = ws * s;
        }
    }
    (loss, grads)
}
