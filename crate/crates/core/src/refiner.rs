//! Pose correction models.
//!
//! [`PoseRefiner`] decodes every camera's correction from a learnable
//! embedding through one shared MLP, so an update to the shared weights moves
//! all cameras together. [`DirectPoseParams`] gives each camera its own
//! independent correction and serves as the baseline.
//!
//! Both emit a [`PoseCorrection`] per camera that is left-composed onto the
//! initial pose, and both consume per-camera gradients expressed as left
//! tangents `[ω, v]` at the refined pose.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{compose, rotation_from_6d_backward, skew, Pose, PoseCorrection, Tangent6, IDENTITY_R6};

/// Number of raw outputs per camera: translation then 6D rotation.
pub const CORRECTION_DIM: usize = 9;

/// Gradient of a loss w.r.t. `(Δt, Δr6)` given its left-tangent gradient
/// at the refined pose `ΔT · base`.
pub fn correction_backward(correction: &PoseCorrection, base: &Pose, grad: &Tangent6) -> Result<[f64; CORRECTION_DIM]> {
    let refined = compose(correction, base)?;
    let g_omega = Vector3::new(grad[0], grad[1], grad[2]);
    let g_v = Vector3::new(grad[3], grad[4], grad[5]);
    // A Euclidean gradient for the rotation whose tangent projection is g_ω
    // once the translation coupling is accounted for.
    let h = g_omega + g_v.cross(&refined.translation);
    let g_rot: Matrix3<f64> = skew(&h) * refined.rotation * 0.5;
    let g_delta_r = g_rot * base.rotation.transpose() + g_v * base.translation.transpose();
    let g_r6 = rotation_from_6d_backward(&correction.delta_r6, &g_delta_r)?;
    let mut out = [0.0; CORRECTION_DIM];
    out[..3].copy_from_slice(g_v.as_slice());
    out[3..].copy_from_slice(&g_r6);
    Ok(out)
}

fn check_counts(expected: usize, poses: usize, what: &str) -> Result<()> {
    if expected != poses {
        return Err(Error::DimensionMismatch {
            expected: format!("{expected} {what}"),
            actual: poses.to_string(),
        });
    }
    Ok(())
}

fn check_finite(grads: &[Tangent6]) -> Result<()> {
    if grads.iter().flatten().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteGradient("pose gradients".into()))
    }
}

/// Shape of the refiner network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerConfig {
    pub embedding_dim: usize,
    pub hidden: Vec<usize>,
    pub embedding_std: f64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 16,
            hidden: vec![64, 64],
            embedding_std: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct LayerShape {
    inputs: usize,
    outputs: usize,
    /// Offset of the row-major weight matrix in the flat parameter vector;
    /// the bias follows it.
    offset: usize,
}

impl LayerShape {
    fn bias_offset(&self) -> usize {
        self.offset + self.inputs * self.outputs
    }
}

/// Shared MLP over per-camera embeddings, with `tanh` hidden activations and
/// a linear output layer that starts at exactly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRefiner {
    num_cameras: usize,
    embedding_dim: usize,
    layers: Vec<LayerShape>,
    /// Embeddings first (camera-major), then each layer's weights and bias.
    params: Vec<f64>,
}

struct Activations {
    /// Input to each layer, plus the final raw output.
    values: Vec<Vec<f64>>,
}

impl PoseRefiner {
    pub fn new(num_cameras: usize, config: &RefinerConfig, rng: &mut impl Rng) -> Self {
        let e = config.embedding_dim;
        let mut widths = vec![e];
        widths.extend(&config.hidden);
        widths.push(CORRECTION_DIM);

        let mut params = Vec::new();
        let normal = Normal::new(0.0, config.embedding_std).expect("embedding std must be finite");
        params.extend((0..num_cameras * e).map(|_| normal.sample(rng)));

        let mut layers = Vec::new();
        for w in widths.windows(2) {
            let (inputs, outputs) = (w[0], w[1]);
            layers.push(LayerShape {
                inputs,
                outputs,
                offset: params.len(),
            });
            let is_output = outputs == CORRECTION_DIM && layers.len() == widths.len() - 1;
            if is_output {
                params.extend(std::iter::repeat_n(0.0, (inputs + 1) * outputs));
            } else {
                let bound = 1.0 / (inputs as f64).sqrt();
                let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                params.extend((0..(inputs + 1) * outputs).map(|_| u.sample(rng)));
            }
        }
        Self {
            num_cameras,
            embedding_dim: e,
            layers,
            params,
        }
    }

    pub fn num_cameras(&self) -> usize {
        self.num_cameras
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn embedding(&self, camera: usize) -> &[f64] {
        let e = self.embedding_dim;
        &self.params[camera * e..(camera + 1) * e]
    }

    /// Index range of camera `i`'s embedding in [`Self::params`].
    pub fn embedding_range(&self, camera: usize) -> std::ops::Range<usize> {
        camera * self.embedding_dim..(camera + 1) * self.embedding_dim
    }

    /// Index range of every shared network weight in [`Self::params`].
    pub fn network_range(&self) -> std::ops::Range<usize> {
        self.num_cameras * self.embedding_dim..self.params.len()
    }

    /// Index range of the output layer's bias.
    pub fn output_bias_range(&self) -> std::ops::Range<usize> {
        let last = self.layers.last().unwrap();
        last.bias_offset()..last.bias_offset() + last.outputs
    }

    /// Index range of hidden layer `l`'s weight matrix.
    pub fn layer_weight_range(&self, layer: usize) -> std::ops::Range<usize> {
        let l = &self.layers[layer];
        l.offset..l.bias_offset()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn forward(&self, camera: usize) -> Activations {
        let mut values = vec![self.embedding(camera).to_vec()];
        for (li, l) in self.layers.iter().enumerate() {
            let input = values.last().unwrap();
            let w = &self.params[l.offset..l.bias_offset()];
            let b = &self.params[l.bias_offset()..l.bias_offset() + l.outputs];
            let last = li + 1 == self.layers.len();
            let out: Vec<f64> = (0..l.outputs)
                .map(|o| {
                    let row = &w[o * l.inputs..(o + 1) * l.inputs];
                    let pre = b[o] + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>();
                    if last {
                        pre
                    } else {
                        pre.tanh()
                    }
                })
                .collect();
            values.push(out);
        }
        Activations { values }
    }

    /// Decodes the raw network output into a correction; the rotation block is
    /// offset by the identity so a zero output is the identity pose.
    fn decode(raw: &[f64]) -> PoseCorrection {
        let mut r6 = IDENTITY_R6;
        for k in 0..6 {
            r6[k] += raw[3 + k];
        }
        PoseCorrection {
            delta_t: Vector3::new(raw[0], raw[1], raw[2]),
            delta_r6: r6,
        }
    }

    pub fn correction(&self, camera: usize) -> PoseCorrection {
        Self::decode(self.forward(camera).values.last().unwrap())
    }

    pub fn corrections(&self) -> Vec<PoseCorrection> {
        (0..self.num_cameras).map(|i| self.correction(i)).collect()
    }

    pub fn refine_all(&self, initial: &[Pose]) -> Result<Vec<Pose>> {
        check_counts(self.num_cameras, initial.len(), "poses")?;
        initial
            .iter()
            .enumerate()
            .map(|(i, p)| {
                compose(&self.correction(i), p).map_err(|e| {
                    Error::DegenerateRotation6D(format!("camera {i}: {e}; raw output {:?}", self.correction(i)))
                })
            })
            .collect()
    }

    /// Gradient w.r.t. every parameter, laid out like [`Self::params`].
    pub fn backward(&self, initial: &[Pose], pose_grads: &[Tangent6]) -> Result<Vec<f64>> {
        check_counts(self.num_cameras, initial.len(), "poses")?;
        check_counts(self.num_cameras, pose_grads.len(), "pose gradients")?;
        check_finite(pose_grads)?;
        let mut grad = vec![0.0; self.params.len()];
        for (i, (base, g)) in initial.iter().zip(pose_grads).enumerate() {
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let acts = self.forward(i);
            let correction = Self::decode(acts.values.last().unwrap());
            let mut upstream = correction_backward(&correction, base, g)?.to_vec();
            for (li, l) in self.layers.iter().enumerate().rev() {
                let input = &acts.values[li];
                let output = &acts.values[li + 1];
                let last = li + 1 == self.layers.len();
                // through tanh
                let d_pre: Vec<f64> = if last {
                    upstream
                } else {
                    upstream.iter().zip(output).map(|(u, y)| u * (1.0 - y * y)).collect()
                };
                let mut d_input = vec![0.0; l.inputs];
                for o in 0..l.outputs {
                    let dp = d_pre[o];
                    if dp == 0.0 {
                        continue;
                    }
                    grad[l.bias_offset() + o] += dp;
                    let row = l.offset + o * l.inputs;
                    for j in 0..l.inputs {
                        grad[row + j] += dp * input[j];
                        d_input[j] += dp * self.params[row + j];
                    }
                }
                upstream = d_input;
            }
            let range = self.embedding_range(i);
            for (dst, src) in grad[range].iter_mut().zip(&upstream) {
                *dst += src;
            }
        }
        Ok(grad)
    }
}

/// Independent per-camera corrections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectPoseParams {
    /// `[Δt (3), Δr6 (6)]` per camera.
    params: Vec<f64>,
}

impl DirectPoseParams {
    pub fn new(num_cameras: usize) -> Self {
        let mut params = Vec::with_capacity(num_cameras * CORRECTION_DIM);
        for _ in 0..num_cameras {
            params.extend([0.0; 3]);
            params.extend(IDENTITY_R6);
        }
        Self { params }
    }

    pub fn num_cameras(&self) -> usize {
        self.params.len() / CORRECTION_DIM
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn correction(&self, camera: usize) -> PoseCorrection {
        let p = &self.params[camera * CORRECTION_DIM..(camera + 1) * CORRECTION_DIM];
        PoseCorrection {
            delta_t: Vector3::new(p[0], p[1], p[2]),
            delta_r6: [p[3], p[4], p[5], p[6], p[7], p[8]],
        }
    }

    pub fn refine_all(&self, initial: &[Pose]) -> Result<Vec<Pose>> {
        check_counts(self.num_cameras(), initial.len(), "poses")?;
        initial
            .iter()
            .enumerate()
            .map(|(i, p)| compose(&self.correction(i), p))
            .collect()
    }

    pub fn backward(&self, initial: &[Pose], pose_grads: &[Tangent6]) -> Result<Vec<f64>> {
        check_counts(self.num_cameras(), initial.len(), "poses")?;
        check_counts(self.num_cameras(), pose_grads.len(), "pose gradients")?;
        check_finite(pose_grads)?;
        let mut grad = vec![0.0; self.params.len()];
        for (i, (base, g)) in initial.iter().zip(pose_grads).enumerate() {
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let gc = correction_backward(&self.correction(i), base, g)?;
            grad[i * CORRECTION_DIM..(i + 1) * CORRECTION_DIM].copy_from_slice(&gc);
        }
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_exp;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ring(n: usize) -> Vec<Pose> {
        (0..n)
            .map(|i| {
                let th = i as f64 * 0.7;
                Pose::look_at(
                    &Vector3::new(3.0 * th.cos(), 0.2 * th.sin(), 3.0 * th.sin()),
                    &Vector3::zeros(),
                    &Vector3::y(),
                )
            })
            .collect()
    }

    #[test]
    fn zero_init_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let poses = ring(5);
        let r = PoseRefiner::new(5, &RefinerConfig::default(), &mut rng);
        assert_eq!(r.refine_all(&poses).unwrap(), poses);
        assert_eq!(DirectPoseParams::new(5).refine_all(&poses).unwrap(), poses);
    }

    #[test]
    fn bias_encodes_shared_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let poses = ring(4);
        let mut r = PoseRefiner::new(4, &RefinerConfig::default(), &mut rng);
        let b = r.output_bias_range();
        r.params_mut()[b.start] = 1.0;
        for (out, p) in r.refine_all(&poses).unwrap().iter().zip(&poses) {
            assert_eq!(out.rotation, p.rotation);
            assert!((out.translation - p.translation - Vector3::x()).norm() < 1e-15);
        }
    }

    #[test]
    fn bias_reproduces_any_shared_correction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let poses = ring(6);
        let delta = Pose::new(so3_exp(&Vector3::new(0.02, -0.03, 0.01)), Vector3::new(0.1, 0.0, -0.05));
        let target = PoseCorrection::from_pose(&delta);
        let mut r = PoseRefiner::new(6, &RefinerConfig::default(), &mut rng);
        let b = r.output_bias_range();
        let p = r.params_mut();
        p[b.start..b.start + 3].copy_from_slice(target.delta_t.as_slice());
        for k in 0..6 {
            p[b.start + 3 + k] = target.delta_r6[k] - IDENTITY_R6[k];
        }
        for (out, base) in r.refine_all(&poses).unwrap().iter().zip(&poses) {
            let expected = delta.compose(base);
            assert!((out.rotation - expected.rotation).amax() < 1e-12);
            assert!((out.translation - expected.translation).amax() < 1e-12);
        }
    }

    #[test]
    fn shared_weight_couples_all_cameras() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let poses = ring(5);
        let mut r = PoseRefiner::new(5, &RefinerConfig::default(), &mut rng);
        // Give the output layer some weight so hidden changes propagate.
        let out_w = r.layer_weight_range(r.num_layers() - 1);
        for i in out_w {
            r.params_mut()[i] = 0.05;
        }
        let before = r.refine_all(&poses).unwrap();
        let hidden = r.layer_weight_range(1).start;
        r.params_mut()[hidden] += 0.5;
        let after = r.refine_all(&poses).unwrap();
        for (a, b) in after.iter().zip(&before) {
            assert!((a.translation - b.translation).norm() > 0.0);
        }
    }

    #[test]
    fn zero_gradient_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let poses = ring(3);
        let r = PoseRefiner::new(3, &RefinerConfig::default(), &mut rng);
        let g = r.backward(&poses, &[[0.0; 6]; 3]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_sparsity_over_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let poses = ring(3);
        let mut r = PoseRefiner::new(3, &RefinerConfig::default(), &mut rng);
        // Non-zero output layer so gradients reach the embeddings.
        let out_w = r.layer_weight_range(r.num_layers() - 1);
        for (n, i) in out_w.enumerate() {
            r.params_mut()[i] = 0.01 * ((n % 7) as f64 - 3.0);
        }
        let mut grads = [[0.0; 6]; 3];
        grads[1] = [0.3, -0.2, 0.1, 1.0, 0.5, -0.4];
        let g = r.backward(&poses, &grads).unwrap();
        assert!(g[r.embedding_range(1)].iter().any(|&v| v != 0.0));
        assert!(g[r.embedding_range(0)].iter().all(|&v| v == 0.0));
        assert!(g[r.embedding_range(2)].iter().all(|&v| v == 0.0));
        assert!(g[r.network_range()].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn non_finite_rejected() {
        let poses = ring(2);
        let d = DirectPoseParams::new(2);
        let r = d.backward(&poses, &[[f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0], [0.0; 6]]);
        assert!(matches!(r, Err(Error::NonFiniteGradient(_))));
    }
}
