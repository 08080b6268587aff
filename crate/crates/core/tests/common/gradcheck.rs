//! Central-difference probes shared by the gradient suite and the
//! acceptance run. Each returns the worst relative error it saw.

use gaussba::gaussians::{regularizer_loss, GaussianCloud};
use gaussba::geometry::{Intrinsics, Pose};
use gaussba::refiner::{PoseRefiner, RefinerConfig};
use gaussba::renderer::{photometric_loss, render, render_backward, ImageBuffer, LossWeights};
use gaussba::scene::{CorrespondenceSet, Edge, SceneGraph};
use gaussba::trainer::geometric_loss;
use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;

#[derive(Debug, Clone, Copy, Default)]
pub struct Probe {
    pub configs: usize,
    pub checked: usize,
    /// Coordinates whose ± steps crossed a non-smooth boundary.
    pub skipped: usize,
    pub worst: f64,
}

impl Probe {
    fn record(&mut self, analytic: f64, numeric: f64) {
        self.checked += 1;
        self.worst = self.worst.max(rel_err(analytic, numeric));
    }
}

fn random_intrinsics(rng: &mut impl Rng) -> Intrinsics {
    let w = rng.random_range(32..80);
    let h = rng.random_range(32..80);
    let f = rng.random_range(0.8..1.6) * w as f64;
    Intrinsics::new(
        f,
        f * rng.random_range(0.9..1.1),
        w as f64 / 2.0 + rng.random_range(-3.0..3.0),
        h as f64 / 2.0 + rng.random_range(-3.0..3.0),
        w,
        h,
    )
}

/// Cameras on a sphere cap looking near the origin, noisy matches of random
/// points, evaluated at slightly wrong poses.
fn random_graph(rng: &mut impl Rng) -> (SceneGraph, Vec<Pose>) {
    let n = rng.random_range(3..5);
    loop {
        let intrinsics: Vec<Intrinsics> = (0..n).map(|_| random_intrinsics(rng)).collect();
        let poses: Vec<Pose> = (0..n)
            .map(|_| {
                let th: f64 = rng.random_range(-0.8..0.8);
                let ph: f64 = rng.random_range(-0.3..0.3);
                let eye = Vector3::new(3.0 * th.sin() * ph.cos(), 3.0 * ph.sin(), -3.0 * th.cos() * ph.cos());
                let target = Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 0.0);
                Pose::look_at(&eye, &target, &Vector3::new(0.0, -1.0, 0.0))
            })
            .collect();
        let points: Vec<Vector3<f64>> = (0..60)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-0.8..0.8)))
            .collect();
        let mut edges = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                let mut m = CorrespondenceSet::default();
                for p in &points {
                    let pa = intrinsics[a].project(&poses[a].transform_point(p));
                    let pb = intrinsics[b].project(&poses[b].transform_point(p));
                    if let (Some(pa), Some(pb)) = (pa, pb) {
                        let noise = |rng: &mut dyn rand::RngCore| {
                            Vector2::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal))
                        };
                        m.points_a.push(pa + noise(rng));
                        m.points_b.push(pb + noise(rng));
                        m.confidence.push(rng.random_range(0.2..1.0));
                    }
                }
                if m.len() >= 8 {
                    edges.push(Edge { a, b, matches: m });
                }
            }
        }
        if edges.is_empty() {
            continue;
        }
        let graph = SceneGraph {
            intrinsics,
            initial_poses: poses.clone(),
            edges,
        };
        let eval_poses = poses
            .iter()
            .map(|p| {
                let xi: [f64; 6] = std::array::from_fn(|k| rng.random_range(-0.02..0.02) * if k < 3 { 1.0 } else { 2.0 });
                p.left_perturb(&xi)
            })
            .collect();
        return (graph, eval_poses);
    }
}

pub fn epipolar_probe(configs: u64) -> Probe {
    let mut probe = Probe::default();
    for seed in 0..configs {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (graph, poses) = random_graph(&mut rng);
        // A target above every edge's match count keeps all matches.
        let loss = |p: &[Pose]| geometric_loss(&graph, p, 10_000, 0).unwrap();
        let analytic = loss(&poses);
        for v in 0..poses.len() {
            for d in 0..6 {
                let fd = central_diff(1e-6, |h| {
                    let mut p = poses.clone();
                    let mut xi = [0.0; 6];
                    xi[d] = h;
                    p[v] = p[v].left_perturb(&xi);
                    loss(&p).value
                });
                probe.record(analytic.pose_grads[v][d], fd);
            }
        }
        probe.configs += 1;
    }
    probe
}

fn mix_index(i: usize) -> u64 {
    let mut z = (i as u64).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 27)
}

pub fn renderer_probe(configs: u64) -> Probe {
    let k = Intrinsics::centered(20.0, 16, 16);
    let weights = LossWeights::default();
    let mut probe = Probe::default();
    for seed in 0..configs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = random_cloud_in_view(&mut rng, 5);
        let target = ImageBuffer::from_rgb(16, 16, (0..16 * 16 * 3).map(|_| rng.random()).collect()).unwrap();
        let xi: [f64; 6] = std::array::from_fn(|_| rng.random_range(-0.03..0.03));
        let pose = Pose::identity().left_perturb(&xi);
        let (_, grads, _) = render_backward(&cloud, &pose, &k, &target, &weights).unwrap();
        let h = 1e-5;
        // The fingerprint also covers the sign of every residual, because
        // L1 has a kink wherever a rendered value crosses its target.
        let loss_of = |c: &GaussianCloud, p: &Pose| {
            let out = render(c, p, &k);
            let l = photometric_loss(&out.image, &target, &weights).unwrap().0.total;
            let signs = out
                .image
                .rgb
                .iter()
                .zip(&target.rgb)
                .enumerate()
                .fold(0u64, |acc, (i, (r, t))| if r > t { acc.wrapping_add(mix_index(i)) } else { acc });
            (l, (out.signature, signs))
        };
        for i in 0..cloud.len() {
            for p in ALL_PARAMS {
                let mut cp = cloud.clone();
                *param_mut(&mut cp.gaussians[i], p) += h;
                let mut cm = cloud.clone();
                *param_mut(&mut cm.gaussians[i], p) -= h;
                let (lp, sp) = loss_of(&cp, &pose);
                let (lm, sm) = loss_of(&cm, &pose);
                if sp != sm {
                    probe.skipped += 1;
                    continue;
                }
                probe.record(grad_of(&grads.gaussians, i, p), (lp - lm) / (2.0 * h));
            }
        }
        for d in 0..6 {
            let mut xi = [0.0; 6];
            xi[d] = h;
            let (lp, sp) = loss_of(&cloud, &pose.left_perturb(&xi));
            xi[d] = -h;
            let (lm, sm) = loss_of(&cloud, &pose.left_perturb(&xi));
            if sp != sm {
                probe.skipped += 1;
                continue;
            }
            probe.record(grads.camera[d], (lp - lm) / (2.0 * h));
        }
        probe.configs += 1;
    }
    probe
}

/// Objective `Σᵢ ⟨Aᵢ, Rᵢ⟩ + ⟨bᵢ, tᵢ⟩` over refined poses, whose left-tangent
/// gradient is known in closed form.
pub fn refiner_probe(configs: u64) -> Probe {
    let mut probe = Probe::default();
    for seed in 0..configs {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let n = rng.random_range(2..5);
        let cfg = RefinerConfig {
            embedding_dim: rng.random_range(2..6),
            hidden: (0..rng.random_range(1..3)).map(|_| rng.random_range(3..7)).collect(),
            embedding_std: 0.5,
        };
        let mut r = PoseRefiner::new(n, &cfg, &mut rng);
        for p in r.params_mut() {
            *p = rng.random_range(-0.4..0.4);
        }
        let initial: Vec<Pose> = (0..n).map(|_| random_pose(&mut rng)).collect();
        let a: Vec<Matrix3<f64>> = (0..n).map(|_| Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let b: Vec<Vector3<f64>> = (0..n).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let objective = |poses: &[Pose]| -> f64 {
            poses
                .iter()
                .enumerate()
                .map(|(i, p)| a[i].dot(&p.rotation) + b[i].dot(&p.translation))
                .sum()
        };
        let poses = r.refine_all(&initial).unwrap();
        let tangents: Vec<[f64; 6]> = poses
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut g = [0.0; 6];
                for k in 0..3 {
                    let e = Vector3::ith(k, 1.0);
                    g[k] = a[i].dot(&(gaussba::geometry::skew(&e) * p.rotation)) + b[i].dot(&e.cross(&p.translation));
                    g[3 + k] = b[i][k];
                }
                g
            })
            .collect();
        let grad = r.backward(&initial, &tangents).unwrap();
        for j in 0..r.params().len() {
            let fd = central_diff(1e-6, |h| {
                let mut rr = r.clone();
                rr.params_mut()[j] += h;
                objective(&rr.refine_all(&initial).unwrap())
            });
            probe.record(grad[j], fd);
        }
        probe.configs += 1;
    }
    probe
}

pub fn regularizer_probe(configs: u64) -> Probe {
    let mut probe = Probe::default();
    for seed in 0..configs {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let mut cloud = random_cloud_in_view(&mut rng, 50);
        for g in &mut cloud.gaussians {
            g.opacity_logit = rng.random_range(-4.0..4.0);
            g.log_scale = std::array::from_fn(|_| rng.random_range(-4.0..0.5));
        }
        let (lo, ls) = (rng.random_range(0.0..0.1), rng.random_range(0.0..0.1));
        let (_, grads) = regularizer_loss(&cloud, lo, ls);
        for i in 0..cloud.len() {
            for p in ALL_PARAMS {
                let fd = central_diff(1e-6, |h| {
                    let mut c = cloud.clone();
                    *param_mut(&mut c.gaussians[i], p) += h;
                    regularizer_loss(&c, lo, ls).0
                });
                probe.record(grad_of(&grads, i, p), fd);
            }
        }
        probe.configs += 1;
    }
    probe
}
