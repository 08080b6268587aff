//! The joint optimization loop.
//!
//! Every step renders one training view, adds the epipolar loss over the
//! scene graph while its weight is positive, adds the parsimony regularizer,
//! and updates the cloud (with exploration noise) and the pose model. Dead
//! Gaussians are relocated at a fixed cadence.

use std::path::Path;
use std::time::Instant;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_novel_views, pose_metrics, AlignmentMode, NovelViewReport, PoseMetrics};
use crate::gaussians::{
    logit, regularizer_loss, relocate, sgld_step, Gaussian, GaussianCloud, GaussianLearningRates, GaussianOptimizer,
};
use crate::geometry::{fundamental_matrix, fundamental_matrix_backward, symmetric_epipolar_distance_grad, Pose, Tangent6};
use crate::optim::Adam;
use crate::refiner::{DirectPoseParams, PoseRefiner, RefinerConfig};
use crate::renderer::{render_backward, LossWeights};
use crate::scene::{scene_extent, subsample_correspondences, InitPoint, PoseRecord, Scene, SceneGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseMode {
    Frozen,
    Direct,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeoMode {
    Off,
    /// Every edge, every step.
    Global,
    /// One random edge per step.
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeoSchedule {
    /// Full weight before the decay iteration, zero from it on.
    Cutoff,
    /// Linear ramp from full weight to zero at the decay iteration.
    Linear,
    /// Full weight throughout.
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Multiplied by the scene extent.
    pub mean: f64,
    /// Final mean rate as a fraction of the initial one (exponential decay).
    pub mean_final_ratio: f64,
    pub log_scale: f64,
    pub rotation_q: f64,
    pub opacity_logit: f64,
    pub color: f64,
    /// Shared network weights and embeddings.
    pub refiner: f64,
    pub direct_pose: f64,
    /// Final pose rate as a fraction of the initial one (exponential decay).
    pub pose_final_ratio: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            mean: 1.6e-3,
            mean_final_ratio: 0.01,
            log_scale: 5e-3,
            rotation_q: 1e-3,
            opacity_logit: 5e-2,
            color: 1e-2,
            refiner: 3e-3,
            direct_pose: 1e-3,
            pose_final_ratio: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lambda_dssim: f64,
    pub lambda_o: f64,
    pub lambda_sigma: f64,
    pub lambda_geo: f64,
    /// Defaults to `iterations`.
    pub geo_decay_iteration: Option<usize>,
    pub geo_schedule: GeoSchedule,
    /// Exploration noise scale `b`; 0 disables the noise.
    pub noise_scale: f64,
    /// Relocation period in iterations; 0 disables relocation.
    pub relocation_every: usize,
    pub relocation_threshold: f64,
    pub lr: LearningRates,
    /// Correspondences kept per edge per step.
    pub subsample_target: usize,
    pub seed: u64,
    pub pose_mode: PoseMode,
    pub geo_mode: GeoMode,
    /// Keep photometric gradients away from the poses.
    pub detach_photometric_pose: bool,
    pub refiner: RefinerConfig,
    /// Summary cadence; 0 writes only the final record.
    pub checkpoint_every: usize,
    /// Test-time pose steps per held-out view at the end; 0 skips scoring.
    pub test_time_steps: usize,
    pub test_time_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            lambda_dssim: 0.2,
            lambda_o: 0.01,
            lambda_sigma: 0.01,
            lambda_geo: 2.0,
            geo_decay_iteration: None,
            geo_schedule: GeoSchedule::Cutoff,
            noise_scale: 1.0,
            relocation_every: 100,
            relocation_threshold: 0.005,
            lr: LearningRates::default(),
            subsample_target: 100,
            seed: 0,
            pose_mode: PoseMode::Mlp,
            geo_mode: GeoMode::Global,
            detach_photometric_pose: false,
            refiner: RefinerConfig::default(),
            checkpoint_every: 500,
            test_time_steps: 300,
            test_time_lr: 5e-3,
        }
    }
}

impl TrainConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let lambdas = [
            ("lambda_dssim", self.lambda_dssim),
            ("lambda_o", self.lambda_o),
            ("lambda_sigma", self.lambda_sigma),
            ("lambda_geo", self.lambda_geo),
            ("noise_scale", self.noise_scale),
        ];
        for (name, v) in lambdas {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.lambda_dssim > 1.0 {
            return bad("lambda_dssim must not exceed 1".into());
        }
        if self.geo_decay_iteration() > self.iterations {
            return bad(format!(
                "geo_decay_iteration {} exceeds iterations {}",
                self.geo_decay_iteration(),
                self.iterations
            ));
        }
        if self.relocation_every > 0 && !(self.relocation_threshold > 0.0 && self.relocation_threshold < 1.0) {
            return bad("relocation_threshold must lie in (0, 1)".into());
        }
        if self.subsample_target == 0 {
            return bad("subsample_target must be at least 1".into());
        }
        let lr = &self.lr;
        let rates = [
            lr.mean,
            lr.log_scale,
            lr.rotation_q,
            lr.opacity_logit,
            lr.color,
            lr.refiner,
            lr.direct_pose,
            self.test_time_lr,
        ];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return bad("learning rates must be finite and non-negative".into());
        }
        for r in [lr.mean_final_ratio, lr.pose_final_ratio] {
            if !(r > 0.0 && r <= 1.0) {
                return bad("final learning-rate ratios must lie in (0, 1]".into());
            }
        }
        if self.refiner.embedding_dim == 0 || self.refiner.hidden.contains(&0) {
            return bad("refiner layers must be non-empty".into());
        }
        Ok(())
    }

    pub fn geo_decay_iteration(&self) -> usize {
        self.geo_decay_iteration.unwrap_or(self.iterations)
    }

    /// Weight of the epipolar term at `iteration` (0-based).
    pub fn geo_weight(&self, iteration: usize) -> f64 {
        if self.geo_mode == GeoMode::Off {
            return 0.0;
        }
        let decay = self.geo_decay_iteration();
        match self.geo_schedule {
            GeoSchedule::Constant => self.lambda_geo,
            GeoSchedule::Cutoff if iteration < decay => self.lambda_geo,
            GeoSchedule::Linear if iteration < decay => self.lambda_geo * (1.0 - iteration as f64 / decay as f64),
            _ => 0.0,
        }
    }

    fn progress(&self, iteration: usize) -> f64 {
        if self.iterations <= 1 {
            0.0
        } else {
            iteration as f64 / (self.iterations - 1) as f64
        }
    }

    fn gaussian_rates(&self, iteration: usize, extent: f64) -> GaussianLearningRates {
        let decay = self.lr.mean_final_ratio.powf(self.progress(iteration));
        GaussianLearningRates {
            mean: self.lr.mean * extent * decay,
            log_scale: self.lr.log_scale,
            rotation_q: self.lr.rotation_q,
            opacity_logit: self.lr.opacity_logit,
            color: self.lr.color,
        }
    }

    fn pose_rate(&self, iteration: usize) -> f64 {
        let base = match self.pose_mode {
            PoseMode::Frozen => 0.0,
            PoseMode::Direct => self.lr.direct_pose,
            PoseMode::Mlp => self.lr.refiner,
        };
        base * self.lr.pose_final_ratio.powf(self.progress(iteration))
    }
}

/// SplitMix64 finalizer; derives independent seeds from one user seed.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Epipolar loss

#[derive(Debug, Clone, PartialEq)]
pub struct GeometricLoss {
    pub value: f64,
    /// Left-tangent gradient per view.
    pub pose_grads: Vec<Tangent6>,
    pub edges_used: usize,
    pub edges_skipped: usize,
}

/// Confidence-weighted mean epipolar distance per edge, averaged over every
/// edge with a usable baseline.
pub fn geometric_loss(graph: &SceneGraph, poses: &[Pose], subsample_target: usize, seed: u64) -> Result<GeometricLoss> {
    let all: Vec<usize> = (0..graph.edges.len()).collect();
    geometric_loss_on(graph, poses, &all, subsample_target, seed)
}

/// [`geometric_loss`] restricted to the listed edges.
pub fn geometric_loss_on(
    graph: &SceneGraph,
    poses: &[Pose],
    edges: &[usize],
    subsample_target: usize,
    seed: u64,
) -> Result<GeometricLoss> {
    if edges.is_empty() {
        return Err(Error::EmptyGraph);
    }
    if poses.len() != graph.num_views() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} poses", graph.num_views()),
            actual: poses.len().to_string(),
        });
    }
    // Per edge: mean weighted distance and the gradient of that mean w.r.t. F.
    let per_edge: Vec<Option<(f64, Matrix3<f64>)>> = edges
        .par_iter()
        .map(|&e| {
            let edge = &graph.edges[e];
            let (ka, kb) = (&graph.intrinsics[edge.a], &graph.intrinsics[edge.b]);
            let f = match fundamental_matrix(&poses[edge.a], &poses[edge.b], ka, kb) {
                Ok(f) => f,
                Err(err) => {
                    log::warn!("skipping edge ({}, {}): {err}", edge.a, edge.b);
                    return None;
                }
            };
            let m = subsample_correspondences(&edge.matches, subsample_target, mix_seed(seed, e as u64));
            let mut sum = 0.0;
            let mut grad = Matrix3::zeros();
            let mut count = 0usize;
            for ((x, xp), c) in m.points_a.iter().zip(&m.points_b).zip(&m.confidence) {
                // A match sitting on both epipoles carries no information.
                if let Ok((d, g)) = symmetric_epipolar_distance_grad(x, xp, &f) {
                    sum += c * d;
                    grad += g * *c;
                    count += 1;
                }
            }
            (count > 0).then(|| (sum / count as f64, grad / count as f64))
        })
        .collect();

    let used = per_edge.iter().filter(|r| r.is_some()).count();
    if used == 0 {
        return Err(Error::EmptyGraph);
    }
    let inv = 1.0 / used as f64;
    let mut value = 0.0;
    let mut pose_grads = vec![[0.0; 6]; poses.len()];
    for (&e, r) in edges.iter().zip(&per_edge) {
        let Some((mean, grad_f)) = r else { continue };
        value += mean * inv;
        let edge = &graph.edges[e];
        let (ga, gb) = fundamental_matrix_backward(
            &poses[edge.a],
            &poses[edge.b],
            &graph.intrinsics[edge.a],
            &graph.intrinsics[edge.b],
            &(grad_f * inv),
        );
        for k in 0..6 {
            pose_grads[edge.a][k] += ga[k];
            pose_grads[edge.b][k] += gb[k];
        }
    }
    Ok(GeometricLoss {
        value,
        pose_grads,
        edges_used: used,
        edges_skipped: edges.len() - used,
    })
}

// ---------------------------------------------------------------------------
// State

/// The learnable pose corrections, if any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PoseModel {
    Frozen,
    Direct(DirectPoseParams),
    Mlp(PoseRefiner),
}

impl PoseModel {
    pub fn new(mode: PoseMode, num_views: usize, refiner: &RefinerConfig, seed: u64) -> Self {
        match mode {
            PoseMode::Frozen => PoseModel::Frozen,
            PoseMode::Direct => PoseModel::Direct(DirectPoseParams::new(num_views)),
            PoseMode::Mlp => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                PoseModel::Mlp(PoseRefiner::new(num_views, refiner, &mut rng))
            }
        }
    }

    pub fn refine_all(&self, initial: &[Pose]) -> Result<Vec<Pose>> {
        match self {
            PoseModel::Frozen => Ok(initial.to_vec()),
            PoseModel::Direct(d) => d.refine_all(initial),
            PoseModel::Mlp(m) => m.refine_all(initial),
        }
    }

    fn num_params(&self) -> usize {
        match self {
            PoseModel::Frozen => 0,
            PoseModel::Direct(d) => d.params().len(),
            PoseModel::Mlp(m) => m.params().len(),
        }
    }

    fn update(&mut self, adam: &mut Adam, initial: &[Pose], grads: &[Tangent6], lr: f64) -> Result<()> {
        let g = match self {
            PoseModel::Frozen => return Ok(()),
            PoseModel::Direct(d) => d.backward(initial, grads)?,
            PoseModel::Mlp(m) => m.backward(initial, grads)?,
        };
        let params = match self {
            PoseModel::Frozen => unreachable!(),
            PoseModel::Direct(d) => d.params_mut(),
            PoseModel::Mlp(m) => m.params_mut(),
        };
        adam.step(params, &g, lr);
        Ok(())
    }
}

/// Isotropic Gaussians at the seed points, sized by the mean distance to the
/// three nearest neighbours, at opacity 0.5.
pub fn initial_cloud(points: &[InitPoint]) -> Result<GaussianCloud> {
    if points.is_empty() {
        return Err(Error::InvalidConfig("scene has no initialization points".into()));
    }
    let pos: Vec<nalgebra::Vector3<f64>> = points.iter().map(|p| p.position.into()).collect();
    let gaussians = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = pos
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| (q - pos[i]).norm())
                .collect();
            d.sort_by(f64::total_cmp);
            let nn = &d[..d.len().min(3)];
            let scale = if nn.is_empty() {
                0.1
            } else {
                (nn.iter().sum::<f64>() / nn.len() as f64).max(1e-4)
            };
            Gaussian {
                mean: p.position,
                log_scale: [scale.ln(); 3],
                rotation_q: [1.0, 0.0, 0.0, 0.0],
                opacity_logit: logit(0.5),
                color: p.color,
            }
        })
        .collect();
    Ok(GaussianCloud::new(gaussians))
}

/// Losses of one step. `l_geo` is present only when the term was evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: usize,
    pub view: usize,
    pub l_orig: f64,
    pub l1: f64,
    pub dssim: f64,
    pub l_geo: Option<f64>,
    pub geo_weight: f64,
    pub l_reg: f64,
    pub total: f64,
    pub relocated: usize,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub cloud: GaussianCloud,
    pub pose_model: PoseModel,
    gaussian_opt: GaussianOptimizer,
    pose_opt: Adam,
    pub iteration: usize,
    rng: ChaCha8Rng,
    pub history: Vec<StepReport>,
    /// Radius of the initial camera cluster.
    pub extent: f64,
}

impl TrainState {
    pub fn new(scene: &Scene, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let graph = &scene.graph;
        graph.validate()?;
        if scene.images.len() != graph.num_views() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} images", graph.num_views()),
                actual: scene.images.len().to_string(),
            });
        }
        if config.geo_mode != GeoMode::Off && graph.edges.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let cloud = initial_cloud(&scene.init_points)?;
        let pose_model = PoseModel::new(config.pose_mode, graph.num_views(), &config.refiner, mix_seed(config.seed, 1));
        Ok(Self {
            gaussian_opt: GaussianOptimizer::new(cloud.len()),
            pose_opt: Adam::new(pose_model.num_params()),
            cloud,
            pose_model,
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 2)),
            history: Vec::new(),
            extent: scene_extent(&graph.initial_poses),
        })
    }

    pub fn refined_poses(&self, scene: &Scene) -> Result<Vec<Pose>> {
        self.pose_model.refine_all(&scene.graph.initial_poses)
    }

    pub fn checkpoint(&self, scene: &Scene) -> Result<Checkpoint> {
        Ok(Checkpoint {
            iteration: self.iteration,
            gaussians: self.cloud.gaussians.clone(),
            pose_model: self.pose_model.clone(),
            poses: self.refined_poses(scene)?.iter().map(PoseRecord::from).collect(),
        })
    }
}

/// One optimization step.
pub fn train_step(state: &mut TrainState, config: &TrainConfig, scene: &Scene) -> Result<StepReport> {
    let graph = &scene.graph;
    let it = state.iteration;
    let view = state.rng.random_range(0..graph.num_views());
    let poses = state.pose_model.refine_all(&graph.initial_poses)?;

    let weights = LossWeights {
        lambda_dssim: config.lambda_dssim,
    };
    let (photo, render_grads, _) =
        render_backward(&state.cloud, &poses[view], &graph.intrinsics[view], &scene.images[view], &weights)?;

    let mut pose_grads = vec![[0.0; 6]; graph.num_views()];
    if !config.detach_photometric_pose {
        pose_grads[view] = render_grads.camera;
    }

    let geo_weight = config.geo_weight(it);
    let mut l_geo = None;
    if geo_weight > 0.0 {
        let seed = mix_seed(config.seed, 1_000_003 + it as u64);
        let geo = match config.geo_mode {
            GeoMode::Off => unreachable!("weight is zero when the term is off"),
            GeoMode::Global => Some(geometric_loss(graph, &poses, config.subsample_target, seed)?),
            GeoMode::Local => {
                let e = state.rng.random_range(0..graph.edges.len());
                match geometric_loss_on(graph, &poses, &[e], config.subsample_target, seed) {
                    Ok(g) => Some(g),
                    Err(Error::EmptyGraph) => None,
                    Err(err) => return Err(err),
                }
            }
        };
        if let Some(geo) = geo {
            for (pg, g) in pose_grads.iter_mut().zip(&geo.pose_grads) {
                for k in 0..6 {
                    pg[k] += geo_weight * g[k];
                }
            }
            l_geo = Some(geo.value);
        }
    }

    let (l_reg, reg_grads) = regularizer_loss(&state.cloud, config.lambda_o, config.lambda_sigma);
    let mut grads = render_grads.gaussians;
    grads.add_assign(&reg_grads);

    let rates = config.gaussian_rates(it, state.extent);
    sgld_step(
        &mut state.cloud,
        &grads,
        &mut state.gaussian_opt,
        &rates,
        config.noise_scale,
        &mut state.rng,
    )?;
    state
        .pose_model
        .update(&mut state.pose_opt, &graph.initial_poses, &pose_grads, config.pose_rate(it))?;

    let mut relocated = 0;
    if config.relocation_every > 0 && (it + 1) % config.relocation_every == 0 {
        let moved = relocate(&mut state.cloud, config.relocation_threshold, &mut state.rng)?;
        for i in moved.touched() {
            state.gaussian_opt.reset(i);
        }
        relocated = moved.count();
    }

    let total = photo.total + geo_weight * l_geo.unwrap_or(0.0) + l_reg;
    if !total.is_finite() {
        return Err(Error::NonFiniteGradient(format!("loss at iteration {it}")));
    }
    let report = StepReport {
        iteration: it,
        view,
        l_orig: photo.total,
        l1: photo.l1,
        dssim: photo.dssim,
        l_geo,
        geo_weight,
        l_reg,
        total,
        relocated,
    };
    state.iteration += 1;
    state.history.push(report);
    Ok(report)
}

// ---------------------------------------------------------------------------
// Full runs

/// Losses averaged over the steps since the previous record, plus accuracy
/// against ground truth when the scene has it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub iteration: usize,
    pub l_orig: f64,
    pub l1: f64,
    pub dssim: f64,
    pub l_geo: Option<f64>,
    pub l_reg: f64,
    pub total: f64,
    pub relocated: usize,
    pub pose: Option<PoseMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub novel_view: Option<NovelViewReport>,
}

/// Wall-clock time at a summary record, kept apart so summaries stay
/// reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub iteration: usize,
    pub wall_seconds: f64,
}

/// Cloud and pose model in one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: usize,
    pub gaussians: Vec<Gaussian>,
    pub pose_model: PoseModel,
    /// Refined world-to-camera poses at this iteration.
    pub poses: Vec<PoseRecord>,
}

impl Checkpoint {
    pub fn cloud(&self) -> GaussianCloud {
        GaussianCloud::new(self.gaussians.clone())
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.poses.iter().map(Pose::from).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub state: TrainState,
    pub summary: Vec<SummaryRecord>,
    pub timing: Vec<TimingRecord>,
}

fn summarize(
    state: &TrainState,
    scene: &Scene,
    config: &TrainConfig,
    since: usize,
    final_record: bool,
) -> Result<SummaryRecord> {
    let window = &state.history[since..];
    let n = window.len().max(1) as f64;
    let mean = |f: fn(&StepReport) -> f64| window.iter().map(f).sum::<f64>() / n;
    let geo: Vec<f64> = window.iter().filter_map(|r| r.l_geo).collect();
    let poses = state.refined_poses(scene)?;
    let pose = match &scene.gt_poses {
        Some(gt) => Some(pose_metrics(&poses, gt, 1.0, AlignmentMode::Centers, 1)?),
        None => None,
    };
    let novel_view = match (&scene.gt_poses, final_record && config.test_time_steps > 0) {
        (Some(gt), true) if !scene.test_views.is_empty() => Some(evaluate_novel_views(
            &state.cloud,
            &poses,
            gt,
            &scene.test_views,
            config.test_time_steps,
            config.test_time_lr,
        )?),
        _ => None,
    };
    Ok(SummaryRecord {
        iteration: state.iteration,
        l_orig: mean(|r| r.l_orig),
        l1: mean(|r| r.l1),
        dssim: mean(|r| r.dssim),
        l_geo: (!geo.is_empty()).then(|| geo.iter().sum::<f64>() / geo.len() as f64),
        l_reg: mean(|r| r.l_reg),
        total: mean(|r| r.total),
        relocated: window.iter().map(|r| r.relocated).sum(),
        pose,
        novel_view,
    })
}

/// Runs `config.iterations` steps, calling `on_record` at every summary.
pub fn train_with(
    scene: &Scene,
    config: &TrainConfig,
    mut on_record: impl FnMut(&TrainState, &SummaryRecord) -> Result<()>,
) -> Result<TrainRun> {
    let mut state = TrainState::new(scene, config)?;
    let start = Instant::now();
    let mut summary = Vec::new();
    let mut timing = Vec::new();
    let mut since = 0;
    for it in 0..config.iterations {
        train_step(&mut state, config, scene)?;
        let last = it + 1 == config.iterations;
        let due = config.checkpoint_every > 0 && (it + 1) % config.checkpoint_every == 0;
        if due || last {
            let record = summarize(&state, scene, config, since, last)?;
            on_record(&state, &record)?;
            summary.push(record);
            timing.push(TimingRecord {
                iteration: state.iteration,
                wall_seconds: start.elapsed().as_secs_f64(),
            });
            since = state.iteration;
        }
    }
    Ok(TrainRun { state, summary, timing })
}

pub fn train(scene: &Scene, config: &TrainConfig) -> Result<TrainRun> {
    train_with(scene, config, |_, _| Ok(()))
}

// ---------------------------------------------------------------------------
// Ablation grid

/// Named configuration patches, applied in order on top of a base config.
/// The first four rows are cumulative.
pub const ABLATION_ROWS: &[(&str, &str)] = &[
    (
        "3dgs",
        r#"{"pose_mode": "direct", "geo_mode": "off", "noise_scale": 0.0, "relocation_every": 0,
            "lambda_o": 0.0, "lambda_sigma": 0.0}"#,
    ),
    ("mcmc", r#"{"pose_mode": "direct", "geo_mode": "off"}"#),
    ("mlp", r#"{"pose_mode": "mlp", "geo_mode": "off"}"#),
    ("geo", r#"{"pose_mode": "mlp", "geo_mode": "global"}"#),
    (
        "geo_only",
        r#"{"pose_mode": "mlp", "geo_mode": "global", "detach_photometric_pose": true,
            "geo_schedule": "constant"}"#,
    ),
    ("local_geo", r#"{"pose_mode": "mlp", "geo_mode": "local"}"#),
];

fn merge_json(base: &mut serde_json::Value, patch: &serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge_json(b.entry(k.clone()).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// `base` with a JSON object merged over it (nested objects merge per key).
pub fn patch_config(base: &TrainConfig, patch: &str) -> Result<TrainConfig> {
    let invalid = |e: serde_json::Error| Error::InvalidConfig(e.to_string());
    let mut value = serde_json::to_value(base).map_err(invalid)?;
    let patch: serde_json::Value = serde_json::from_str(patch).map_err(invalid)?;
    merge_json(&mut value, &patch);
    let cfg: TrainConfig = serde_json::from_value(value).map_err(invalid)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Every ablation row applied to `base`.
pub fn ablation_configs(base: &TrainConfig) -> Result<Vec<(String, TrainConfig)>> {
    ABLATION_ROWS
        .iter()
        .map(|(name, patch)| Ok((name.to_string(), patch_config(base, patch)?)))
        .collect()
}
