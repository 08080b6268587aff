//! Trajectory accuracy after similarity alignment, and novel-view scoring
//! with per-view pose optimization against a frozen cloud.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussians::GaussianCloud;
use crate::geometry::{procrustes_align, rotation_angle, umeyama, Intrinsics, Pose, Similarity};
use crate::optim::AdamMoments;
use crate::renderer::{psnr, render, render_backward, ssim, ImageBuffer, LossWeights};
use crate::scene::TestView;

/// How estimated and reference trajectories are brought into one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentMode {
    /// Similarity fitted to camera centers only.
    #[default]
    Centers,
    /// Similarity fitted to camera centers plus a point along each camera
    /// axis, so orientations also constrain the fit.
    CentersAndOrientation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics {
    /// Mean geodesic angle between aligned and reference rotations, degrees.
    pub rotation_error_deg: f64,
    /// RMSE of aligned center distances, times `ate_scale`.
    pub ate_rmse: f64,
    /// Mean translation error of relative motions, times `ate_scale`.
    pub rpe_t: f64,
    /// Mean rotation error of relative motions, degrees.
    pub rpe_r: f64,
}

fn alignment_points(poses: &[Pose], with_axes: bool) -> Vec<Vector3<f64>> {
    let centers: Vec<_> = poses.iter().map(Pose::center).collect();
    if !with_axes {
        return centers;
    }
    let mean = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let spread = (centers.iter().map(|c| (c - mean).norm_squared()).sum::<f64>() / centers.len() as f64).sqrt();
    let arm = if spread > 0.0 { spread } else { 1.0 };
    let mut pts = centers.clone();
    for (p, c) in poses.iter().zip(&centers) {
        // Camera axes in world coordinates are the rows of R.
        for k in 0..3 {
            pts.push(c + p.rotation.row(k).transpose() * arm);
        }
    }
    pts
}

/// Similarity taking `estimated` into the frame of `reference`.
pub fn align(estimated: &[Pose], reference: &[Pose], mode: AlignmentMode) -> Result<Similarity> {
    match mode {
        AlignmentMode::Centers => procrustes_align(estimated, reference),
        AlignmentMode::CentersAndOrientation => {
            umeyama(&alignment_points(estimated, true), &alignment_points(reference, true))
        }
    }
}

/// Pose accuracy of `estimated` against `ground_truth`. Relative errors use
/// pairs `(i, i + stride)`.
pub fn pose_metrics(
    estimated: &[Pose],
    ground_truth: &[Pose],
    ate_scale: f64,
    mode: AlignmentMode,
    stride: usize,
) -> Result<PoseMetrics> {
    if estimated.len() != ground_truth.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} estimated poses", ground_truth.len()),
            actual: estimated.len().to_string(),
        });
    }
    if estimated.len() < 3 {
        return Err(Error::DegenerateConfiguration(format!(
            "need at least 3 poses, got {}",
            estimated.len()
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidConfig("relative-pose stride must be at least 1".into()));
    }
    let sim = align(estimated, ground_truth, mode)?;
    let aligned: Vec<Pose> = estimated.iter().map(|p| sim.apply_pose(p)).collect();
    let n = aligned.len() as f64;

    let rotation_error_deg = aligned
        .iter()
        .zip(ground_truth)
        .map(|(a, g)| rotation_angle(&(g.rotation * a.rotation.transpose())).to_degrees())
        .sum::<f64>()
        / n;
    let ate = (aligned
        .iter()
        .zip(ground_truth)
        .map(|(a, g)| (a.center() - g.center()).norm_squared())
        .sum::<f64>()
        / n)
        .sqrt();

    let mut rpe_t = 0.0;
    let mut rpe_r = 0.0;
    let pairs: Vec<usize> = (0..aligned.len().saturating_sub(stride)).collect();
    for &i in &pairs {
        let j = i + stride;
        // Motion from camera j to camera i, for both trajectories.
        let rel_est = aligned[i].compose(&aligned[j].inverse());
        let rel_gt = ground_truth[i].compose(&ground_truth[j].inverse());
        let err = rel_gt.inverse().compose(&rel_est);
        rpe_t += err.translation.norm();
        rpe_r += rotation_angle(&err.rotation).to_degrees();
    }
    let m = pairs.len().max(1) as f64;
    Ok(PoseMetrics {
        rotation_error_deg,
        ate_rmse: ate * ate_scale,
        rpe_t: rpe_t / m * ate_scale,
        rpe_r: rpe_r / m,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestTimeResult {
    pub pose: Pose,
    pub psnr: f64,
    pub loss: f64,
    pub initial_loss: f64,
}

/// Adam on the camera's left tangent with the cloud frozen. The learning rate
/// decays exponentially to 1% over `steps`. Returns the highest-PSNR pose
/// among those whose loss does not exceed the initial loss.
pub fn test_time_pose_opt(
    cloud: &GaussianCloud,
    initial_pose: &Pose,
    k: &Intrinsics,
    target: &ImageBuffer,
    steps: usize,
    lr: f64,
) -> Result<TestTimeResult> {
    let weights = LossWeights::default();
    let mut pose = *initial_pose;
    let mut moments = AdamMoments::new(6);
    let mut best: Option<TestTimeResult> = None;
    let mut initial_loss = f64::NAN;
    for step in 0..=steps {
        let (loss, grads, out) = render_backward(cloud, &pose, k, target, &weights)?;
        if step == 0 {
            initial_loss = loss.total;
        }
        let score = psnr(&out.image, target)?;
        if loss.total <= initial_loss && best.is_none_or(|b| score > b.psnr) {
            best = Some(TestTimeResult {
                pose,
                psnr: score,
                loss: loss.total,
                initial_loss,
            });
        }
        if step == steps || score == f64::INFINITY {
            break;
        }
        if grads.camera.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient("test-time camera".into()));
        }
        let rate = lr * 0.01f64.powf(step as f64 / steps as f64);
        let mut xi = [0.0; 6];
        for (i, x) in xi.iter_mut().enumerate() {
            *x = -moments.delta(i, grads.camera[i], rate, step as u64 + 1);
        }
        pose = pose.left_perturb(&xi);
    }
    Ok(best.expect("the initial pose always qualifies"))
}

/// Novel-view quality averaged over held-out views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NovelViewReport {
    pub psnr: f64,
    pub ssim: f64,
    pub per_view_psnr: Vec<f64>,
}

/// Brings each held-out camera into the trained frame with the similarity
/// between the trained and true training trajectories, refines it against
/// the frozen cloud, then scores the render.
pub fn evaluate_novel_views(
    cloud: &GaussianCloud,
    trained_poses: &[Pose],
    gt_poses: &[Pose],
    test_views: &[TestView],
    steps: usize,
    lr: f64,
) -> Result<NovelViewReport> {
    if test_views.is_empty() {
        return Err(Error::InvalidConfig("no held-out views to evaluate".into()));
    }
    let to_trained = procrustes_align(gt_poses, trained_poses)?;
    let mut per_view_psnr = Vec::with_capacity(test_views.len());
    let mut ssim_sum = 0.0;
    for view in test_views {
        let start = to_trained.apply_pose(&view.pose);
        let result = test_time_pose_opt(cloud, &start, &view.intrinsics, &view.image, steps, lr)?;
        let img = render(cloud, &result.pose, &view.intrinsics).image;
        per_view_psnr.push(result.psnr);
        ssim_sum += ssim(&img, &view.image)?;
    }
    let n = test_views.len() as f64;
    Ok(NovelViewReport {
        psnr: per_view_psnr.iter().sum::<f64>() / n,
        ssim: ssim_sum / n,
        per_view_psnr,
    })
}
