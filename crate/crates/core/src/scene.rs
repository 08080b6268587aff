//! Scene graphs, the on-disk scene format and the synthetic scene generator.
//!
//! # File format
//!
//! A scene is one UTF-8 JSON document:
//!
//! ```text
//! {
//!   "views":  [{ "intrinsics": {fx, fy, cx, cy, width, height},
//!                "rotation": [9 numbers, row-major, world-to-camera],
//!                "translation": [3 numbers],
//!                "image": "optional path to a binary PPM, relative to the file" }],
//!   "edges":  [{ "a": 0, "b": 1,
//!                "points_a": [[x, y], ...], "points_b": [[x, y], ...],
//!                "confidence": [...] }],
//!   "gaussians":   optional ground-truth cloud,
//!   "gt_poses":    optional [{ "rotation": [...], "translation": [...] }],
//!   "init_points": optional [{ "position": [3], "color": [3] }],
//!   "test_views":  optional held-out views, same shape as "views"
//! }
//! ```
//!
//! Correspondence coordinates are raw pixels in each view's image, with pixel
//! centers at integer coordinates. Confidences may be any positive number.
//! When both `gaussians` and `gt_poses` are present, target images are
//! rendered from them on load instead of being read from disk.
//!
//! # Importing registrations from a pairwise matcher
//!
//! [`graph_from_pairwise`] builds a [`SceneGraph`] from arrays that a
//! pairwise reconstruction front end already provides: one world-to-camera
//! pose and one pinhole camera per image, plus per-pair pixel matches with a
//! confidence each. Reading any particular tool's native output into those
//! arrays is left to the caller. Camera-to-world outputs must be inverted,
//! and matches in normalized coordinates must be mapped back to pixels with
//! the view's intrinsics.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussians::{logit, Gaussian, GaussianCloud};
use crate::geometry::{so3_exp, Intrinsics, Pose};
use crate::renderer::{render, ImageBuffer, NEAR_PLANE};

/// Fewest correspondences an edge may carry.
pub const MIN_EDGE_CORRESPONDENCES: usize = 8;

/// Parallel lists of matched pixels and their confidences.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet {
    pub points_a: Vec<Vector2<f64>>,
    pub points_b: Vec<Vector2<f64>>,
    pub confidence: Vec<f64>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.points_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points_a.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points_a: indices.iter().map(|&i| self.points_a[i]).collect(),
            points_b: indices.iter().map(|&i| self.points_b[i]).collect(),
            confidence: indices.iter().map(|&i| self.confidence[i]).collect(),
        }
    }

    fn swapped(self) -> Self {
        Self {
            points_a: self.points_b,
            points_b: self.points_a,
            confidence: self.confidence,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub matches: CorrespondenceSet,
}

/// Views, their cameras and initial poses, and the pairwise match graph.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    pub intrinsics: Vec<Intrinsics>,
    pub initial_poses: Vec<Pose>,
    pub edges: Vec<Edge>,
}

impl SceneGraph {
    pub fn num_views(&self) -> usize {
        self.initial_poses.len()
    }

    /// Checks every structural invariant; errors name the offending record.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_views();
        if self.intrinsics.len() != n {
            return Err(Error::validation(
                "views",
                format!("{} intrinsics for {n} poses", self.intrinsics.len()),
            ));
        }
        for (i, k) in self.intrinsics.iter().enumerate() {
            k.validate().map_err(|e| Error::validation(format!("views[{i}].intrinsics"), e.to_string()))?;
        }
        for (i, p) in self.initial_poses.iter().enumerate() {
            if !p.is_valid() {
                return Err(Error::validation(format!("views[{i}]"), "rotation is not orthonormal"));
            }
        }
        let mut seen = BTreeSet::new();
        for (e, edge) in self.edges.iter().enumerate() {
            let loc = format!("edges[{e}] ({}, {})", edge.a, edge.b);
            if edge.a == edge.b {
                return Err(Error::validation(loc, "self-edge"));
            }
            if edge.a > edge.b {
                return Err(Error::validation(loc, "edge must be stored with a < b"));
            }
            if edge.b >= n {
                return Err(Error::validation(loc, format!("view index out of range (num_views = {n})")));
            }
            if !seen.insert((edge.a, edge.b)) {
                return Err(Error::validation(loc, "duplicate edge"));
            }
            let m = &edge.matches;
            if m.points_b.len() != m.points_a.len() || m.confidence.len() != m.points_a.len() {
                return Err(Error::validation(
                    loc,
                    format!(
                        "length mismatch: {} points_a, {} points_b, {} confidences",
                        m.points_a.len(),
                        m.points_b.len(),
                        m.confidence.len()
                    ),
                ));
            }
            if m.len() < MIN_EDGE_CORRESPONDENCES {
                return Err(Error::validation(
                    loc,
                    format!("{} correspondences, need at least {MIN_EDGE_CORRESPONDENCES}", m.len()),
                ));
            }
            if let Some(j) = m.confidence.iter().position(|c| !(c.is_finite() && *c > 0.0)) {
                return Err(Error::validation(loc, format!("confidence[{j}] must be positive")));
            }
            let finite = |v: &Vector2<f64>| v.x.is_finite() && v.y.is_finite();
            if !m.points_a.iter().chain(&m.points_b).all(finite) {
                return Err(Error::validation(loc, "non-finite pixel coordinate"));
            }
        }
        Ok(())
    }
}

/// Builds a validated graph from per-view cameras and per-pair matches.
/// Pairs given as `(b, a)` with `b > a` are flipped.
pub fn graph_from_pairwise(
    poses: Vec<Pose>,
    intrinsics: Vec<Intrinsics>,
    pairs: Vec<(usize, usize, CorrespondenceSet)>,
) -> Result<SceneGraph> {
    let edges = pairs
        .into_iter()
        .map(|(a, b, matches)| {
            if a > b {
                Edge {
                    a: b,
                    b: a,
                    matches: matches.swapped(),
                }
            } else {
                Edge { a, b, matches }
            }
        })
        .collect();
    let graph = SceneGraph {
        intrinsics,
        initial_poses: poses,
        edges,
    };
    graph.validate()?;
    Ok(graph)
}

/// Seed point for the initial Gaussian cloud.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitPoint {
    pub position: [f64; 3],
    pub color: [f64; 3],
}

/// Held-out camera with its true pose and target image.
#[derive(Debug, Clone, PartialEq)]
pub struct TestView {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub image: ImageBuffer,
}

/// Everything training and evaluation need: the graph, one target image per
/// view, initialization points and, for synthetic scenes, ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub graph: SceneGraph,
    pub images: Vec<ImageBuffer>,
    pub init_points: Vec<InitPoint>,
    pub gt_poses: Option<Vec<Pose>>,
    pub gt_gaussians: Option<GaussianCloud>,
    pub test_views: Vec<TestView>,
}

/// A generated scene with complete ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub gt_gaussians: GaussianCloud,
    pub gt_poses: Vec<Pose>,
    pub gt_images: Vec<ImageBuffer>,
    /// Initial poses here are the perturbed ones.
    pub graph: SceneGraph,
    pub init_points: Vec<InitPoint>,
    pub test_views: Vec<TestView>,
}

impl From<SyntheticScene> for Scene {
    fn from(s: SyntheticScene) -> Self {
        Scene {
            graph: s.graph,
            images: s.gt_images,
            init_points: s.init_points,
            gt_poses: Some(s.gt_poses),
            gt_gaussians: Some(s.gt_gaussians),
            test_views: s.test_views,
        }
    }
}

// ---------------------------------------------------------------------------
// Serialization

/// A pose as stored on disk: row-major rotation and translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl From<&Pose> for PoseRecord {
    fn from(p: &Pose) -> Self {
        let r = &p.rotation;
        Self {
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: p.translation.into(),
        }
    }
}

impl From<&PoseRecord> for Pose {
    fn from(r: &PoseRecord) -> Self {
        Pose::new(Matrix3::from_row_slice(&r.rotation), Vector3::from(r.translation))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ViewRecord {
    intrinsics: Intrinsics,
    #[serde(flatten)]
    pose: PoseRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EdgeRecord {
    a: usize,
    b: usize,
    points_a: Vec<[f64; 2]>,
    points_b: Vec<[f64; 2]>,
    confidence: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SceneFile {
    views: Vec<ViewRecord>,
    edges: Vec<EdgeRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gaussians: Option<Vec<Gaussian>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_poses: Option<Vec<PoseRecord>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    init_points: Vec<InitPoint>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    test_views: Vec<ViewRecord>,
}

impl SceneFile {
    fn from_graph(graph: &SceneGraph) -> Self {
        let views = graph
            .intrinsics
            .iter()
            .zip(&graph.initial_poses)
            .map(|(k, p)| ViewRecord {
                intrinsics: *k,
                pose: p.into(),
                image: None,
            })
            .collect();
        let pts = |v: &[Vector2<f64>]| v.iter().map(|p| [p.x, p.y]).collect();
        let edges = graph
            .edges
            .iter()
            .map(|e| EdgeRecord {
                a: e.a,
                b: e.b,
                points_a: pts(&e.matches.points_a),
                points_b: pts(&e.matches.points_b),
                confidence: e.matches.confidence.clone(),
            })
            .collect();
        SceneFile {
            views,
            edges,
            gaussians: None,
            gt_poses: None,
            init_points: Vec::new(),
            test_views: Vec::new(),
        }
    }

    fn graph(&self) -> Result<SceneGraph> {
        let pts = |v: &[[f64; 2]]| v.iter().map(|p| Vector2::new(p[0], p[1])).collect();
        let graph = SceneGraph {
            intrinsics: self.views.iter().map(|v| v.intrinsics).collect(),
            initial_poses: self.views.iter().map(|v| Pose::from(&v.pose)).collect(),
            edges: self
                .edges
                .iter()
                .map(|e| Edge {
                    a: e.a,
                    b: e.b,
                    matches: CorrespondenceSet {
                        points_a: pts(&e.points_a),
                        points_b: pts(&e.points_b),
                        confidence: e.confidence.clone(),
                    },
                })
                .collect(),
        };
        graph.validate()?;
        Ok(graph)
    }
}

fn read_scene_file(path: &Path) -> Result<SceneFile> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn write_json(path: &Path, file: &SceneFile) -> Result<()> {
    let text = serde_json::to_string(file).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Reads and validates the graph part of a scene file.
pub fn load_scene(path: &Path) -> Result<SceneGraph> {
    read_scene_file(path)?.graph()
}

pub fn save_scene(graph: &SceneGraph, path: &Path) -> Result<()> {
    write_json(path, &SceneFile::from_graph(graph))
}

/// Reads a scene file with its images, ground truth and test views.
pub fn load_scene_bundle(path: &Path) -> Result<Scene> {
    let file = read_scene_file(path)?;
    let graph = file.graph()?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let gt_poses: Option<Vec<Pose>> = file
        .gt_poses
        .as_ref()
        .map(|v| v.iter().map(Pose::from).collect());
    if let Some(gt) = &gt_poses {
        if gt.len() != graph.num_views() {
            return Err(Error::validation(
                "gt_poses",
                format!("{} poses for {} views", gt.len(), graph.num_views()),
            ));
        }
    }
    let gt_gaussians = file.gaussians.clone().map(GaussianCloud::new);
    let image_for = |loc: String, view: &ViewRecord, pose: Option<&Pose>| -> Result<ImageBuffer> {
        match (&gt_gaussians, pose, &view.image) {
            (Some(cloud), Some(pose), _) => Ok(render(cloud, pose, &view.intrinsics).image),
            (_, _, Some(rel)) => {
                let img = ImageBuffer::read_ppm(&resolve(&base, rel))?;
                if img.width != view.intrinsics.width || img.height != view.intrinsics.height {
                    return Err(Error::validation(loc, "image size does not match intrinsics"));
                }
                Ok(img)
            }
            _ => Err(Error::validation(loc, "no image and no ground truth to render one")),
        }
    };
    let images = file
        .views
        .iter()
        .enumerate()
        .map(|(i, v)| image_for(format!("views[{i}]"), v, gt_poses.as_ref().map(|g| &g[i])))
        .collect::<Result<Vec<_>>>()?;
    let test_views = file
        .test_views
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let pose = Pose::from(&v.pose);
            Ok(TestView {
                intrinsics: v.intrinsics,
                pose,
                image: image_for(format!("test_views[{i}]"), v, Some(&pose))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene {
        graph,
        images,
        init_points: file.init_points,
        gt_poses,
        gt_gaussians,
        test_views,
    })
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Writes a scene. Images are not written when ground truth can regenerate
/// them; otherwise they are stored as PPM files next to the scene file.
pub fn save_scene_bundle(scene: &Scene, path: &Path) -> Result<()> {
    let mut file = SceneFile::from_graph(&scene.graph);
    file.gt_poses = scene.gt_poses.as_ref().map(|v| v.iter().map(PoseRecord::from).collect());
    file.gaussians = scene.gt_gaussians.as_ref().map(|c| c.gaussians.clone());
    file.init_points = scene.init_points.clone();
    let renders = scene.gt_poses.is_some() && scene.gt_gaussians.is_some();
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scene").to_string();
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let store = |name: String, img: &ImageBuffer| -> Result<Option<String>> {
        if renders {
            return Ok(None);
        }
        img.write_ppm(&dir.join(&name))?;
        Ok(Some(name))
    };
    for (i, (view, img)) in file.views.iter_mut().zip(&scene.images).enumerate() {
        view.image = store(format!("{stem}_view{i:03}.ppm"), img)?;
    }
    for (i, tv) in scene.test_views.iter().enumerate() {
        file.test_views.push(ViewRecord {
            intrinsics: tv.intrinsics,
            pose: (&tv.pose).into(),
            image: store(format!("{stem}_test{i:03}.ppm"), &tv.image)?,
        });
    }
    write_json(path, &file)
}

// ---------------------------------------------------------------------------
// Subsampling and perturbation

/// Uniform subset of at most `target` matches, in original order.
pub fn subsample_correspondences(set: &CorrespondenceSet, target: usize, seed: u64) -> CorrespondenceSet {
    if set.len() <= target {
        return set.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, set.len(), target).into_vec();
    idx.sort_unstable();
    set.select(&idx)
}

fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        let n: f64 = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn gaussian_vec(rng: &mut impl Rng, sigma: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * sigma
    })
}

/// Magnitudes of the pose error injected into a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Drift {
    /// Angle of the shared rotation, degrees.
    pub shared_rotation_deg: f64,
    /// Length of the shared translation, scene units.
    pub shared_translation: f64,
    /// Per-axis standard deviation of the per-pose rotation jitter, degrees.
    pub jitter_rotation_deg: f64,
    /// Per-axis standard deviation of the per-pose translation jitter.
    pub jitter_translation: f64,
}

/// Left-multiplies one shared random rigid error onto every pose, then an
/// independent jitter onto each.
///
/// The shared error has exactly the given rotation angle and translation
/// length along uniformly random directions. Jitter components are
/// independent normals with the given standard deviations.
pub fn perturb_poses(poses: &[Pose], drift: &Drift, seed: u64) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = random_unit(&mut rng);
    let dir = random_unit(&mut rng);
    let shared = Pose::new(
        so3_exp(&(axis * drift.shared_rotation_deg.to_radians())),
        dir * drift.shared_translation,
    );
    poses
        .iter()
        .map(|p| {
            let w = gaussian_vec(&mut rng, drift.jitter_rotation_deg.to_radians());
            let v = gaussian_vec(&mut rng, drift.jitter_translation);
            let jitter = Pose::new(so3_exp(&w), v);
            jitter.compose(&shared).compose(p)
        })
        .collect()
}

/// Radius of the camera cluster: 1.1 × the largest center distance from the
/// mean center.
pub fn scene_extent(poses: &[Pose]) -> f64 {
    if poses.is_empty() {
        return 0.0;
    }
    let centers: Vec<_> = poses.iter().map(Pose::center).collect();
    let mean = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    1.1 * centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Synthetic generation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trajectory {
    /// Full circle around the scene.
    Ring,
    /// 120° arc.
    Arc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    Full,
    /// Each view is linked to the next `k` views by index.
    KNearest(usize),
}

/// Parameters of [`generate_synthetic`]. Drift translations are fractions of
/// the ground-truth [`scene_extent`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_views: usize,
    pub num_test_views: usize,
    pub num_gaussians: usize,
    pub width: usize,
    pub height: usize,
    pub trajectory: Trajectory,
    pub camera_distance: f64,
    pub correspondences_per_edge: usize,
    pub connectivity: Connectivity,
    pub drift: Drift,
    /// Standard deviation of the noise on initialization points.
    pub init_point_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::standard_benchmark(0)
    }
}

impl SyntheticSpec {
    /// 20 views on a ring, 500 Gaussians, 64×64 images, full connectivity,
    /// 2° + 2% shared drift and 0.5° + 0.5% jitter.
    pub fn standard_benchmark(seed: u64) -> Self {
        Self {
            num_views: 20,
            num_test_views: 5,
            num_gaussians: 500,
            width: 64,
            height: 64,
            trajectory: Trajectory::Ring,
            camera_distance: 3.0,
            correspondences_per_edge: 200,
            connectivity: Connectivity::Full,
            drift: Drift {
                shared_rotation_deg: 2.0,
                shared_translation: 0.02,
                jitter_rotation_deg: 0.5,
                jitter_translation: 0.005,
            },
            init_point_noise: 0.02,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.num_views < 3 {
            return fail(&format!("num_views must be at least 3, got {}", self.num_views));
        }
        if self.num_gaussians == 0 {
            return fail("num_gaussians must be at least 1");
        }
        if self.width < 4 || self.height < 4 {
            return fail("images must be at least 4x4");
        }
        if !(self.camera_distance > 1.5) {
            return fail("camera_distance must exceed 1.5 so the scene is in front of every camera");
        }
        if self.correspondences_per_edge < MIN_EDGE_CORRESPONDENCES {
            return fail(&format!("correspondences_per_edge must be at least {MIN_EDGE_CORRESPONDENCES}"));
        }
        if let Connectivity::KNearest(0) = self.connectivity {
            return fail("k-nearest connectivity needs k >= 1");
        }
        let d = &self.drift;
        let mags = [
            d.shared_rotation_deg,
            d.shared_translation,
            d.jitter_rotation_deg,
            d.jitter_translation,
            self.init_point_noise,
        ];
        if mags.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return fail("drift magnitudes and noise must be finite and non-negative");
        }
        Ok(())
    }

    fn intrinsics(&self) -> Intrinsics {
        let focal = 1.2 * self.width as f64;
        Intrinsics::new(
            focal,
            focal,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            self.width,
            self.height,
        )
    }

    fn camera_at(&self, phase: f64) -> Pose {
        let theta = match self.trajectory {
            Trajectory::Ring => std::f64::consts::TAU * phase,
            Trajectory::Arc => (phase - 0.5) * 120f64.to_radians(),
        };
        let r = self.camera_distance;
        let eye = Vector3::new(r * theta.sin(), 0.3 * (3.0 * theta).sin(), -r * theta.cos());
        Pose::look_at(&eye, &Vector3::zeros(), &Vector3::new(0.0, -1.0, 0.0))
    }

    fn phases(&self, count: usize, offset: f64) -> Vec<f64> {
        let denom = match self.trajectory {
            Trajectory::Ring => count as f64,
            Trajectory::Arc => (count.max(2) - 1) as f64,
        };
        (0..count)
            .map(|i| match self.trajectory {
                Trajectory::Ring => (i as f64 + offset) / denom,
                Trajectory::Arc => ((i as f64 + offset) / denom).min(1.0),
            })
            .collect()
    }

    fn edge_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.num_views;
        let mut pairs = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                let keep = match self.connectivity {
                    Connectivity::Full => true,
                    Connectivity::KNearest(k) => b - a <= k,
                };
                if keep {
                    pairs.push((a, b));
                }
            }
        }
        pairs
    }
}

fn random_quaternion(rng: &mut impl Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-9 {
            return q.map(|v| v / n);
        }
    }
}

fn random_in_unit_ball(rng: &mut impl Rng) -> Vector3<f64> {
    let u = Uniform::new_inclusive(-1.0, 1.0).unwrap();
    loop {
        let p = Vector3::new(u.sample(rng), u.sample(rng), u.sample(rng));
        if p.norm_squared() <= 1.0 {
            return p;
        }
    }
}

/// Generates ground truth, renders it, builds matches and injects drift.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let scale = Uniform::new_inclusive(0.06f64, 0.12).unwrap();
    let opacity = Uniform::new_inclusive(0.6, 0.95).unwrap();
    let unit = Uniform::new_inclusive(0.0, 1.0).unwrap();
    let gaussians: Vec<Gaussian> = (0..spec.num_gaussians)
        .map(|_| Gaussian {
            mean: random_in_unit_ball(&mut rng).into(),
            log_scale: std::array::from_fn(|_| scale.sample(&mut rng).ln()),
            rotation_q: random_quaternion(&mut rng),
            opacity_logit: logit(opacity.sample(&mut rng)),
            color: std::array::from_fn(|_| unit.sample(&mut rng)),
        })
        .collect();
    let cloud = GaussianCloud::new(gaussians);

    let k = spec.intrinsics();
    let gt_poses: Vec<Pose> = spec.phases(spec.num_views, 0.0).into_iter().map(|p| spec.camera_at(p)).collect();
    let gt_images: Vec<ImageBuffer> = gt_poses.iter().map(|p| render(&cloud, p, &k).image).collect();

    // Exact projections of means visible in both views of an edge.
    let projections: Vec<Vec<Option<Vector2<f64>>>> = gt_poses
        .iter()
        .map(|pose| {
            cloud
                .gaussians
                .iter()
                .map(|g| {
                    let pc = pose.transform_point(&g.mean());
                    if pc.z <= NEAR_PLANE {
                        return None;
                    }
                    k.project(&pc).filter(|px| k.contains(px))
                })
                .collect()
        })
        .collect();
    let confidence = Uniform::new_inclusive(0.5, 1.0).unwrap();
    let mut edges = Vec::new();
    for (a, b) in spec.edge_pairs() {
        let both: Vec<usize> = (0..cloud.len())
            .filter(|&g| projections[a][g].is_some() && projections[b][g].is_some())
            .collect();
        if both.len() < MIN_EDGE_CORRESPONDENCES {
            continue;
        }
        let chosen: Vec<usize> = if both.len() > spec.correspondences_per_edge {
            let mut idx = index::sample(&mut rng, both.len(), spec.correspondences_per_edge).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| both[i]).collect()
        } else {
            both
        };
        edges.push(Edge {
            a,
            b,
            matches: CorrespondenceSet {
                points_a: chosen.iter().map(|&g| projections[a][g].unwrap()).collect(),
                points_b: chosen.iter().map(|&g| projections[b][g].unwrap()).collect(),
                confidence: chosen.iter().map(|_| confidence.sample(&mut rng)).collect(),
            },
        });
    }

    let init_points = cloud
        .gaussians
        .iter()
        .map(|g| {
            let p = g.mean() + gaussian_vec(&mut rng, spec.init_point_noise);
            let c = g.color().map(|c| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (c + 0.05 * z).clamp(0.0, 1.0)
            });
            InitPoint {
                position: p.into(),
                color: c.into(),
            }
        })
        .collect();

    let test_views = spec
        .phases(spec.num_test_views, 0.5)
        .into_iter()
        .map(|p| {
            let pose = spec.camera_at(p);
            TestView {
                intrinsics: k,
                pose,
                image: render(&cloud, &pose, &k).image,
            }
        })
        .collect();

    let extent = scene_extent(&gt_poses);
    let drift = Drift {
        shared_translation: spec.drift.shared_translation * extent,
        jitter_translation: spec.drift.jitter_translation * extent,
        ..spec.drift
    };
    let drift_seed = rng.random();
    let initial_poses = perturb_poses(&gt_poses, &drift, drift_seed);

    let graph = SceneGraph {
        intrinsics: vec![k; spec.num_views],
        initial_poses,
        edges,
    };
    graph.validate()?;
    Ok(SyntheticScene {
        gt_gaussians: cloud,
        gt_poses,
        gt_images,
        graph,
        init_points,
        test_views,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{fundamental_matrix, symmetric_epipolar_distance};

    fn small_spec(views: usize) -> SyntheticSpec {
        SyntheticSpec {
            num_views: views,
            num_test_views: 1,
            num_gaussians: 10,
            width: 24,
            height: 24,
            ..SyntheticSpec::standard_benchmark(3)
        }
    }

    #[test]
    fn three_view_ring_is_epipolar_consistent() {
        let s = generate_synthetic(&small_spec(3)).unwrap();
        assert_eq!(s.graph.edges.len(), 3);
        for e in &s.graph.edges {
            let (ka, kb) = (&s.graph.intrinsics[e.a], &s.graph.intrinsics[e.b]);
            let f = fundamental_matrix(&s.gt_poses[e.a], &s.gt_poses[e.b], ka, kb).unwrap();
            for (x, xp) in e.matches.points_a.iter().zip(&e.matches.points_b) {
                assert!(symmetric_epipolar_distance(x, xp, &f).unwrap() < 1e-9);
            }
        }
    }

    #[test]
    fn full_connectivity_edge_count() {
        let spec = SyntheticSpec {
            num_gaussians: 40,
            ..small_spec(20)
        };
        assert_eq!(generate_synthetic(&spec).unwrap().graph.edges.len(), 190);
    }

    #[test]
    fn k_nearest_edge_count() {
        let spec = SyntheticSpec {
            connectivity: Connectivity::KNearest(2),
            num_gaussians: 40,
            ..small_spec(6)
        };
        // 5 pairs at distance 1, 4 at distance 2.
        assert_eq!(generate_synthetic(&spec).unwrap().graph.edges.len(), 9);
    }

    #[test]
    fn too_few_views_is_invalid() {
        assert!(matches!(generate_synthetic(&small_spec(2)), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn zero_drift_leaves_poses_unchanged() {
        let s = generate_synthetic(&small_spec(3)).unwrap();
        let out = perturb_poses(&s.gt_poses, &Drift::default(), 7);
        assert_eq!(out, s.gt_poses);
    }

    #[test]
    fn subsample_small_set_unchanged() {
        let set = CorrespondenceSet {
            points_a: vec![Vector2::new(1.0, 2.0); 50],
            points_b: vec![Vector2::new(3.0, 4.0); 50],
            confidence: vec![1.0; 50],
        };
        assert_eq!(subsample_correspondences(&set, 100, 0), set);
    }

    #[test]
    fn subsample_is_deterministic() {
        let set = CorrespondenceSet {
            points_a: (0..1000).map(|i| Vector2::new(i as f64, 0.0)).collect(),
            points_b: (0..1000).map(|i| Vector2::new(0.0, i as f64)).collect(),
            confidence: vec![1.0; 1000],
        };
        let a = subsample_correspondences(&set, 300, 11);
        let b = subsample_correspondences(&set, 300, 11);
        assert_eq!(a.len(), 300);
        assert_eq!(a, b);
    }

    fn three_view_file(edges: &str) -> String {
        let view = r#"{"intrinsics":{"fx":10,"fy":10,"cx":4,"cy":4,"width":8,"height":8},
            "rotation":[1,0,0,0,1,0,0,0,1],"translation":[0,0,0]}"#;
        format!(r#"{{"views":[{view},{view},{view}],"edges":[{edges}]}}"#)
    }

    fn edge_json(a: usize, b: usize, n_points: usize, n_conf: usize) -> String {
        let pts = vec!["[1.0,2.0]"; n_points].join(",");
        let conf = vec!["0.9"; n_conf].join(",");
        format!(r#"{{"a":{a},"b":{b},"points_a":[{pts}],"points_b":[{pts}],"confidence":[{conf}]}}"#)
    }

    fn load_str(text: &str) -> Result<SceneGraph> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.json");
        std::fs::write(&path, text).unwrap();
        load_scene(&path)
    }

    #[test]
    fn load_well_formed() {
        let edges = [edge_json(0, 1, 10, 10), edge_json(0, 2, 10, 10), edge_json(1, 2, 10, 10)].join(",");
        let g = load_str(&three_view_file(&edges)).unwrap();
        assert_eq!(g.num_views(), 3);
        assert_eq!(g.edges.len(), 3);
    }

    #[test]
    fn load_rejects_self_edge() {
        let err = load_str(&three_view_file(&edge_json(2, 2, 10, 10))).unwrap_err();
        assert!(matches!(err, Error::Validation { ref message, .. } if message.contains("self-edge")));
    }

    #[test]
    fn load_names_edge_on_length_mismatch() {
        let edges = [edge_json(0, 1, 10, 10), edge_json(1, 2, 10, 9)].join(",");
        match load_str(&three_view_file(&edges)).unwrap_err() {
            Error::Validation { location, message } => {
                assert!(location.contains("edges[1]"), "{location}");
                assert!(message.contains("length mismatch"));
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn load_rejects_duplicates_and_range() {
        let dup = [edge_json(0, 1, 10, 10), edge_json(0, 1, 10, 10)].join(",");
        assert!(load_str(&three_view_file(&dup)).is_err());
        assert!(load_str(&three_view_file(&edge_json(0, 3, 10, 10))).is_err());
    }

    #[test]
    fn malformed_json_is_parse_error() {
        assert!(matches!(load_str("{not json"), Err(Error::Parse { .. })));
    }
}
