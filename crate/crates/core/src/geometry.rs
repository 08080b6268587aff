//! SE(3) algebra, the continuous 6D rotation map, pinhole cameras, epipolar
//! geometry and similarity alignment of trajectories.
//!
//! Poses are world-to-camera: `x_cam = R * x_world + t`. Tangent vectors are
//! ordered `[ω, v]` (rotation first) and act on the left:
//! `R' = Exp(ω) R`, `t' = Exp(ω) t + v`.

use nalgebra::{Matrix3, SymmetricEigen, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum norm for either block of a 6D rotation vector.
pub const ROTATION_6D_EPS: f64 = 1e-8;
/// Relative translations shorter than this have no fundamental matrix.
pub const BASELINE_EPS: f64 = 1e-10;
/// Squared epipolar-line normal below which a line is treated as vanished.
pub const EPIPOLAR_LINE_EPS: f64 = 1e-12;

/// The identity element of the 6D rotation representation.
pub const IDENTITY_R6: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

pub type Tangent6 = [f64; 6];

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Generator of rotations about the k-th coordinate axis.
pub(crate) fn generator(k: usize) -> Matrix3<f64> {
    let mut e = Vector3::zeros();
    e[k] = 1.0;
    skew(&e)
}

/// Rodrigues' formula.
pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let k = skew(omega);
    let (a, b) = if theta2 < 1e-16 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Rotation vector of `r`; inverse of [`so3_exp`] for angles below π.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let w = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let s = 0.5 * w.norm();
    let c = 0.5 * (r.trace() - 1.0);
    let theta = s.atan2(c);
    if s < 1e-12 {
        if c > 0.0 {
            return 0.5 * w;
        }
        // Near π: recover the axis from the symmetric part.
        let b = (r + Matrix3::identity()) * 0.5;
        let col = (0..3)
            .max_by(|&i, &j| b[(i, i)].total_cmp(&b[(j, j)]))
            .unwrap_or(0);
        let axis = b.column(col).into_owned().normalize();
        return axis * theta;
    }
    w * (theta / (2.0 * s))
}

/// Geodesic angle of a rotation matrix, in radians.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let w = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let s = 0.5 * w.norm();
    let c = 0.5 * (r.trace() - 1.0);
    s.atan2(c)
}

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    /// Camera that sits at `eye` and looks at `target`, with image `y` pointing
    /// roughly along `-up`.
    pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let mut x = z.cross(up);
        if x.norm() < 1e-9 {
            x = z.cross(&Vector3::x());
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        Self::new(rotation, translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt * self.translation))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Applies a left tangent step `[ω, v]`.
    pub fn left_perturb(&self, xi: &Tangent6) -> Self {
        let omega = Vector3::new(xi[0], xi[1], xi[2]);
        let v = Vector3::new(xi[3], xi[4], xi[5]);
        let dr = so3_exp(&omega);
        Self::new(dr * self.rotation, dr * self.translation + v)
    }

    /// Largest element-wise deviation from orthonormality, and the determinant.
    pub fn orthonormality_error(&self) -> (f64, f64) {
        let d = self.rotation.transpose() * self.rotation - Matrix3::identity();
        (d.amax(), self.rotation.determinant())
    }

    pub fn is_valid(&self) -> bool {
        let (err, det) = self.orthonormality_error();
        err <= 1e-9 && (det - 1.0).abs() <= 1e-9 && self.translation.iter().all(|v| v.is_finite())
    }

    /// Projects the rotation back onto SO(3) (polar decomposition).
    pub fn reorthonormalized(&self) -> Self {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * vt;
        }
        Self::new(r, self.translation)
    }

    /// Geodesic angle between the two rotations, radians.
    pub fn rotation_distance(&self, other: &Pose) -> f64 {
        rotation_angle(&(self.rotation * other.rotation.transpose()))
    }
}

/// Translation plus a continuous 6D rotation, the refiner's output space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseCorrection {
    pub delta_t: Vector3<f64>,
    pub delta_r6: [f64; 6],
}

impl Default for PoseCorrection {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseCorrection {
    pub fn identity() -> Self {
        Self {
            delta_t: Vector3::zeros(),
            delta_r6: IDENTITY_R6,
        }
    }

    /// Correction whose rotation is exactly `rotation`: the 6D code is its
    /// first two columns.
    pub fn from_pose(pose: &Pose) -> Self {
        let r = &pose.rotation;
        Self {
            delta_t: pose.translation,
            delta_r6: [r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]],
        }
    }

    pub fn to_pose(&self) -> Result<Pose> {
        Ok(Pose::new(rotation_from_6d(&self.delta_r6)?, self.delta_t))
    }
}

/// Gram–Schmidt on the two 3-blocks, third column by cross product.
pub fn rotation_from_6d(r6: &[f64; 6]) -> Result<Matrix3<f64>> {
    let frame = Frame6::new(r6)?;
    Ok(Matrix3::from_columns(&[frame.b1, frame.b2, frame.b1.cross(&frame.b2)]))
}

/// Pulls a gradient w.r.t. the rotation matrix back onto the 6D input.
pub fn rotation_from_6d_backward(r6: &[f64; 6], grad_r: &Matrix3<f64>) -> Result<[f64; 6]> {
    let f = Frame6::new(r6)?;
    let g1 = grad_r.column(0).into_owned();
    let g2 = grad_r.column(1).into_owned();
    let g3 = grad_r.column(2).into_owned();

    // b3 = b1 × b2
    let gb1 = g1 + f.b2.cross(&g3);
    let gb2 = g2 + g3.cross(&f.b1);

    // b2 = u2 / |u2|
    let gu2 = (gb2 - f.b2 * f.b2.dot(&gb2)) / f.u2_norm;
    // u2 = a2 - (b1·a2) b1
    let dot = f.b1.dot(&f.a2);
    let ga2 = gu2 - f.b1 * f.b1.dot(&gu2);
    let gb1 = gb1 - gu2 * dot - f.a2 * f.b1.dot(&gu2);
    // b1 = a1 / |a1|
    let ga1 = (gb1 - f.b1 * f.b1.dot(&gb1)) / f.a1_norm;

    Ok([ga1.x, ga1.y, ga1.z, ga2.x, ga2.y, ga2.z])
}

struct Frame6 {
    a2: Vector3<f64>,
    a1_norm: f64,
    u2_norm: f64,
    b1: Vector3<f64>,
    b2: Vector3<f64>,
}

impl Frame6 {
    fn new(r6: &[f64; 6]) -> Result<Self> {
        if r6.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateRotation6D(format!("non-finite input {r6:?}")));
        }
        let a1 = Vector3::new(r6[0], r6[1], r6[2]);
        let a2 = Vector3::new(r6[3], r6[4], r6[5]);
        let a1_norm = a1.norm();
        if a1_norm <= ROTATION_6D_EPS {
            return Err(Error::DegenerateRotation6D(format!(
                "first block norm {a1_norm:e} in {r6:?}"
            )));
        }
        let b1 = a1 / a1_norm;
        let u2 = a2 - b1 * b1.dot(&a2);
        let u2_norm = u2.norm();
        if u2_norm <= ROTATION_6D_EPS {
            return Err(Error::DegenerateRotation6D(format!(
                "blocks are parallel (residual norm {u2_norm:e}) in {r6:?}"
            )));
        }
        Ok(Self {
            a2,
            a1_norm,
            u2_norm,
            b1,
            b2: u2 / u2_norm,
        })
    }
}

/// `ΔT · T_base`: the correction is left-multiplied onto the world-to-camera
/// transform.
pub fn compose(correction: &PoseCorrection, base: &Pose) -> Result<Pose> {
    let delta = correction.to_pose()?;
    Ok(delta.compose(base))
}

/// Pinhole intrinsics in pixels. Pixel `(u, v)` has its center at `(u, v)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    /// Square-pixel camera with the principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        Self::new(focal, focal, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::validation("intrinsics", format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Projects a camera-frame point; `None` behind the camera.
    pub fn project(&self, p_cam: &Vector3<f64>) -> Option<Vector2<f64>> {
        if p_cam.z <= 0.0 {
            return None;
        }
        Some(Vector2::new(
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ))
    }

    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x <= (self.width - 1) as f64 && px.y <= (self.height - 1) as f64
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(
            self.fx * factor,
            self.fy * factor,
            self.cx * factor,
            self.cy * factor,
            ((self.width as f64) * factor).round() as usize,
            ((self.height as f64) * factor).round() as usize,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalMatrix {
    pub m: Matrix3<f64>,
}

impl FundamentalMatrix {
    pub fn transpose(&self) -> Self {
        Self { m: self.m.transpose() }
    }

    /// Ratio of smallest to largest singular value.
    pub fn rank_deficiency(&self) -> f64 {
        let s = self.m.singular_values();
        s.min() / s.max()
    }
}

/// Transform taking camera-a coordinates to camera-b coordinates.
pub fn relative_pose(pose_a: &Pose, pose_b: &Pose) -> Pose {
    pose_b.compose(&pose_a.inverse())
}

pub fn fundamental_matrix(
    pose_a: &Pose,
    pose_b: &Pose,
    k_a: &Intrinsics,
    k_b: &Intrinsics,
) -> Result<FundamentalMatrix> {
    let rel = relative_pose(pose_a, pose_b);
    let norm = rel.translation.norm();
    if norm <= BASELINE_EPS {
        return Err(Error::DegenerateBaseline(norm));
    }
    let essential = skew(&rel.translation) * rel.rotation;
    Ok(FundamentalMatrix {
        m: k_b.inverse_matrix().transpose() * essential * k_a.inverse_matrix(),
    })
}

/// Back-propagates `∂L/∂F` onto left tangents of both poses.
pub fn fundamental_matrix_backward(
    pose_a: &Pose,
    pose_b: &Pose,
    k_a: &Intrinsics,
    k_b: &Intrinsics,
    grad_f: &Matrix3<f64>,
) -> (Tangent6, Tangent6) {
    let rel = relative_pose(pose_a, pose_b);
    let (r, t) = (rel.rotation, rel.translation);
    let grad_e = k_b.inverse_matrix() * grad_f * k_a.inverse_matrix().transpose();
    let grad_r = skew(&t).transpose() * grad_e;
    let grad_tx = grad_e * r.transpose();
    let grad_t = Vector3::from_fn(|k, _| grad_tx.dot(&generator(k)));

    let mut xi_a = [0.0; 6];
    let mut xi_b = [0.0; 6];
    for k in 0..3 {
        let g = generator(k);
        xi_b[k] = grad_r.dot(&(g * r)) + grad_t.dot(&(g * t));
        xi_a[k] = -grad_r.dot(&(r * g));
    }
    let va = -(r.transpose() * grad_t);
    for k in 0..3 {
        xi_b[3 + k] = grad_t[k];
        xi_a[3 + k] = va[k];
    }
    (xi_a, xi_b)
}

/// Squared point-to-epipolar-line distance, summed over both images.
pub fn symmetric_epipolar_distance(
    x: &Vector2<f64>,
    x_prime: &Vector2<f64>,
    f: &FundamentalMatrix,
) -> Result<f64> {
    Ok(epipolar_terms(x, x_prime, f)?.distance())
}

/// Distance together with its gradient w.r.t. the entries of `F`.
pub fn symmetric_epipolar_distance_grad(
    x: &Vector2<f64>,
    x_prime: &Vector2<f64>,
    f: &FundamentalMatrix,
) -> Result<(f64, Matrix3<f64>)> {
    let e = epipolar_terms(x, x_prime, f)?;
    let (inv1, inv2) = (e.inv(e.n1), e.inv(e.n2));
    let d = e.distance();
    let s = e.residual;

    // ∂d/∂s · ∂s/∂F
    let mut grad = e.xp * e.x.transpose() * (2.0 * s * (inv1 + inv2));
    // n1 = Σ_{r<2} (F x)_r²
    let c1 = -s * s * inv1 * inv1;
    for r in 0..2 {
        for c in 0..3 {
            grad[(r, c)] += c1 * 2.0 * e.line_a[r] * e.x[c];
        }
    }
    // n2 = Σ_{c<2} (Fᵀ x')_c²
    let c2 = -s * s * inv2 * inv2;
    for r in 0..3 {
        for c in 0..2 {
            grad[(r, c)] += c2 * 2.0 * e.line_b[c] * e.xp[r];
        }
    }
    Ok((d, grad))
}

struct EpipolarTerms {
    x: Vector3<f64>,
    xp: Vector3<f64>,
    line_a: Vector3<f64>,
    line_b: Vector3<f64>,
    residual: f64,
    n1: f64,
    n2: f64,
}

impl EpipolarTerms {
    /// A vanished line contributes nothing; its residual is zero there.
    fn inv(&self, n: f64) -> f64 {
        if n < EPIPOLAR_LINE_EPS {
            0.0
        } else {
            1.0 / n
        }
    }

    fn distance(&self) -> f64 {
        self.residual * self.residual * (self.inv(self.n1) + self.inv(self.n2))
    }
}

fn epipolar_terms(x: &Vector2<f64>, x_prime: &Vector2<f64>, f: &FundamentalMatrix) -> Result<EpipolarTerms> {
    let xh = Vector3::new(x.x, x.y, 1.0);
    let xph = Vector3::new(x_prime.x, x_prime.y, 1.0);
    let line_a = f.m * xh;
    let line_b = f.m.transpose() * xph;
    let n1 = line_a.x * line_a.x + line_a.y * line_a.y;
    let n2 = line_b.x * line_b.x + line_b.y * line_b.y;
    if n1 < EPIPOLAR_LINE_EPS && n2 < EPIPOLAR_LINE_EPS {
        return Err(Error::DegenerateEpipolarLine);
    }
    Ok(EpipolarTerms {
        x: xh,
        xp: xph,
        residual: xph.dot(&line_a),
        line_a,
        line_b,
        n1,
        n2,
    })
}

/// `x ↦ s·R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }

    /// Re-expresses a world-to-camera pose in the transformed world frame.
    pub fn apply_pose(&self, pose: &Pose) -> Pose {
        let rotation = pose.rotation * self.rotation.transpose();
        let center = self.apply(&pose.center());
        Pose::new(rotation, -(rotation * center))
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            scale: 1.0 / self.scale,
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
        }
    }
}

/// Closed-form least-squares similarity taking `source` onto `target`.
pub fn umeyama(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<Similarity> {
    let n = source.len();
    if n != target.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{n} target points"),
            actual: target.len().to_string(),
        });
    }
    if n < 3 {
        return Err(Error::DegenerateConfiguration(format!("need at least 3 points, got {n}")));
    }
    let inv_n = 1.0 / n as f64;
    let mu_s = source.iter().sum::<Vector3<f64>>() * inv_n;
    let mu_t = target.iter().sum::<Vector3<f64>>() * inv_n;

    let mut cov = Matrix3::zeros();
    let mut cov_t = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, t) in source.iter().zip(target) {
        let (ds, dt) = (s - mu_s, t - mu_t);
        cov += dt * ds.transpose();
        cov_t += dt * dt.transpose();
        var_s += ds.norm_squared();
    }
    cov *= inv_n;
    cov_t *= inv_n;
    var_s *= inv_n;

    let spread = SymmetricEigen::new(cov_t).eigenvalues;
    let mut sorted = [spread[0], spread[1], spread[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if sorted[0] <= 0.0 || sorted[1] <= 1e-12 * sorted[0] {
        return Err(Error::DegenerateConfiguration(
            "reference points are collinear or coincident".into(),
        ));
    }
    if var_s <= 1e-300 {
        return Err(Error::DegenerateConfiguration("source points coincide".into()));
    }

    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = svd.singular_values;
    let mut sign = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    // nalgebra does not sort singular values; put the flip on the smallest.
    if sign[(2, 2)] < 0.0 {
        let smallest = (0..3).min_by(|&i, &j| d[i].total_cmp(&d[j])).unwrap();
        sign = Matrix3::identity();
        sign[(smallest, smallest)] = -1.0;
    }
    let rotation = u * sign * vt;
    let scale = (0..3).map(|i| d[i] * sign[(i, i)]).sum::<f64>() / var_s;
    let translation = mu_t - rotation * mu_s * scale;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// Similarity aligning estimated camera centers onto reference centers.
pub fn procrustes_align(estimated: &[Pose], reference: &[Pose]) -> Result<Similarity> {
    let src: Vec<_> = estimated.iter().map(Pose::center).collect();
    let dst: Vec<_> = reference.iter().map(Pose::center).collect();
    umeyama(&src, &dst)
}
