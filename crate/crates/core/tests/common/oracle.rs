//! Straight-from-definition reimplementations used as independent oracles.

use gaussba::geometry::{Pose, Similarity};
use gaussba::renderer::ImageBuffer;
use gaussba::scene::SceneGraph;
use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector3};
use rand::Rng;


/// Gram–Schmidt on the two 3-blocks, third column by cross product.
pub fn gram_schmidt(r6: &[f64; 6]) -> Matrix3<f64> {
    let a = Vector3::new(r6[0], r6[1], r6[2]);
    let b = Vector3::new(r6[3], r6[4], r6[5]);
    let c1 = a / a.norm();
    let b_perp = b - c1 * c1.dot(&b);
    let c2 = b_perp / b_perp.norm();
    let c3 = c1.cross(&c2);
    Matrix3::from_columns(&[c1, c2, c3])
}

/// Horn's closed form: the optimal rotation is the top eigenvector of a
/// 4×4 matrix built from cross-covariance sums; scale follows from it.
pub fn horn_similarity(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Similarity {
    let n = src.len() as f64;
    let ms = src.iter().sum::<Vector3<f64>>() / n;
    let md = dst.iter().sum::<Vector3<f64>>() / n;
    let mut s = Matrix3::zeros();
    for (a, b) in src.iter().zip(dst) {
        s += (a - ms) * (b - md).transpose();
    }
    let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
    let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
    let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    let nm = Matrix4::new(
        sxx + syy + szz,
        syz - szy,
        szx - sxz,
        sxy - syx,
        syz - szy,
        sxx - syy - szz,
        sxy + syx,
        szx + sxz,
        szx - sxz,
        sxy + syx,
        -sxx + syy - szz,
        syz + szy,
        sxy - syx,
        szx + sxz,
        syz + szy,
        -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(nm);
    let (imax, _) = eig.eigenvalues.argmax();
    let q = eig.eigenvectors.column(imax);
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let rotation = Matrix3::new(
        w * w + x * x - y * y - z * z,
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        w * w - x * x + y * y - z * z,
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        w * w - x * x - y * y + z * z,
    );
    let num: f64 = src.iter().zip(dst).map(|(a, b)| (b - md).dot(&(rotation * (a - ms)))).sum();
    let den: f64 = src.iter().map(|a| (a - ms).norm_squared()).sum();
    let scale = num / den;
    Similarity {
        scale,
        rotation,
        translation: md - rotation * ms * scale,
    }
}

pub fn angle_deg(r: &Matrix3<f64>) -> f64 {
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Rotation error, ATE and relative errors straight from their definitions,
/// with Horn alignment on centers.
pub fn oracle_metrics(est: &[Pose], gt: &[Pose]) -> [f64; 4] {
    let centers = |ps: &[Pose]| -> Vec<Vector3<f64>> { ps.iter().map(|p| -p.rotation.transpose() * p.translation).collect() };
    let (ce, cg) = (centers(est), centers(gt));
    let sim = horn_similarity(&ce, &cg);
    let n = est.len() as f64;
    // Aligned camera-to-world rotation is S·Rᵀ, so world-to-camera is R·Sᵀ.
    let aligned_r: Vec<Matrix3<f64>> = est.iter().map(|p| p.rotation * sim.rotation.transpose()).collect();
    let aligned_c: Vec<Vector3<f64>> = ce.iter().map(|c| sim.rotation * c * sim.scale + sim.translation).collect();
    let rot = aligned_r
        .iter()
        .zip(gt)
        .map(|(r, g)| angle_deg(&(g.rotation * r.transpose())))
        .sum::<f64>()
        / n;
    let ate = (aligned_c.iter().zip(&cg).map(|(a, b)| (a - b).norm_squared()).sum::<f64>() / n).sqrt();
    let mut rpe_t = 0.0;
    let mut rpe_r = 0.0;
    for i in 0..est.len() - 1 {
        let j = i + 1;
        // Relative motion j → i as a 4×4 product, for both trajectories.
        let to4 = |r: &Matrix3<f64>, c: &Vector3<f64>| {
            let mut m = Matrix4::identity();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
            m.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-r * c));
            m
        };
        let ei = to4(&aligned_r[i], &aligned_c[i]);
        let ej = to4(&aligned_r[j], &aligned_c[j]);
        let gi = to4(&gt[i].rotation, &cg[i]);
        let gj = to4(&gt[j].rotation, &cg[j]);
        let rel_e = ei * ej.try_inverse().unwrap();
        let rel_g = gi * gj.try_inverse().unwrap();
        let err = rel_g.try_inverse().unwrap() * rel_e;
        rpe_t += err.fixed_view::<3, 1>(0, 3).norm();
        rpe_r += angle_deg(&err.fixed_view::<3, 3>(0, 0).into_owned());
    }
    let m = (est.len() - 1) as f64;
    [rot, ate, rpe_t / m, rpe_r / m]
}

/// Per-channel SSIM by explicit window sums, zero padding outside.
pub fn ssim_direct(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let (w, h) = (a.width as isize, a.height as isize);
    let half = 5isize;
    let mut taps = [0.0; 11];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *t = (-d * d / (2.0 * 1.5 * 1.5)).exp();
    }
    let norm: f64 = taps.iter().sum();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -half..=half {
                    for dx in -half..=half {
                        let (px, py) = (x + dx, y + dy);
                        if px < 0 || py < 0 || px >= w || py >= h {
                            continue;
                        }
                        let wt = taps[(dx + half) as usize] * taps[(dy + half) as usize] / (norm * norm);
                        let va = a.get(px as usize, py as usize, c);
                        let vb = b.get(px as usize, py as usize, c);
                        mx += wt * va;
                        my += wt * vb;
                        xx += wt * va * va;
                        yy += wt * vb * vb;
                        xy += wt * va * vb;
                    }
                }
                let (sx, sy, sxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += (2.0 * mx * my + c1) * (2.0 * sxy + c2) / ((mx * mx + my * my + c1) * (sx + sy + c2));
            }
        }
    }
    total / (3 * w * h) as f64
}

/// Weighted mean distance per edge, averaged over edges, with F assembled
/// from scratch.
pub fn geo_loss_double_loop(graph: &SceneGraph, poses: &[Pose]) -> f64 {
    let mut total = 0.0;
    for edge in &graph.edges {
        let (pa, pb) = (&poses[edge.a], &poses[edge.b]);
        let r = pb.rotation * pa.rotation.transpose();
        let t = pb.translation - r * pa.translation;
        let tx = Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0);
        let ka = graph.intrinsics[edge.a].matrix().try_inverse().unwrap();
        let kb = graph.intrinsics[edge.b].matrix().try_inverse().unwrap();
        let f = kb.transpose() * tx * r * ka;
        let mut sum = 0.0;
        for i in 0..edge.matches.len() {
            let x = edge.matches.points_a[i].push(1.0);
            let xp = edge.matches.points_b[i].push(1.0);
            let l1 = f * x;
            let l2 = f.transpose() * xp;
            let s = xp.dot(&l1);
            let d = s * s / (l1.x * l1.x + l1.y * l1.y) + s * s / (l2.x * l2.x + l2.y * l2.y);
            sum += edge.matches.confidence[i] * d;
        }
        total += sum / edge.matches.len() as f64;
    }
    total / graph.edges.len() as f64
}

pub fn ring(n: usize, rng: &mut impl Rng) -> Vec<Pose> {
    (0..n)
        .map(|i| {
            let th = i as f64 * std::f64::consts::TAU / n as f64 + rng.random_range(-0.1..0.1);
            let eye = Vector3::new(3.0 * th.sin(), rng.random_range(-0.5..0.5), -3.0 * th.cos());
            Pose::look_at(&eye, &Vector3::zeros(), &Vector3::new(0.0, -1.0, 0.0))
        })
        .collect()
}
