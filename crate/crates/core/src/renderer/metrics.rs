//! Photometric losses and image-quality metrics.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5) applied as a zero-padded
//! "same" convolution, per channel, averaged over every pixel and channel.

use crate::error::Result;

use super::ImageBuffer;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 1D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable zero-padded blur. The operator is self-adjoint because the
/// kernel is symmetric.
fn blur(plane: &[f64], width: usize, height: usize, kernel: &[f64]) -> Vec<f64> {
    let half = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let xx = x as isize + k as isize - half;
                if xx >= 0 && (xx as usize) < width {
                    acc += w * row[xx as usize];
                }
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let yy = y as isize + k as isize - half;
                if yy >= 0 && (yy as usize) < height {
                    acc += w * tmp[yy as usize * width + x];
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

struct ChannelSsim {
    mean: f64,
    /// Gradient of the summed SSIM map w.r.t. the first image's plane.
    grad: Option<Vec<f64>>,
}

fn channel_ssim(x: &[f64], y: &[f64], width: usize, height: usize, want_grad: bool) -> ChannelSsim {
    let kernel = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_x = blur(x, width, height, &kernel);
    let mu_y = blur(y, width, height, &kernel);
    let e_xx = blur(&sq(x, x), width, height, &kernel);
    let e_yy = blur(&sq(y, y), width, height, &kernel);
    let e_xy = blur(&sq(x, y), width, height, &kernel);

    let n = x.len();
    let mut sum = 0.0;
    let (mut d_mu, mut d_exx, mut d_exy) = if want_grad {
        (vec![0.0; n], vec![0.0; n], vec![0.0; n])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let sxx = e_xx[i] - mx * mx;
        let syy = e_yy[i] - my * my;
        let sxy = e_xy[i] - mx * my;
        let a1 = 2.0 * mx * my + SSIM_C1;
        let a2 = 2.0 * sxy + SSIM_C2;
        let b1 = mx * mx + my * my + SSIM_C1;
        let b2 = sxx + syy + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        sum += s;
        if want_grad {
            let ds_dmx = 2.0 * my * a2 / (b1 * b2) - s * 2.0 * mx / b1;
            let ds_dsxx = -s / b2;
            let ds_dsxy = 2.0 * a1 / (b1 * b2);
            d_mu[i] = ds_dmx - 2.0 * mx * ds_dsxx - my * ds_dsxy;
            d_exx[i] = ds_dsxx;
            d_exy[i] = ds_dsxy;
        }
    }
    let grad = want_grad.then(|| {
        let g_mu = blur(&d_mu, width, height, &kernel);
        let g_xx = blur(&d_exx, width, height, &kernel);
        let g_xy = blur(&d_exy, width, height, &kernel);
        (0..n).map(|i| g_mu[i] + 2.0 * x[i] * g_xx[i] + y[i] * g_xy[i]).collect()
    });
    ChannelSsim {
        mean: sum / n as f64,
        grad,
    }
}

/// Mean SSIM over all pixels and channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.same_shape(b)?;
    let total: f64 = (0..3)
        .map(|c| channel_ssim(&a.channel(c), &b.channel(c), a.width, a.height, false).mean)
        .sum();
    Ok(total / 3.0)
}

/// SSIM and its gradient w.r.t. every value of `a` (interleaved RGB layout).
pub fn ssim_with_grad(a: &ImageBuffer, b: &ImageBuffer) -> Result<(f64, Vec<f64>)> {
    a.same_shape(b)?;
    let mut grad = vec![0.0; a.rgb.len()];
    let mut total = 0.0;
    let n = (a.width * a.height) as f64;
    for c in 0..3 {
        let ch = channel_ssim(&a.channel(c), &b.channel(c), a.width, a.height, true);
        total += ch.mean;
        for (i, g) in ch.grad.unwrap().into_iter().enumerate() {
            grad[3 * i + c] = g / (3.0 * n);
        }
    }
    Ok((total / 3.0, grad))
}

/// Peak signal-to-noise ratio for unit peak; `+∞` for identical images.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.same_shape(b)?;
    let mse = a.rgb.iter().zip(&b.rgb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.rgb.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Mean absolute error and its (sub)gradient w.r.t. `a`.
pub fn l1_with_grad(a: &ImageBuffer, b: &ImageBuffer) -> Result<(f64, Vec<f64>)> {
    a.same_shape(b)?;
    let n = a.rgb.len() as f64;
    let mut loss = 0.0;
    let grad = a
        .rgb
        .iter()
        .zip(&b.rgb)
        .map(|(x, y)| {
            let d = x - y;
            loss += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> ImageBuffer {
        ImageBuffer::from_rgb(w, h, (0..w * h * 3).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn identical_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random_image(&mut rng, 8, 8);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn black_vs_white() {
        let black = ImageBuffer::filled(4, 4, 0.0);
        let white = ImageBuffer::filled(4, 4, 1.0);
        assert_eq!(psnr(&black, &white).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_dimensions() {
        let a = ImageBuffer::new(4, 4);
        let b = ImageBuffer::new(4, 5);
        assert!(ssim(&a, &b).is_err());
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn ssim_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_image(&mut rng, 9, 7);
        let b = random_image(&mut rng, 9, 7);
        let (_, grad) = ssim_with_grad(&a, &b).unwrap();
        for i in (0..a.rgb.len()).step_by(5) {
            let (mut p, mut m) = (a.clone(), a.clone());
            p.rgb[i] += 1e-6;
            m.rgb[i] -= 1e-6;
            let fd = (ssim(&p, &b).unwrap() - ssim(&m, &b).unwrap()) / 2e-6;
            assert!((fd - grad[i]).abs() < 1e-8 * (1.0 + fd.abs()), "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn ssim_gradient_vanishes_at_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 12, 12);
        let (_, g) = ssim_with_grad(&a, &a).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }
}
