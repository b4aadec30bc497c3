//! PSNR and single-scale SSIM image quality metrics.

use crate::data::Image;
use crate::error::{FinoError, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    if a.pixels.shape() != b.pixels.shape() {
        return Err(FinoError::shape(
            "mse",
            format!("{:?} vs {:?}", a.pixels.shape(), b.pixels.shape()),
        ));
    }
    let n = a.pixels.len() as f64;
    Ok(a.pixels
        .data()
        .iter()
        .zip(b.pixels.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// 10·log10(peak²/MSE) in dB; +∞ when the images are identical.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for y in -half..=half {
        for x in -half..=half {
            w.push((-((x * x + y * y) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Standard single-scale SSIM: 11×11 Gaussian window σ=1.5,
/// C1=(0.01·L)², C2=(0.03·L)² with L=1, valid windows, channel-averaged.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.pixels.shape() != b.pixels.shape() {
        return Err(FinoError::shape(
            "ssim",
            format!("{:?} vs {:?}", a.pixels.shape(), b.pixels.shape()),
        ));
    }
    let (c, h, w) = a.pixels.dims3()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(FinoError::Invalid(format!(
            "ssim: image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let win = gaussian_window();
    let pa = a.pixels.data();
    let pb = b.pixels.data();
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..=(h - SSIM_WINDOW) {
            for ox in 0..=(w - SSIM_WINDOW) {
                let (mut mu_a, mut mu_b) = (0.0, 0.0);
                let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
                for wy in 0..SSIM_WINDOW {
                    for wx in 0..SSIM_WINDOW {
                        let g = win[wy * SSIM_WINDOW + wx];
                        let va = pa[base + (oy + wy) * w + ox + wx];
                        let vb = pb[base + (oy + wy) * w + ox + wx];
                        mu_a += g * va;
                        mu_b += g * vb;
                        aa += g * va * va;
                        bb += g * vb * vb;
                        ab += g * va * vb;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let s = ((2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2))
                    / ((mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_toy_dataset;
    use crate::tensor::Tensor;

    #[test]
    fn psnr_analytic_values() {
        let a = Image::new(Tensor::full(&[1, 4, 4], 0.5)).unwrap();
        let b = Image::new(Tensor::full(&[1, 4, 4], 0.6)).unwrap();
        // uniform error 0.1 -> MSE 0.01 -> 20 dB
        let p = psnr(&a, &b, 1.0).unwrap();
        assert!((p - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_mse_duality_against_direct_loop() {
        let a = make_toy_dataset(1, 16, 1).pop().unwrap();
        let b = make_toy_dataset(1, 16, 2).pop().unwrap();
        let mut direct = 0.0;
        for (x, y) in a.pixels.data().iter().zip(b.pixels.data()) {
            direct += (x - y) * (x - y);
        }
        direct /= a.pixels.len() as f64;
        let p = psnr(&a, &b, 1.0).unwrap();
        assert!((p - 10.0 * (1.0 / direct).log10()).abs() < 1e-12);
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let a = make_toy_dataset(1, 16, 3).pop().unwrap();
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        // constant vs same constant stabilized by C1/C2
        let c = Image::new(Tensor::full(&[1, 16, 16], 0.5)).unwrap();
        assert_eq!(ssim(&c, &c).unwrap(), 1.0);
    }

    #[test]
    fn ssim_inverted_image_below_one_and_symmetric() {
        let a = make_toy_dataset(1, 16, 4).pop().unwrap();
        let b = Image::new(a.pixels.map(|v| 1.0 - v)).unwrap();
        let s_ab = ssim(&a, &b).unwrap();
        assert!(s_ab < 1.0);
        assert!((s_ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_tiny_images() {
        let a = Image::new(Tensor::zeros(&[1, 8, 8])).unwrap();
        assert!(ssim(&a, &a).is_err());
    }
}
