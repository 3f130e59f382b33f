//! Image quality metrics.

use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::losses::PerceptualExtractor;
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, a.shape(), b.shape()));
    }
    if a.is_empty() {
        return Err(Error::Empty(op));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for unit peak, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("psnr", a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * libm::log10(1.0 / mse)).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = libm::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filter over the valid region of one plane.
fn filter_valid(x: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = alloc::vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..SSIM_WINDOW).map(|k| win[k] * x[y * w + x0 + k]).sum();
        }
    }
    let mut out = alloc::vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..SSIM_WINDOW).map(|k| win[k] * rows[(y0 + k) * ow + x0]).sum();
        }
    }
    out
}

/// Mean structural similarity over the valid window positions, averaged
/// over channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (c, h, w) = a.chw();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Input(alloc::format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let mut total = 0.0;
    for ch in 0..c {
        let x = a.channel(ch);
        let y = b.channel(ch);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(x, h, w, &win);
        let my = filter_valid(y, h, w, &win);
        let sxx = filter_valid(&xx, h, w, &win);
        let syy = filter_valid(&yy, h, w, &win);
        let sxy = filter_valid(&xy, h, w, &win);
        let n = mx.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + C1) * (2.0 * cov + C2)) / ((ux * ux + uy * uy + C1) * (vx + vy + C2));
        }
        total += acc / n as f64;
    }
    Ok(total / c as f64)
}

/// `Σ_v mean((φ_v(a) − φ_v(b))²)`: squared feature distance per level,
/// normalised by the level's element count.
pub fn perceptual_distance(a: &Tensor, b: &Tensor, extractor: &PerceptualExtractor) -> Result<f64> {
    same_shape("perceptual_distance", a, b)?;
    let fa = extractor.features_of(a);
    let fb = extractor.features_of(b);
    Ok(fa
        .iter()
        .zip(&fb)
        .map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64)
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn psnr_cases() {
        let a = Tensor::full(&[3, 8, 8], 0.4);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let b = Tensor::full(&[3, 8, 8], 0.5);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-6);
        let r = random(&[3, 8, 8], 1);
        assert_eq!(psnr(&a, &r).unwrap(), psnr(&r, &a).unwrap());
        assert!(psnr(&a, &Tensor::zeros(&[3, 8, 9])).is_err());
    }

    #[test]
    fn ssim_cases() {
        let a = random(&[3, 16, 16], 2);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let c = Tensor::full(&[1, 12, 12], 0.2);
        let d = Tensor::full(&[1, 12, 12], 0.7);
        assert!(ssim(&c, &d).unwrap() < 1.0);
        assert!(ssim(&Tensor::zeros(&[3, 8, 8]), &Tensor::zeros(&[3, 8, 8])).is_err());
    }

    #[test]
    fn ssim_decreases_with_noise() {
        let a = random(&[3, 16, 16], 3);
        let noise = random(&[3, 16, 16], 4).map(|v| v - 0.5);
        let s: Vec<f64> = [0.01, 0.05, 0.1]
            .iter()
            .map(|&e| ssim(&a, &a.zip_map(&noise, |x, n| x + e * n)).unwrap())
            .collect();
        assert!(s[0] > s[1] && s[1] > s[2], "{s:?}");
    }

    #[test]
    fn perceptual_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ex = PerceptualExtractor::toy(&mut rng);
        let a = random(&[3, 16, 16], 6);
        let b = random(&[3, 16, 16], 7);
        assert_eq!(perceptual_distance(&a, &a, &ex).unwrap(), 0.0);
        assert!(perceptual_distance(&a, &b, &ex).unwrap() > 0.0);
        let lin = PerceptualExtractor::identity();
        let delta = random(&[3, 16, 16], 8).map(|v| 0.1 * (v - 0.5));
        let a1 = a.zip_map(&delta, |x, d| x + d);
        let a2 = a.zip_map(&delta, |x, d| x + 2.0 * d);
        assert!(perceptual_distance(&a, &a2, &lin).unwrap() >= perceptual_distance(&a, &a1, &lin).unwrap());
    }
}
