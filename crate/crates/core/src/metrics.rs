//! PSNR and SSIM on images mapped from `[-1, 1]` to `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

/// Reported PSNR when the images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// PSNR in dB with peak 1, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    a.check_same_shape(b, "psnr")?;
    let (ua, ub) = (a.to_unit_range(), b.to_unit_range());
    let n = ua.values().len() as f64;
    let mse = ua.values().iter().zip(ub.values()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of a single plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..n).map(|i| k[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

fn grayscale(img: &ImageGrid) -> Vec<f64> {
    let u = img.to_unit_range();
    let (c, h, w) = u.dims();
    let plane = h * w;
    (0..plane).map(|p| (0..c).map(|ch| u.values()[ch * plane + p]).sum::<f64>() / c as f64).collect()
}

/// Mean SSIM of the channel-mean grayscale images, Gaussian 11x11 window
/// with sigma 1.5, dynamic range 1.
pub fn ssim(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    a.check_same_shape(b, "ssim")?;
    let (_, h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let (ga, gb) = (grayscale(a), grayscale(b));
    let k = gaussian_window();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(&ga, h, w, &k);
    let mu_b = filter_valid(&gb, h, w, &k);
    let e_aa = filter_valid(&prod(&ga, &ga), h, w, &k);
    let e_bb = filter_valid(&prod(&gb, &gb), h, w, &k);
    let e_ab = filter_valid(&prod(&ga, &gb), h, w, &k);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-image scores and their means.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
}

impl MetricReport {
    pub fn push(&mut self, name: impl Into<String>, sr: &ImageGrid, hr: &ImageGrid) -> Result<&ImageMetrics> {
        let m = ImageMetrics { name: name.into(), psnr_db: psnr(sr, hr)?, ssim: ssim(sr, hr)? };
        self.images.push(m);
        let n = self.images.len() as f64;
        self.mean_psnr_db = self.images.iter().map(|m| m.psnr_db).sum::<f64>() / n;
        self.mean_ssim = self.images.iter().map(|m| m.ssim).sum::<f64>() / n;
        Ok(self.images.last().expect("just pushed"))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_cap_and_constant_offset() {
        let a = ImageGrid::filled(3, 16, 16, 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        // 0.2 in [-1, 1] is 0.1 in [0, 1]
        let b = ImageGrid::filled(3, 16, 16, 0.2);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_symmetry_and_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = ImageGrid::randn(3, 24, 24, &mut rng).clamp(-1.0, 1.0);
        let b = ImageGrid::randn(3, 24, 24, &mut rng).clamp(-1.0, 1.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        let flat = ImageGrid::filled(3, 24, 24, 0.0);
        let noisy = ImageGrid::randn(3, 24, 24, &mut rng).scaled(3.0).clamp(-1.0, 1.0);
        assert!(ssim(&flat, &noisy).unwrap() < 0.1);
        assert!(ssim(&ImageGrid::zeros(3, 8, 8), &ImageGrid::zeros(3, 8, 8)).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = ImageGrid::randn(3, 16, 16, &mut rng).scaled(0.3);
        let n = ImageGrid::randn(3, 16, 16, &mut rng);
        let p: Vec<f64> = [0.01, 0.05, 0.1].iter().map(|&s| psnr(&a, &a.axpby(1.0, &n, s).unwrap()).unwrap()).collect();
        assert!(p[0] > p[1] && p[1] > p[2]);
    }
}
