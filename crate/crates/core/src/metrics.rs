//! Image quality metrics on unit-range images.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::Image;

/// Reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("image shapes differ: {0:?} vs {1:?}")]
    Shape((u32, u32, usize), (u32, u32, usize)),
    #[error("image {0}x{1} is smaller than the 11x11 SSIM window")]
    TooSmall(u32, u32),
}

fn check(a: &Image, b: &Image) -> Result<(), MetricError> {
    let sa = (a.width, a.height, a.channels);
    let sb = (b.width, b.height, b.channels);
    if sa != sb {
        return Err(MetricError::Shape(sa, sb));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64, MetricError> {
    check(a, b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// Peak signal-to-noise ratio with peak 1, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64, MetricError> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * m.log10()).min(PSNR_CAP))
}

const RADIUS: usize = 5;
const SIGMA: f64 = 1.5;

fn gaussian_kernel() -> [f64; 2 * RADIUS + 1] {
    let mut k = [0.0; 2 * RADIUS + 1];
    for (i, w) in k.iter_mut().enumerate() {
        let x = i as f64 - RADIUS as f64;
        *w = (-x * x / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= s);
    k
}

/// Separable Gaussian filter evaluated only where the window fits.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            horiz[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * horiz[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Structural similarity: 11×11 Gaussian window (σ = 1.5), K1 = 0.01,
/// K2 = 0.03, population covariances, mean over window positions that fit
/// inside the image, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, MetricError> {
    check(a, b)?;
    let (w, h) = (a.width as usize, a.height as usize);
    if w < 2 * RADIUS + 1 || h < 2 * RADIUS + 1 {
        return Err(MetricError::TooSmall(a.width, a.height));
    }
    let k = gaussian_kernel();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let ch = a.channels;
    let mut total = 0.0;
    for c in 0..ch {
        let pa: Vec<f64> = a.data.iter().skip(c).step_by(ch).copied().collect();
        let pb: Vec<f64> = b.data.iter().skip(c).step_by(ch).copied().collect();
        let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
        let (ma, ow, oh) = filter_valid(&pa, w, h, &k);
        let (mb, _, _) = filter_valid(&pb, w, h, &k);
        let (maa, _, _) = filter_valid(&prod(&pa, &pa), w, h, &k);
        let (mbb, _, _) = filter_valid(&prod(&pb, &pb), w, h, &k);
        let (mab, _, _) = filter_valid(&prod(&pa, &pb), w, h, &k);
        let mut acc = 0.0;
        for i in 0..ow * oh {
            let (ux, uy) = (ma[i], mb[i]);
            let vx = maa[i] - ux * ux;
            let vy = mbb[i] - uy * uy;
            let vxy = mab[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * vxy + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / (ow * oh) as f64;
    }
    Ok(total / ch as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub view: usize,
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub rows: Vec<ImageScore>,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl QualityReport {
    pub fn from_rows(rows: Vec<ImageScore>) -> Self {
        let (psnr_mean, psnr_std) = mean_std(&rows.iter().map(|r| r.psnr).collect::<Vec<_>>());
        let (ssim_mean, ssim_std) = mean_std(&rows.iter().map(|r| r.ssim).collect::<Vec<_>>());
        Self {
            rows,
            psnr_mean,
            psnr_std,
            ssim_mean,
            ssim_std,
        }
    }

    /// One line per image, then the summary.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            s += &format!(
                "view {:4} frame {:4}  psnr {:7.3}  ssim {:.4}\n",
                r.view, r.frame, r.psnr, r.ssim
            );
        }
        s += &format!(
            "mean psnr {:.3} ± {:.3}  ssim {:.4} ± {:.4}\n",
            self.psnr_mean, self.psnr_std, self.ssim_mean, self.ssim_std
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(w: u32, h: u32) -> Image {
        let mut img = Image::new(w, h, 3);
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f64, y as f64);
                let p = img.pixel_mut(x, y);
                p[0] = 0.5 + 0.4 * (0.3 * xf + 0.2 * yf).sin();
                p[1] = ((xf * 7.0 + yf * 13.0) % 17.0) / 16.0;
                p[2] = (xf + yf) / (w + h) as f64;
            }
        }
        img
    }

    #[test]
    fn psnr_examples() {
        let a = Image::filled(8, 8, &[0.5, 0.5, 0.5]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Image::filled(8, 8, &[0.51, 0.51, 0.51]);
        assert!((psnr(&a, &b).unwrap() - 40.0).abs() < 1e-9);
        let c = Image::filled(8, 8, &[0.5 + 1.0 / 255.0; 3]);
        assert!((psnr(&a, &c).unwrap() - 20.0 * 255f64.log10()).abs() < 1e-9);
        assert!(psnr(&a, &Image::new(8, 7, 3)).is_err());
    }

    #[test]
    fn ssim_identity_symmetry_and_size() {
        let a = pattern(24, 20);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let mut b = a.clone();
        b.data.iter_mut().enumerate().for_each(|(i, v)| *v = (*v + 0.05 * ((i % 7) as f64 - 3.0) / 3.0).clamp(0.0, 1.0));
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!(matches!(ssim(&Image::new(10, 30, 3), &Image::new(10, 30, 3)), Err(MetricError::TooSmall(..))));
    }

    // Oracle: skimage.metrics.structural_similarity(a, 1 - a, channel_axis=2,
    // gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
    // data_range=1.0) on the same 24×20 pattern.
    #[test]
    fn ssim_against_negative_matches_reference() {
        let a = pattern(24, 20);
        let mut neg = a.clone();
        neg.data.iter_mut().for_each(|v| *v = 1.0 - *v);
        let got = ssim(&a, &neg).unwrap();
        assert!((got - SKIMAGE_NEGATIVE).abs() < 1e-6, "{got}");
    }

    const SKIMAGE_NEGATIVE: f64 = -0.74097417735292;
}
