//! PSNR and SSIM on `[0, 1]` images.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// BT.601 luma. Single-channel images pass through unchanged.
pub fn luminance(img: &Tensor) -> Result<Tensor> {
    let s = img.shape();
    match s.c {
        1 => Ok(img.clone()),
        3 => Ok(Tensor::from_fn(Shape::new(s.h, s.w, 1), |r, c, _| {
            let p = img.pixel(r, c);
            0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
        })),
        n => Err(Error::dim("luminance", format!("expected 1 or 3 channels, got {n}"))),
    }
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim("mse", format!("{} vs {}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::domain("mse", "empty image"));
    }
    let total: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(total / a.len() as f64)
}

/// `10 log10(1 / MSE)` with peak 1, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

/// Normalised 2-d Gaussian window, row-major.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / total).collect();
    let mut w = Vec::with_capacity(size * size);
    for a in &g {
        for b in &g {
            w.push(a * b);
        }
    }
    w
}

/// Mean SSIM over every valid window position of two single-channel images.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim("ssim", format!("{} vs {}", a.shape(), b.shape())));
    }
    let s = a.shape();
    if s.c != 1 {
        return Err(Error::dim("ssim", format!("expected one channel, got {}", s.c)));
    }
    let n = SSIM_WINDOW;
    if s.h < n || s.w < n {
        return Err(Error::domain("ssim", format!("image {s} smaller than the {n}x{n} window")));
    }
    let win = gaussian_window(n, SSIM_SIGMA);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let (ad, bd) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=s.h - n {
        for c in 0..=s.w - n {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                let row = (r + i) * s.w + c;
                for j in 0..n {
                    let w = win[i * n + j];
                    let (x, y) = (ad[row + j], bd[row + j]);
                    ma += w * x;
                    mb += w * y;
                    saa += w * x * x;
                    sbb += w * y * y;
                    sab += w * x * y;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// PSNR and SSIM of the luminance channels.
pub fn luma_metrics(output: &Tensor, target: &Tensor) -> Result<(f64, f64)> {
    let (a, b) = (luminance(output)?, luminance(target)?);
    Ok((psnr(&a, &b)?, ssim(&a, &b)?))
}
