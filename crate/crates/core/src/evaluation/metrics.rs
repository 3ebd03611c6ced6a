//! Full-reference image quality metrics with dynamic range `L = 1`.

use crate::error::{input_err, Result};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(input_err!("image shapes differ: {:?} vs {:?}", a.shape(), b.shape()));
    }
    if a.data().is_empty() {
        return Err(input_err!("empty image"));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data().len() as f64)
}

pub fn rmse(a: &Image, b: &Image) -> Result<f64> {
    mse(a, b).map(f64::sqrt)
}

/// Peak signal-to-noise ratio in dB; identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / m).log10()
    })
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filtering of a row-major `w × h` plane.
fn filter_valid(src: &[f64], w: usize, h: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (wo, ho) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; wo * h];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; wo * ho];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * wo + x]).sum();
        }
    }
    (out, wo, ho)
}

/// Per-window SSIM map (valid windows only, no padding).
pub fn ssim_map(a: &Image, b: &Image) -> Result<(Vec<f64>, usize, usize)> {
    same_shape(a, b)?;
    let (h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(input_err!(
            "SSIM needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {w}×{h}"
        ));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let x: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let (mx, wo, ho) = filter_valid(&x, w, h, &taps);
    let (my, ..) = filter_valid(&y, w, h, &taps);
    let (sxx, ..) = filter_valid(&xx, w, h, &taps);
    let (syy, ..) = filter_valid(&yy, w, h, &taps);
    let (sxy, ..) = filter_valid(&xy, w, h, &taps);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let map = (0..wo * ho)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .collect();
    Ok((map, wo, ho))
}

/// Mean structural similarity, Gaussian 11×11 window with σ = 1.5.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    let (map, ..) = ssim_map(a, b)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}
