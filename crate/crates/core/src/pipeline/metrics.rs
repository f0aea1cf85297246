//! PSNR and SSIM on 8-bit images.

use serde::Serialize;

use super::image::ImagePlane;
use crate::error::{contract, dim_err, Result};

/// Value returned for identical images.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
}

fn same_dims(a: &ImagePlane, b: &ImagePlane) -> Result<()> {
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels) {
        return Err(dim_err(format!(
            "images differ in size: {}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

/// Luma `0.299 R + 0.587 G + 0.114 B` (full range), or the single channel of
/// a grey image.
pub fn luma(img: &ImagePlane) -> Vec<f64> {
    if img.channels == 1 {
        return img.pixels.iter().map(|&v| v as f64).collect();
    }
    img.pixels
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

pub fn psnr(a: &ImagePlane, b: &ImagePlane, y_channel_only: bool) -> Result<f64> {
    same_dims(a, b)?;
    let (x, y): (Vec<f64>, Vec<f64>) = if y_channel_only {
        (luma(a), luma(b))
    } else {
        (
            a.pixels.iter().map(|&v| v as f64).collect(),
            b.pixels.iter().map(|&v| v as f64).collect(),
        )
    };
    let mse = x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Normalized 11×11 Gaussian window.
pub fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for gy in &g {
        for gx in &g {
            w.push(gy * gx / (s * s));
        }
    }
    w
}

/// Mean SSIM over all valid window positions, on luma for RGB inputs.
pub fn ssim(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    same_dims(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(contract(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width, a.height
        )));
    }
    Ok(ssim_plane(&luma(a), &luma(b), a.width, a.height))
}

/// SSIM of two single-channel planes; symmetric in its arguments bit for bit.
pub fn ssim_plane(x: &[f64], y: &[f64], width: usize, height: usize) -> f64 {
    let c1 = (0.01 * 255.0f64).powi(2);
    let c2 = (0.03 * 255.0f64).powi(2);
    let win = gaussian_window();
    let (ow, oh) = (width - SSIM_WINDOW + 1, height - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for wy in 0..SSIM_WINDOW {
                for wx in 0..SSIM_WINDOW {
                    let g = win[wy * SSIM_WINDOW + wx];
                    let i = (oy + wy) * width + ox + wx;
                    let (p, q) = (x[i], y[i]);
                    mx += g * p;
                    my += g * q;
                    sxx += g * (p * p);
                    syy += g * (q * q);
                    sxy += g * (p * q);
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            total += ((2.0 * (mx * my) + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    total / (ow * oh) as f64
}
