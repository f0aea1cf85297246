use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::{quantize, ImagePlane};
use crate::error::{contract, Result};
use crate::resample::{rescale_dims, Resize2d};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Degradation {
    /// Bicubic shrink by an integer factor.
    BicubicDown(usize),
    /// Additive white Gaussian noise, σ in 8-bit units.
    GaussianNoise(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: Degradation,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn noise(sigma: f64, seed: u64) -> Self {
        Self {
            kind: Degradation::GaussianNoise(sigma),
            seed,
        }
    }

    pub fn bicubic(scale: usize, seed: u64) -> Self {
        Self {
            kind: Degradation::BicubicDown(scale),
            seed,
        }
    }
}

/// Bicubic resize of an 8-bit image, quantized back to 8 bits.
pub fn resize_image(img: &ImagePlane, width: usize, height: usize) -> ImagePlane {
    let op = Resize2d::bicubic(img.height, img.width, height, width);
    let c = img.channels;
    let mut planar = vec![0.0; c * img.height * img.width];
    for (p, px) in img.pixels.chunks_exact(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            planar[ch * img.height * img.width + p] = v as f64;
        }
    }
    let out = op.apply(&planar, c);
    ImagePlane::from_fn(width, height, c, |x, y, ch| quantize(out[(ch * height + y) * width + x]))
}

/// Bicubic upsampling by `scale`, the usual SR baseline.
pub fn upscale_bicubic(img: &ImagePlane, scale: usize) -> ImagePlane {
    resize_image(img, img.width * scale, img.height * scale)
}

pub fn degrade(img: &ImagePlane, spec: &DegradationSpec) -> Result<ImagePlane> {
    match spec.kind {
        Degradation::BicubicDown(s) => {
            if s < 1 {
                return Err(contract("downscale factor must be at least 1"));
            }
            let (h, w) = rescale_dims(img.height, img.width, s, false)?;
            Ok(resize_image(img, w, h))
        }
        Degradation::GaussianNoise(sigma) => {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(contract(format!("noise level must be finite and non-negative, got {sigma}")));
            }
            if sigma == 0.0 {
                return Ok(img.clone());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let normal = Normal::new(0.0, sigma).expect("valid sigma");
            let pixels = img
                .pixels
                .iter()
                .map(|&v| quantize(v as f64 + normal.sample(&mut rng)))
                .collect();
            ImagePlane::new(img.width, img.height, img.channels, pixels)
        }
    }
}
