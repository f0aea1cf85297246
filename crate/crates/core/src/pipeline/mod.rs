//! Image I/O, synthetic degradation, metrics, training and evaluation.

mod degrade;
mod evaluate;
mod image;
mod metrics;
mod train;

use std::path::{Path, PathBuf};

pub use degrade::{degrade, resize_image, upscale_bicubic, Degradation, DegradationSpec};
pub use evaluate::{evaluate, evaluate_image, EvalReport, EvalRow};
pub use image::{read_pnm, ImagePlane};
pub use metrics::{gaussian_window, luma, psnr, ssim, ssim_plane, Metrics, PSNR_CAP};
pub use train::{mean_psnr, train, y_channel_for, Adam, Dataset, StepRecord, TrainReport, TrainSpec};

use crate::error::{contract, Result};
use crate::model::{MatIrConfig, MatIrModel};
use crate::tensor::Tensor;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// First report line: library version, config hash and seed.
pub fn report_header(kind: &str, config: &MatIrConfig, seed: u64) -> String {
    format!(
        "matir {VERSION} {kind} config_hash={} seed={seed} model_seed={}",
        config.hash(),
        config.seed
    )
}

/// Image files (`png`, `ppm`, `pgm`, `pnm`) in `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                    Some("png" | "ppm" | "pgm" | "pnm")
                )
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Mirror-pads a `[C × H × W]` tensor on the bottom and right.
pub fn pad_reflect(t: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let reflect = |i: usize, n: usize| {
        // Period 2n symmetric reflection (edge sample repeated).
        let m = i % (2 * n);
        if m < n {
            m
        } else {
            2 * n - 1 - m
        }
    };
    Tensor::from_fn(&[c, out_h, out_w], |i| {
        let (ch, y, x) = (i / (out_h * out_w), i / out_w % out_h, i % out_w);
        t.data()[(ch * h + reflect(y, h)) * w + reflect(x, w)]
    })
}

/// Restores an 8-bit image: pad to the window size, run the model, crop.
pub fn restore(model: &MatIrModel, input: &ImagePlane) -> Result<ImagePlane> {
    let x = input.to_rgb().to_tensor();
    let (h, w) = (input.height, input.width);
    let win = model.config.window;
    let (ph, pw) = (h.div_ceil(win) * win, w.div_ceil(win) * win);
    let padded = if (ph, pw) == (h, w) { x } else { pad_reflect(&x, ph, pw) };
    let y = model.forward(&padded)?;
    let s = model.scale();
    let (oh, ow) = (h * s, w * s);
    let full_w = pw * s;
    let cropped = Tensor::from_fn(&[3, oh, ow], |i| {
        let (ch, yy, xx) = (i / (oh * ow), i / ow % oh, i % ow);
        y.data()[(ch * ph * s + yy) * full_w + xx]
    });
    let out = ImagePlane::from_tensor(&cropped)?;
    if out.width != ow || out.height != oh {
        return Err(contract("restore produced an unexpected size"));
    }
    Ok(out)
}
