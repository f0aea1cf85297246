use std::fmt::Write as _;
use std::path::Path;

use super::degrade::{degrade, upscale_bicubic, Degradation, DegradationSpec};
use super::image::ImagePlane;
use super::metrics::{psnr, ssim, Metrics};
use super::{list_images, report_header, restore};
use crate::error::{contract, Error, Result};
use crate::model::MatIrModel;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub image: String,
    pub metrics: Metrics,
    /// Bicubic upsampling of the same input (super-resolution only).
    pub baseline: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub header: String,
    pub rows: Vec<EvalRow>,
    pub skipped: Vec<(String, String)>,
}

fn mean(it: impl Iterator<Item = Metrics>) -> Option<Metrics> {
    let v: Vec<Metrics> = it.collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    Some(Metrics {
        psnr: v.iter().map(|m| m.psnr).sum::<f64>() / n,
        ssim: v.iter().map(|m| m.ssim).sum::<f64>() / n,
    })
}

impl EvalReport {
    pub fn mean(&self) -> Option<Metrics> {
        mean(self.rows.iter().map(|r| r.metrics))
    }

    pub fn baseline_mean(&self) -> Option<Metrics> {
        mean(self.rows.iter().filter_map(|r| r.baseline))
    }

    /// Machine-readable rows under the header `image,psnr_db,ssim`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,psnr_db,ssim\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.6},{:.6}", r.image, r.metrics.psnr, r.metrics.ssim);
        }
        out
    }

    /// Aligned text table with means; includes the bicubic column when present.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for line in self.header.lines() {
            let _ = writeln!(out, "# {line}");
        }
        let with_base = self.rows.iter().any(|r| r.baseline.is_some());
        let name_w = self.rows.iter().map(|r| r.image.len()).max().unwrap_or(5).max(5);
        let _ = write!(out, "{:<name_w$}  {:>9}  {:>7}", "image", "psnr_db", "ssim");
        if with_base {
            let _ = write!(out, "  {:>11}  {:>9}  {:>8}", "bicubic_db", "bicubic_ss", "delta_db");
        }
        out.push('\n');
        let mut line = |name: &str, m: Metrics, b: Option<Metrics>| {
            let _ = write!(out, "{name:<name_w$}  {:>9.4}  {:>7.4}", m.psnr, m.ssim);
            if let Some(b) = b {
                let _ = write!(out, "  {:>11.4}  {:>9.4}  {:>+8.4}", b.psnr, b.ssim, m.psnr - b.psnr);
            }
            out.push('\n');
        };
        for r in &self.rows {
            line(&r.image, r.metrics, r.baseline);
        }
        if let Some(m) = self.mean() {
            line("mean", m, self.baseline_mean());
        }
        let _ = writeln!(out, "# images={} skipped={}", self.rows.len(), self.skipped.len());
        for (name, why) in &self.skipped {
            let _ = writeln!(out, "# skipped {name}: {why}");
        }
        out
    }
}

/// Degrade → restore → score one clean image.
pub fn evaluate_image(
    model: &MatIrModel,
    clean: &ImagePlane,
    spec: &DegradationSpec,
    y_channel: bool,
) -> Result<EvalRow> {
    let clean = clean.to_rgb();
    let (hq, baseline) = match spec.kind {
        Degradation::BicubicDown(s) => {
            if s != model.scale() {
                return Err(contract(format!("model scale {} cannot restore x{s} inputs", model.scale())));
            }
            // Crop to a multiple of the scale so the degradation is defined.
            let hq = clean.crop(0, 0, clean.width / s * s, clean.height / s * s)?;
            (hq, true)
        }
        Degradation::GaussianNoise(_) => {
            if model.scale() != 1 {
                return Err(contract("noise evaluation needs a scale-1 model"));
            }
            (clean, false)
        }
    };
    let lq = degrade(&hq, spec)?;
    let out = restore(model, &lq)?;
    let metrics = Metrics {
        psnr: psnr(&out, &hq, y_channel)?,
        ssim: ssim(&out, &hq)?,
    };
    let baseline = if baseline {
        let up = upscale_bicubic(&lq, model.scale());
        Some(Metrics {
            psnr: psnr(&up, &hq, y_channel)?,
            ssim: ssim(&up, &hq)?,
        })
    } else {
        None
    };
    Ok(EvalRow {
        image: String::new(),
        metrics,
        baseline,
    })
}

/// Scores every readable image in `dir`; unreadable or unusable files are
/// skipped with a warning and listed in the report.
pub fn evaluate(
    model: &MatIrModel,
    dir: &Path,
    spec: &DegradationSpec,
    y_channel: bool,
) -> Result<EvalReport> {
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (i, path) in list_images(dir)?.into_iter().enumerate() {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let per_image = DegradationSpec {
            seed: spec.seed.wrapping_add(i as u64),
            ..*spec
        };
        let row = ImagePlane::read(&path).and_then(|img| evaluate_image(model, &img, &per_image, y_channel));
        match row {
            Ok(mut row) => {
                row.image = name;
                rows.push(row);
            }
            Err(e @ (Error::Format(_) | Error::Contract(_) | Error::Dimension(_) | Error::Io(_))) => {
                log::warn!("skipping {name}: {e}");
                skipped.push((name, e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    let header = format!(
        "{}\ndegradation={:?} y_channel={y_channel} luma=0.299R+0.587G+0.114B",
        report_header("evaluate", &model.config, spec.seed),
        spec.kind
    );
    Ok(EvalReport {
        header,
        rows,
        skipped,
    })
}
