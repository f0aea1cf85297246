use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::degrade::{degrade, Degradation, DegradationSpec};
use super::image::ImagePlane;
use super::metrics::psnr;
use super::{list_images, report_header, restore};
use crate::autodiff::Tape;
use crate::error::{contract, Error, Result};
use crate::model::{MatIrModel, Task};
use crate::nn::{Bound, ParamStore};

/// Optimizer and sampling settings for [`train`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSpec {
    /// Side of the ground-truth patch; the degraded input is `patch / scale`.
    pub patch: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fractions of `max_steps` at which the learning rate halves.
    pub milestones: Vec<f64>,
    /// Random horizontal flips and quarter-turn rotations.
    pub augment: bool,
    pub max_steps: usize,
    pub seed: u64,
    pub val_every: usize,
    /// Draw fresh noise for every sample; otherwise each training image keeps
    /// one fixed noise realization.
    pub resample_noise: bool,
    /// Worker threads for per-sample gradients; 0 picks automatically.
    pub threads: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            patch: 64,
            batch: 4,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            milestones: vec![0.5, 0.75, 0.9],
            augment: true,
            max_steps: 1000,
            seed: 0,
            val_every: 250,
            resample_noise: true,
            threads: 0,
        }
    }
}

impl TrainSpec {
    /// Learning rate in effect at 1-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| step > (m * self.max_steps as f64).round() as usize)
            .count();
        self.lr * 0.5f64.powi(passed as i32)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Training and validation images.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<ImagePlane>,
    /// Held-out images; when empty, centre crops of the training images are used.
    pub val: Vec<ImagePlane>,
    /// Files that could not be read, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let mut train = Vec::new();
        let mut skipped = Vec::new();
        for path in list_images(dir)? {
            match ImagePlane::read(&path) {
                Ok(img) => train.push(img.to_rgb()),
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    skipped.push((path.display().to_string(), e.to_string()));
                }
            }
        }
        if train.is_empty() {
            return Err(Error::EmptyDataset(dir.to_path_buf()));
        }
        Ok(Self {
            train,
            val: Vec::new(),
            skipped,
        })
    }

    pub fn from_images(train: Vec<ImagePlane>, val: Vec<ImagePlane>) -> Self {
        Self {
            train: train.iter().map(ImagePlane::to_rgb).collect(),
            val: val.iter().map(ImagePlane::to_rgb).collect(),
            skipped: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// `None` for the initial validation line.
    pub loss: Option<f64>,
    pub lr: f64,
    pub val_psnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub header: String,
    pub records: Vec<StepRecord>,
}

impl TrainReport {
    pub fn final_val_psnr(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.val_psnr)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.loss).collect()
    }

    /// `# header` lines, then `step,loss,lr[,val_psnr]` per step.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for line in self.header.lines() {
            let _ = writeln!(out, "# {line}");
        }
        out.push_str("step,loss,lr,val_psnr\n");
        for r in &self.records {
            let loss = r.loss.map(|l| format!("{l:.9}")).unwrap_or_default();
            let _ = write!(out, "{},{loss},{:e}", r.step, r.lr);
            if let Some(v) = r.val_psnr {
                let _ = write!(out, ",{v:.4}");
            }
            out.push('\n');
        }
        out
    }
}

/// One (input, target) pair as model-ready tensors.
struct Sample {
    input: crate::tensor::Tensor,
    target: crate::tensor::Tensor,
}

fn degraded_input(hq: &ImagePlane, kind: Degradation, seed: u64) -> Result<ImagePlane> {
    degrade(hq, &DegradationSpec { kind, seed })
}

/// Seed for the degradation of one draw, mixed from the run seed and position.
fn draw_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(a.wrapping_mul(0x1_0000_0001).wrapping_add(b));
    rng.gen()
}

/// Mean PSNR of the model over (input, clean) pairs.
pub fn mean_psnr(model: &MatIrModel, pairs: &[(ImagePlane, ImagePlane)], y_channel: bool) -> Result<f64> {
    let mut total = 0.0;
    for (lq, hq) in pairs {
        total += psnr(&restore(model, lq)?, hq, y_channel)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Whether metrics for `task` are reported on luma.
pub fn y_channel_for(task: Task) -> bool {
    task == Task::Sr
}

/// Seeded training loop: sample patches, augment, degrade, L1 loss, Adam.
pub fn train(
    model: &mut MatIrModel,
    data: &Dataset,
    kind: Degradation,
    spec: &TrainSpec,
) -> Result<TrainReport> {
    let scale = model.scale();
    match (model.config.task, kind) {
        (Task::Denoise, Degradation::GaussianNoise(_)) => {}
        (Task::Sr, Degradation::BicubicDown(s)) if s == scale => {}
        _ => {
            return Err(contract(format!(
                "degradation {kind:?} does not match a {} x{scale} model",
                model.config.task
            )))
        }
    }
    if data.train.is_empty() {
        return Err(contract("training set is empty"));
    }
    if spec.batch == 0 {
        return Err(contract("batch size must be positive"));
    }
    let win = model.config.window;
    if !spec.patch.is_multiple_of(scale) || !(spec.patch / scale).is_multiple_of(win) {
        return Err(contract(format!(
            "patch {} must be a multiple of scale x window = {}",
            spec.patch,
            scale * win
        )));
    }
    if let Some(img) = data.train.iter().find(|i| i.width < spec.patch || i.height < spec.patch) {
        return Err(contract(format!(
            "training image {}x{} is smaller than the {} patch",
            img.width, img.height, spec.patch
        )));
    }
    let y_channel = y_channel_for(model.config.task);

    let val_sources: Vec<ImagePlane> = if data.val.is_empty() {
        data.train
            .iter()
            .take(4)
            .map(|img| img.crop((img.width - spec.patch) / 2, (img.height - spec.patch) / 2, spec.patch, spec.patch))
            .collect::<Result<_>>()?
    } else {
        data.val
            .iter()
            .map(|img| {
                let (w, h) = (img.width / (scale * win) * scale * win, img.height / (scale * win) * scale * win);
                img.crop(0, 0, w.max(scale * win), h.max(scale * win))
            })
            .collect::<Result<_>>()?
    };
    let val: Vec<(ImagePlane, ImagePlane)> = val_sources
        .into_iter()
        .enumerate()
        .map(|(i, hq)| {
            // With fixed noise, validating on training crops reuses each image's
            // training realization so the figure is the training PSNR.
            let seed = if data.val.is_empty() && !spec.resample_noise {
                draw_seed(spec.seed, 0, i as u64)
            } else {
                draw_seed(spec.seed, u64::MAX, i as u64)
            };
            Ok((degraded_input(&hq, kind, seed)?, hq))
        })
        .collect::<Result<_>>()?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.threads)
        .build()
        .map_err(|e| contract(format!("thread pool: {e}")))?;

    let header = format!(
        "{}\ntask={} degradation={kind:?} patch={} batch={} lr={:e} betas=({}, {}) milestones={:?} augment={} steps={} val_every={} resample_noise={} y_channel={}",
        report_header("train", &model.config, spec.seed),
        model.config.task,
        spec.patch,
        spec.batch,
        spec.lr,
        spec.beta1,
        spec.beta2,
        spec.milestones,
        spec.augment,
        spec.max_steps,
        spec.val_every,
        spec.resample_noise,
        y_channel,
    );
    let mut records = vec![StepRecord {
        step: 0,
        loss: None,
        lr: spec.lr_at(1),
        val_psnr: Some(mean_psnr(model, &val, y_channel)?),
    }];

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut adam = Adam::new(&model.params, spec.beta1, spec.beta2, spec.eps);
    for step in 1..=spec.max_steps {
        let mut samples = Vec::with_capacity(spec.batch);
        for b in 0..spec.batch {
            let idx = rng.gen_range(0..data.train.len());
            let img = &data.train[idx];
            let x = rng.gen_range(0..=img.width - spec.patch);
            let y = rng.gen_range(0..=img.height - spec.patch);
            let (flip, rot) = if spec.augment {
                (rng.gen::<bool>(), rng.gen_range(0..4))
            } else {
                (false, 0)
            };
            let hq = img.crop(x, y, spec.patch, spec.patch)?.transformed(flip, rot);
            let noise_seed = if spec.resample_noise {
                draw_seed(spec.seed, step as u64, b as u64)
            } else {
                draw_seed(spec.seed, 0, idx as u64)
            };
            let lq = degraded_input(&hq, kind, noise_seed)?;
            samples.push(Sample {
                input: lq.to_tensor(),
                target: hq.to_tensor(),
            });
        }
        let m: &MatIrModel = model;
        let results: Vec<Result<(f64, Vec<Vec<f64>>)>> = pool.install(|| {
            samples
                .par_iter()
                .map(|s| {
                    let tape = Tape::new();
                    let p = Bound::trainable(&tape, &m.params);
                    let out = m.forward_bound(&p, tape.constant(&s.input))?;
                    let loss = (out - tape.constant(&s.target)).abs().mean();
                    let value = loss.item();
                    if !value.is_finite() {
                        return Ok((value, Vec::new()));
                    }
                    tape.backward(loss)?;
                    Ok((value, p.grads(&tape)))
                })
                .collect()
        });
        let mut loss = 0.0;
        let mut grads: Option<Vec<Vec<f64>>> = None;
        for r in results {
            let (l, g) = r?;
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            loss += l;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        for (x, y) in a.iter_mut().zip(b) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let inv = 1.0 / spec.batch as f64;
        let mut grads = grads.expect("batch is non-empty");
        for g in grads.iter_mut().flatten() {
            *g *= inv;
        }
        let lr = spec.lr_at(step);
        adam.step(&mut model.params, &grads, lr);
        let validate = step == spec.max_steps || (spec.val_every > 0 && step % spec.val_every == 0);
        let val_psnr = if validate {
            Some(mean_psnr(model, &val, y_channel)?)
        } else {
            None
        };
        if let Some(v) = val_psnr {
            log::info!("step {step}: loss {:.6} val {v:.3} dB", loss * inv);
        }
        records.push(StepRecord {
            step,
            loss: Some(loss * inv),
            lr,
            val_psnr,
        });
    }
    Ok(TrainReport { header, records })
}
