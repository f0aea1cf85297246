//! The full restoration network: shallow conv stem, interleaved Transformer
//! and state-space layers, and a task-specific reconstruction head.

use std::fmt;
use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{min_group_size, LayerParts, TransformerLayer, TwlaConfig};
use crate::autodiff::{Tape, Var};
use crate::checkpoint;
use crate::error::{contract, dim_err, Error, Result};
use crate::irss::{IrssBlock, IrssConfig, ScanPath};
use crate::nn::{Bound, Conv2d, ParamStore};
use crate::resample::Resize2d;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[serde(alias = "super-resolution")]
    Sr,
    Denoise,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Sr => "sr",
            Task::Denoise => "denoise",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Transformer,
    Mamba,
}

/// Architecture hyperparameters. Every field has a default, so a config file
/// only needs the values it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatIrConfig {
    pub channels: usize,
    /// Number of deep layers.
    pub depth: usize,
    /// `T` (Transformer) and `M` (state-space) letters, repeated to `depth`.
    pub pattern: String,
    pub window: usize,
    pub neighbors: usize,
    pub geo_dim: usize,
    pub heads: usize,
    pub state_size: usize,
    pub expansion: usize,
    pub scan_directions: usize,
    pub scale: usize,
    pub task: Task,
    pub seed: u64,
    pub remove_twla: bool,
    pub remove_cga: bool,
    pub remove_irss: bool,
}

impl Default for MatIrConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            depth: 4,
            pattern: "TM".into(),
            window: 8,
            neighbors: 8,
            geo_dim: 16,
            heads: 1,
            state_size: 16,
            expansion: 2,
            scan_directions: 4,
            scale: 2,
            task: Task::Sr,
            seed: 0,
            remove_twla: false,
            remove_cga: false,
            remove_irss: false,
        }
    }
}

fn cfg_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

impl MatIrConfig {
    /// Desk-scale configuration: 16 channels, four layers `TMTM`, 4×4
    /// windows with 3 neighbors, state size 8.
    pub fn tiny(task: Task, scale: usize) -> Self {
        Self {
            channels: 16,
            depth: 4,
            pattern: "TMTM".into(),
            window: 4,
            neighbors: 3,
            state_size: 8,
            scale,
            task,
            ..Self::default()
        }
    }

    /// Full-width preset: 180 channels, 12 alternating layers.
    /// Per-layer widths were never published, so its census is its own.
    pub fn large(task: Task, scale: usize) -> Self {
        Self {
            channels: 180,
            depth: 12,
            pattern: "TM".into(),
            window: 8,
            neighbors: 8,
            heads: 6,
            state_size: 16,
            scale,
            task,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Layer kinds in order, after ablation flags.
    pub fn layers(&self) -> Vec<LayerKind> {
        self.pattern
            .chars()
            .cycle()
            .take(self.depth)
            .filter_map(|ch| match ch.to_ascii_uppercase() {
                'T' => Some(LayerKind::Transformer),
                'M' if !self.remove_irss => Some(LayerKind::Mamba),
                _ => None,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(cfg_err("channels", "must be positive"));
        }
        if self.depth < 2 {
            return Err(cfg_err("depth", format!("must be at least 2, got {}", self.depth)));
        }
        if self.pattern.is_empty() || !self.pattern.chars().all(|c| matches!(c, 'T' | 'M' | 't' | 'm')) {
            return Err(cfg_err(
                "pattern",
                format!("must be a non-empty string of T and M, got {:?}", self.pattern),
            ));
        }
        if self.window < 2 {
            return Err(cfg_err("window", format!("must be at least 2, got {}", self.window)));
        }
        let limit = min_group_size(self.window) - 1;
        if self.neighbors == 0 || self.neighbors > limit {
            return Err(cfg_err(
                "neighbors",
                format!("must be in 1..={limit} for window {}, got {}", self.window, self.neighbors),
            ));
        }
        if self.geo_dim == 0 {
            return Err(cfg_err("geo_dim", "must be positive"));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(cfg_err(
                "heads",
                format!("{} heads do not divide {} channels", self.heads, self.channels),
            ));
        }
        if self.state_size == 0 {
            return Err(cfg_err("state_size", "must be positive"));
        }
        if self.expansion == 0 {
            return Err(cfg_err("expansion", "must be positive"));
        }
        if !matches!(self.scan_directions, 1 | 2 | 4) {
            return Err(cfg_err(
                "scan_directions",
                format!("must be 1, 2 or 4, got {}", self.scan_directions),
            ));
        }
        match (self.task, self.scale) {
            (Task::Denoise, 1) | (Task::Sr, 2..=4) => {}
            (Task::Denoise, s) => {
                return Err(cfg_err("scale", format!("denoising requires scale 1, got {s}")))
            }
            (Task::Sr, s) => {
                return Err(cfg_err("scale", format!("super-resolution requires scale 2, 3 or 4, got {s}")))
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum DeepLayer {
    Transformer(TransformerLayer),
    Mamba(IrssBlock),
}

impl DeepLayer {
    fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            DeepLayer::Transformer(l) => l.forward(p, x),
            DeepLayer::Mamba(b) => b.forward(p, x),
        }
    }

    pub fn numel(&self) -> usize {
        match self {
            DeepLayer::Transformer(l) => l.numel(),
            DeepLayer::Mamba(b) => b.numel(),
        }
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        match self {
            DeepLayer::Transformer(l) => l.macs(h, w),
            DeepLayer::Mamba(b) => b.macs(h, w),
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            DeepLayer::Transformer(_) => LayerKind::Transformer,
            DeepLayer::Mamba(_) => LayerKind::Mamba,
        }
    }
}

/// Reconstruction stage.
#[derive(Clone, Debug)]
pub enum Head {
    /// Conv + depth-to-space stages, then a 3-channel conv; the bicubic
    /// upsampled input is added back.
    Upsample { stages: Vec<(Conv2d, usize)>, last: Conv2d },
    /// 3-channel conv plus the input image.
    Residual { last: Conv2d },
}

impl Head {
    pub fn last(&self) -> &Conv2d {
        match self {
            Head::Upsample { last, .. } | Head::Residual { last } => last,
        }
    }
}

/// Depth-to-space: `[C·r² × H × W]` → `[C × rH × rW]`.
pub fn pixel_shuffle<'t>(x: Var<'t>, r: usize) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 3 || !s[0].is_multiple_of(r * r) {
        return Err(dim_err(format!("pixel shuffle by {r} needs [C*{} x H x W], got {s:?}", r * r)));
    }
    let (c, h, w) = (s[0] / (r * r), s[1], s[2]);
    let (oh, ow) = (h * r, w * r);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let sub = (y % r) * r + xx % r;
                idx.push(((ch * r * r + sub) * h + y / r) * w + xx / r);
            }
        }
    }
    Ok(x.gather(Rc::new(idx), &[c, oh, ow]))
}

#[derive(Clone, Debug)]
pub struct MatIrModel {
    pub config: MatIrConfig,
    pub params: ParamStore,
    pub stem: Conv2d,
    pub layers: Vec<DeepLayer>,
    pub head: Head,
}

impl MatIrModel {
    pub fn build(config: &MatIrConfig) -> Result<Self> {
        config.validate()?;
        Self::construct(config, &config.layers())
    }

    fn construct(config: &MatIrConfig, kinds: &[LayerKind]) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let stem = Conv2d::new(&mut store, &mut rng, "stem", 3, c, 3);
        let twla = TwlaConfig {
            dim: c,
            window: config.window,
            neighbors: config.neighbors,
            geo_dim: config.geo_dim,
            heads: config.heads,
        };
        let parts = LayerParts {
            twla: !config.remove_twla,
            cga: !config.remove_cga,
        };
        let paths = ScanPath::subset(config.scan_directions)?.to_vec();
        let mut layers = Vec::with_capacity(kinds.len());
        for (i, kind) in kinds.iter().enumerate() {
            let name = format!("layers.{i}");
            layers.push(match kind {
                LayerKind::Transformer => DeepLayer::Transformer(TransformerLayer::new(
                    &mut store, &mut rng, &name, twla, parts,
                )?),
                LayerKind::Mamba => DeepLayer::Mamba(IrssBlock::new(
                    &mut store,
                    &mut rng,
                    &name,
                    IrssConfig {
                        channels: c,
                        expansion: config.expansion,
                        state_size: config.state_size,
                        paths: paths.clone(),
                    },
                )),
            });
        }
        let head = match config.task {
            Task::Denoise => Head::Residual {
                last: Conv2d::new(&mut store, &mut rng, "head.last", c, 3, 3),
            },
            Task::Sr => {
                let factors: &[usize] = match config.scale {
                    2 => &[2],
                    3 => &[3],
                    4 => &[2, 2],
                    s => return Err(cfg_err("scale", format!("unsupported scale {s}"))),
                };
                let stages = factors
                    .iter()
                    .enumerate()
                    .map(|(i, &r)| {
                        let conv = Conv2d::new(&mut store, &mut rng, &format!("head.up.{i}"), c, c * r * r, 3);
                        (conv, r)
                    })
                    .collect();
                Head::Upsample {
                    stages,
                    last: Conv2d::new(&mut store, &mut rng, "head.last", c, 3, 3),
                }
            }
        };
        let mut model = Self {
            config: config.clone(),
            params: store,
            stem,
            layers,
            head,
        };
        // Start as the identity (denoise) or plain bicubic upsampling (SR).
        model.zero_head();
        Ok(model)
    }

    pub fn scale(&self) -> usize {
        self.config.scale
    }

    /// Records one forward pass of `image: [3 × H × W]` with parameters `p`.
    pub fn forward_bound<'t>(&self, p: &Bound<'t>, image: Var<'t>) -> Result<Var<'t>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(dim_err(format!("model input must be [3 x H x W], got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        let win = self.config.window;
        if h % win != 0 || w % win != 0 {
            return Err(contract(format!(
                "input {h}x{w} is not a multiple of the window size {win}; pad to a multiple of {win} and crop the output"
            )));
        }
        let shallow = self.stem.forward(p, image)?;
        let mut deep = shallow;
        for layer in &self.layers {
            deep = layer.forward(p, deep)?;
        }
        let mut f = deep + shallow;
        match &self.head {
            Head::Residual { last } => Ok(last.forward(p, f)? + image),
            Head::Upsample { stages, last } => {
                for (conv, r) in stages {
                    f = pixel_shuffle(conv.forward(p, f)?, *r)?;
                }
                let s = self.config.scale;
                let base = image.resize(&Resize2d::bicubic(h, w, h * s, w * s));
                Ok(last.forward(p, f)? + base)
            }
        }
    }

    /// Inference on a `[3 × H × W]` tensor.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = Bound::frozen(&tape, &self.params);
        Ok(self.forward_bound(&p, tape.constant(image))?.to_tensor())
    }

    /// Zeroes the final reconstruction conv: the model then returns its input
    /// (denoise) or the bicubic upsampling of it (SR). Freshly built models
    /// start this way.
    pub fn zero_head(&mut self) {
        let last = self.head.last().clone();
        for id in [last.weight, last.bias] {
            let t = self.params.get_mut(id);
            *t = Tensor::zeros(t.shape());
        }
    }

    pub fn count_params(&self) -> usize {
        self.params.numel()
    }

    /// Analytic multiply-accumulate count for one forward pass on `h × w`.
    /// Convolutions count `out·in·k²` per output pixel; layers report their
    /// own terms (see `TransformerLayer::macs`, `IrssBlock::macs`).
    pub fn estimate_flops(&self, h: usize, w: usize) -> u64 {
        let mut total = self.stem.macs(h, w);
        total += self.layers.iter().map(|l| l.macs(h, w)).sum::<u64>();
        match &self.head {
            Head::Residual { last } => total += last.macs(h, w),
            Head::Upsample { stages, last } => {
                let (mut ch, mut cw) = (h, w);
                for (conv, r) in stages {
                    total += conv.macs(ch, cw);
                    ch *= r;
                    cw *= r;
                }
                total += last.macs(ch, cw);
            }
        }
        total
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, self.params.iter())
    }

    /// Builds the model for `config` and replaces its parameters with the
    /// checkpoint's. The file must hold exactly the same tensors.
    pub fn load_checkpoint(path: &Path, config: &MatIrConfig) -> Result<Self> {
        Self::from_entries(checkpoint::load(path)?, config)
    }

    /// As [`MatIrModel::load_checkpoint`], from already decoded tensors.
    pub fn from_entries(entries: Vec<(String, Tensor)>, config: &MatIrConfig) -> Result<Self> {
        let mut model = Self::build(config)?;
        let found: usize = entries.iter().map(|(_, t)| t.numel()).sum();
        let census = Error::Census {
            expected: model.count_params(),
            expected_tensors: model.params.len(),
            found,
            found_tensors: entries.len(),
        };
        if entries.len() != model.params.len() || found != model.count_params() {
            return Err(census);
        }
        for (name, t) in entries {
            let id = model.params.find(&name).ok_or_else(|| {
                Error::Format(format!("checkpoint tensor {name} does not exist in this model"))
            })?;
            let slot = model.params.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(model)
    }

    /// Layer pattern actually built, e.g. `TMTM`.
    pub fn pattern(&self) -> String {
        self.layers
            .iter()
            .map(|l| match l.kind() {
                LayerKind::Transformer => 'T',
                LayerKind::Mamba => 'M',
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use crate::nn::uniform;

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = uniform(&mut rng, &[3, h, w], 0.5);
        Tensor::from_fn(&[3, h, w], |i| t.data()[i] + 0.5)
    }

    /// Parameter count summed from layer shapes.
    fn tiny_hand_count() -> usize {
        let c = 16;
        let stem = 3 * c * 9 + c;
        let norms = 4 * 2 * c;
        let ffn = 2 * ((c * 2 * c + 2 * c) + (2 * c * c + c));
        let mlp = |inp: usize| (inp * 16 + 16) + (16 * 16 + 16) + 16;
        let twla = 3 * c * c + mlp(2) + mlp(5);
        let cga = 3 * c * c;
        let transformer = norms + ffn + twla + cga;
        let (e, n, r) = (2 * c, 8, 1);
        let ssm = e * r + (r * e + e) + 2 * e * n + e * n + e;
        let mamba = 2 * c + c * 2 * e + (e * 9 + e) + 4 * ssm + e * c;
        let head = (c * 4 * c * 9 + 4 * c) + (c * 3 * 9 + 3);
        stem + 2 * transformer + 2 * mamba + head
    }

    #[test]
    fn tiny_census() {
        let m = MatIrModel::build(&MatIrConfig::tiny(Task::Sr, 2)).unwrap();
        assert_eq!(m.pattern(), "TMTM");
        assert_eq!(tiny_hand_count(), 30_163);
        assert_eq!(m.count_params(), tiny_hand_count());
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = MatIrConfig::tiny(Task::Sr, 2);
        let a = MatIrModel::build(&cfg).unwrap();
        let b = MatIrModel::build(&cfg).unwrap();
        assert_eq!(a.params, b.params);
        let c = MatIrModel::build(&MatIrConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn config_errors_name_the_field() {
        let field = |cfg: MatIrConfig| match MatIrModel::build(&cfg) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        };
        let t = MatIrConfig::tiny(Task::Sr, 2);
        assert_eq!(field(MatIrConfig { depth: 1, ..t.clone() }), "depth");
        assert_eq!(field(MatIrConfig { scale: 1, ..t.clone() }), "scale");
        assert_eq!(field(MatIrConfig { task: Task::Denoise, ..t.clone() }), "scale");
        assert_eq!(field(MatIrConfig { neighbors: 6, ..t.clone() }), "neighbors");
        assert_eq!(field(MatIrConfig { pattern: "TX".into(), ..t.clone() }), "pattern");
        assert_eq!(field(MatIrConfig { scan_directions: 3, ..t.clone() }), "scan_directions");
        assert_eq!(field(MatIrConfig { heads: 3, ..t }), "heads");
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let cfg = MatIrConfig::tiny(Task::Denoise, 1);
        assert_eq!(MatIrConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = MatIrConfig::from_toml("channels = 8\ntask = \"denoise\"\nscale = 1\n").unwrap();
        assert_eq!(partial.channels, 8);
        assert!(matches!(MatIrConfig::from_toml("chanels = 8"), Err(Error::Format(_))));
        assert_eq!(cfg.hash(), cfg.clone().hash());
        assert_ne!(cfg.hash(), MatIrConfig { seed: 9, ..cfg }.hash());
    }

    #[test]
    fn output_shapes() {
        for s in 2..=4 {
            let m = MatIrModel::build(&MatIrConfig::tiny(Task::Sr, s)).unwrap();
            let y = m.forward(&image(8, 12, 0)).unwrap();
            assert_eq!(y.shape(), &[3, 8 * s, 12 * s]);
        }
        let m = MatIrModel::build(&MatIrConfig::tiny(Task::Sr, 2)).unwrap();
        assert_eq!(m.forward(&image(32, 32, 1)).unwrap().shape(), &[3, 64, 64]);
        let err = m.forward(&image(6, 8, 0)).unwrap_err().to_string();
        assert!(err.contains("pad"), "{err}");
    }

    #[test]
    fn pixel_shuffle_layout() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::from_fn(&[4, 1, 2], |i| i as f64));
        let y = pixel_shuffle(x, 2).unwrap();
        assert_eq!(y.shape(), vec![1, 2, 4]);
        // channel sub-index (i·2 + j) lands at (2y + i, 2x + j).
        assert_eq!(*y.value(), vec![0.0, 2.0, 1.0, 3.0, 4.0, 6.0, 5.0, 7.0]);
    }

    fn zero_deep_outputs(m: &mut MatIrModel) {
        let mut ids = Vec::new();
        for l in &m.layers {
            match l {
                DeepLayer::Transformer(t) => {
                    ids.extend(t.twla().map(|b| b.v.weight));
                    ids.extend(t.cga().map(|b| b.v.weight));
                    for f in t.ffns() {
                        ids.push(f.fc2.weight);
                        ids.extend(f.fc2.bias);
                    }
                }
                DeepLayer::Mamba(b) => ids.push(b.out_proj.weight),
            }
        }
        for id in ids {
            let t = m.params.get_mut(id);
            *t = Tensor::zeros(t.shape());
        }
    }

    /// Fresh model with a random final conv, so the deep path reaches the output.
    fn live(cfg: &MatIrConfig) -> MatIrModel {
        let mut m = MatIrModel::build(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let w = m.head.last().weight;
        let t = m.params.get_mut(w);
        *t = crate::nn::uniform(&mut rng, t.shape(), 0.1);
        m
    }

    #[test]
    fn residual_identity() {
        // Fresh models start from a zeroed head.
        let m = MatIrModel::build(&MatIrConfig::tiny(Task::Denoise, 1)).unwrap();
        let x = image(8, 8, 3);
        assert_eq!(m.forward(&x).unwrap(), x);
        let mut m = live(&MatIrConfig::tiny(Task::Denoise, 1));
        assert_ne!(m.forward(&x).unwrap(), x);
        zero_deep_outputs(&mut m);
        let w = m.head.last().weight;
        assert!(m.params.get(w).data().iter().any(|&v| v != 0.0));
        // Zeroed deep outputs leave only the stem features under the head.
        assert_ne!(m.forward(&x).unwrap(), x);
        m.zero_head();
        assert_eq!(m.forward(&x).unwrap(), x);
    }

    #[test]
    fn fresh_sr_model_is_bicubic() {
        let m = MatIrModel::build(&MatIrConfig::tiny(Task::Sr, 2)).unwrap();
        let x = image(8, 8, 8);
        let up = crate::resample::Resize2d::bicubic(8, 8, 16, 16).apply(x.data(), 3);
        let d = m.forward(&x).unwrap().data().iter().zip(&up).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d < 1e-12, "{d}");
    }

    #[test]
    fn forward_is_deterministic() {
        let m = MatIrModel::build(&MatIrConfig::tiny(Task::Denoise, 1)).unwrap();
        let x = image(8, 8, 4);
        assert_eq!(m.forward(&x).unwrap(), m.forward(&x).unwrap());
    }

    #[test]
    fn ablations_shrink_the_census() {
        let full = MatIrConfig::tiny(Task::Denoise, 1);
        let n = MatIrModel::build(&full).unwrap().count_params();
        for cfg in [
            MatIrConfig { remove_twla: true, ..full.clone() },
            MatIrConfig { remove_cga: true, ..full.clone() },
            MatIrConfig { remove_irss: true, ..full.clone() },
            MatIrConfig { scan_directions: 1, ..full.clone() },
        ] {
            assert!(MatIrModel::build(&cfg).unwrap().count_params() < n);
        }
        let no_irss = MatIrModel::build(&MatIrConfig { remove_irss: true, ..full }).unwrap();
        assert_eq!(no_irss.pattern(), "TT");
    }

    #[test]
    fn flops() {
        let cfg = MatIrConfig::tiny(Task::Denoise, 1);
        let m = MatIrModel::build(&cfg).unwrap();
        let irss = m.layers.iter().find(|l| l.kind() == LayerKind::Mamba).unwrap();
        assert_eq!(irss.macs(16, 16), 4 * irss.macs(8, 8));
        let twla = match &m.layers[0] {
            DeepLayer::Transformer(t) => t.twla().unwrap().macs(8, 8),
            _ => unreachable!(),
        };
        match &m.layers[0] {
            DeepLayer::Transformer(t) => assert_eq!(t.twla().unwrap().macs(16, 16), 4 * twla),
            _ => unreachable!(),
        }
        let bare = MatIrModel::construct(&cfg, &[]).unwrap();
        assert_eq!(bare.estimate_flops(8, 8), 2 * (3 * 16 * 9 * 64));
        assert!(m.estimate_flops(16, 16) > 3 * m.estimate_flops(8, 8));
        let wide = MatIrModel::build(&MatIrConfig { channels: 32, ..cfg }).unwrap();
        assert!(wide.count_params() > 2 * m.count_params());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = MatIrConfig::tiny(Task::Sr, 2);
        let m = live(&cfg);
        m.save_checkpoint(&path).unwrap();
        let back = MatIrModel::load_checkpoint(&path, &cfg).unwrap();
        let x = image(8, 8, 5);
        let d = m.forward(&x).unwrap().max_abs_diff(&back.forward(&x).unwrap());
        assert!(d < 1e-5, "{d}");

        let other = MatIrConfig { channels: 8, ..cfg.clone() };
        let err = MatIrModel::load_checkpoint(&path, &other).unwrap_err();
        assert!(matches!(err, Error::Census { .. }));
        let msg = err.to_string();
        assert!(msg.contains(&m.count_params().to_string()), "{msg}");

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(MatIrModel::load_checkpoint(&path, &cfg), Err(Error::Format(_))));
    }

    #[test]
    fn end_to_end_gradient() {
        let cfg = MatIrConfig::tiny(Task::Denoise, 1);
        let m = live(&cfg);
        let x0 = image(8, 8, 6);
        let target = image(8, 8, 7);
        let r = check_gradients(
            |t, x| {
                let p = Bound::frozen(t, &m.params);
                let y = m.forward_bound(&p, x).unwrap();
                (y - t.constant(&target)).abs().mean()
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(r < 1e-4, "{r}");
    }
}
