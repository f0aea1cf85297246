//! Four-direction state-space block for 2D feature maps.
//!
//! A `[C × H × W]` map is flattened into a `[H·W × C]` sequence along each
//! [`ScanPath`], scanned by its own [`SelectiveSsm`], restored to the grid and
//! averaged. The block follows the usual Mamba layout:
//!
//! ```text
//! x ─ norm ─ in_proj ─┬─ dwconv3×3 ─ SiLU ─ scans ─ mean ─┐
//!                     └───────────── SiLU ────────────── ⊙ ─ out_proj ─ + x
//! ```

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{contract, dim_err, Result};
use crate::nn::{trunc_normal, Bound, ChannelNorm, Linear, ParamId, ParamStore};
use crate::ssm::SelectiveSsm;
use crate::tensor::Tensor;

/// Traversal order of an `H × W` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScanPath {
    RowMajorForward,
    RowMajorBackward,
    ColMajorForward,
    ColMajorBackward,
}

impl ScanPath {
    pub const ALL: [ScanPath; 4] = [
        ScanPath::RowMajorForward,
        ScanPath::RowMajorBackward,
        ScanPath::ColMajorForward,
        ScanPath::ColMajorBackward,
    ];

    /// Paths used for a given direction count: 1 → row forward, 2 → both row
    /// paths, 4 → all.
    pub fn subset(directions: usize) -> Result<&'static [ScanPath]> {
        match directions {
            1 | 2 | 4 => Ok(&Self::ALL[..directions]),
            _ => Err(contract(format!("scan direction count must be 1, 2 or 4, got {directions}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScanPath::RowMajorForward => "row_fwd",
            ScanPath::RowMajorBackward => "row_bwd",
            ScanPath::ColMajorForward => "col_fwd",
            ScanPath::ColMajorBackward => "col_bwd",
        }
    }

    /// Flat grid position (`r·W + c`) visited at each sequence index.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        let len = h * w;
        let col_major = |l: usize| (l % h) * w + l / h;
        match self {
            ScanPath::RowMajorForward => (0..len).collect(),
            ScanPath::RowMajorBackward => (0..len).rev().collect(),
            ScanPath::ColMajorForward => (0..len).map(col_major).collect(),
            ScanPath::ColMajorBackward => (0..len).rev().map(col_major).collect(),
        }
    }
}

/// `[C × H × W]` → `[H·W × C]` in the order of `path`.
pub fn flatten<'t>(x: Var<'t>, path: ScanPath) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(dim_err(format!("flatten expects [C, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let len = h * w;
    let order = path.order(h, w);
    let mut idx = Vec::with_capacity(len * c);
    for &pos in &order {
        for ch in 0..c {
            idx.push(ch * len + pos);
        }
    }
    Ok(x.gather(Rc::new(idx), &[len, c]))
}

/// Inverse of [`flatten`]: `[H·W × C]` → `[C × H × W]`.
pub fn unflatten<'t>(s: Var<'t>, path: ScanPath, h: usize, w: usize) -> Result<Var<'t>> {
    let shape = s.shape();
    if shape.len() != 2 || shape[0] != h * w {
        return Err(dim_err(format!(
            "unflatten of {shape:?} onto a {h}x{w} grid needs {} rows",
            h * w
        )));
    }
    let (len, c) = (shape[0], shape[1]);
    let mut seq_at = vec![0; len];
    for (l, pos) in path.order(h, w).into_iter().enumerate() {
        seq_at[pos] = l;
    }
    let mut idx = Vec::with_capacity(len * c);
    for ch in 0..c {
        for &l in &seq_at {
            idx.push(l * c + ch);
        }
    }
    Ok(s.gather(Rc::new(idx), &[c, h, w]))
}

/// Hyperparameters of one [`IrssBlock`].
#[derive(Clone, Debug, PartialEq)]
pub struct IrssConfig {
    pub channels: usize,
    pub expansion: usize,
    pub state_size: usize,
    pub paths: Vec<ScanPath>,
}

impl IrssConfig {
    pub fn inner(&self) -> usize {
        self.channels * self.expansion
    }

    pub fn dt_rank(&self) -> usize {
        self.channels.div_ceil(16)
    }
}

#[derive(Clone, Debug)]
pub struct IrssBlock {
    pub config: IrssConfig,
    pub norm: ChannelNorm,
    /// `C → 2E`: scan branch rows `0..E`, gate rows `E..2E`.
    pub in_proj: Linear,
    /// `[E × 1 × 3 × 3]`
    pub dw_weight: ParamId,
    pub dw_bias: ParamId,
    pub scans: Vec<(ScanPath, SelectiveSsm)>,
    pub out_proj: Linear,
}

impl IrssBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, config: IrssConfig) -> Self {
        let (c, e) = (config.channels, config.inner());
        let norm = ChannelNorm::new(store, &format!("{name}.norm"), c);
        let in_proj = Linear::new(store, rng, &format!("{name}.in_proj"), c, 2 * e, false);
        let dw_weight = store.add(
            format!("{name}.dw.weight"),
            trunc_normal(rng, &[e, 1, 3, 3], 0.2),
        );
        let dw_bias = store.add(format!("{name}.dw.bias"), Tensor::zeros(&[e]));
        let scans = config
            .paths
            .iter()
            .map(|&path| {
                let ssm = SelectiveSsm::new(
                    store,
                    rng,
                    &format!("{name}.scan.{}", path.name()),
                    e,
                    config.state_size,
                    config.dt_rank(),
                );
                (path, ssm)
            })
            .collect();
        let out_proj = Linear::new(store, rng, &format!("{name}.out_proj"), e, c, false);
        Self {
            config,
            norm,
            in_proj,
            dw_weight,
            dw_bias,
            scans,
            out_proj,
        }
    }

    /// Forward pass over every path the block was built with.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let paths: Vec<ScanPath> = self.scans.iter().map(|(path, _)| *path).collect();
        self.forward_paths(p, x, &paths)
    }

    /// Forward pass restricted to the first `directions` of the standard path
    /// order (see [`ScanPath::subset`]).
    pub fn forward_ndir<'t>(&self, p: &Bound<'t>, x: Var<'t>, directions: usize) -> Result<Var<'t>> {
        self.forward_paths(p, x, ScanPath::subset(directions)?)
    }

    /// Merged, ungated scan output `mean_p unflatten(scan_p(flatten(u, p)))`
    /// for the conditioned input `u`; exposed for inspection and tests.
    pub fn merged_scans<'t>(
        &self,
        p: &Bound<'t>,
        u: Var<'t>,
        paths: &[ScanPath],
    ) -> Result<Var<'t>> {
        let s = u.shape();
        let (h, w) = (s[1], s[2]);
        let mut merged: Option<Var<'t>> = None;
        for &path in paths {
            let ssm = self
                .scans
                .iter()
                .find(|(q, _)| *q == path)
                .map(|(_, ssm)| ssm)
                .ok_or_else(|| contract(format!("block has no parameters for path {path:?}")))?;
            let y = unflatten(ssm.forward(p, flatten(u, path)?)?, path, h, w)?;
            merged = Some(match merged {
                Some(m) => m + y,
                None => y,
            });
        }
        let merged = merged.ok_or_else(|| contract("at least one scan path is required"))?;
        Ok(merged.scale(1.0 / paths.len() as f64))
    }

    /// Scan-branch input after projection, depthwise conv and SiLU.
    fn scan_input<'t>(&self, p: &Bound<'t>, xz: Var<'t>) -> Result<Var<'t>> {
        let e = self.config.inner();
        Ok(xz
            .slice_rows(0, e)
            .depthwise_conv2d(p.get(self.dw_weight), 1)?
            .bias_rows(p.get(self.dw_bias))
            .silu())
    }

    pub fn forward_paths<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        paths: &[ScanPath],
    ) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 3 || s[0] != self.config.channels {
            return Err(dim_err(format!(
                "IRSS block for {} channels got input {s:?}",
                self.config.channels
            )));
        }
        let e = self.config.inner();
        let xz = self.in_proj.forward_channels(p, self.norm.forward(p, x))?;
        let u = self.scan_input(p, xz)?;
        let gate = xz.slice_rows(e, 2 * e).silu();
        let y = self.merged_scans(p, u, paths)? * gate;
        Ok(x + self.out_proj.forward_channels(p, y)?)
    }

    pub fn numel(&self) -> usize {
        let e = self.config.inner();
        self.norm.numel()
            + self.in_proj.numel()
            + e * 9
            + e
            + self.scans.iter().map(|(_, s)| s.numel()).sum::<usize>()
            + self.out_proj.numel()
    }

    /// Multiply-accumulates for one `h × w` pass; every term is linear in `h·w`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let hw = (h * w) as u64;
        let (c, e) = (self.config.channels as u64, self.config.inner() as u64);
        let proj = c * 2 * e + e * c;
        let dw = e * 9;
        let gate = e;
        let scans: u64 = self.scans.iter().map(|(_, s)| s.macs(h * w)).sum();
        hw * (proj + dw + gate) + scans
    }
}
