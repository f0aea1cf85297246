//! Triangular window local attention.
//!
//! For a centre `i` with neighbors `𝒩(i)`:
//!
//! ```text
//! A_ij  = softmax_j(Q_i·K_j / √D + G_ij)          G_ij  = u·φ(e_ij)
//! Y_i   = Σ_j Σ_{k∈𝒩(j)} G_ijk A_ij V_j            G_ijk = softmax_k(v·ψ(e_ij, e_ik, θ_ijk))
//! ```
//!
//! The inner sum is evaluated first as a per-pair gate `g_ij = Σ_k G_ijk`, so
//! the aggregation is a single fused neighborhood op over `(Q, K, V, G, g)`.
//! Geometry features depend only on integer offsets, so φ and ψ run once per
//! distinct offset (or offset pair) and are gathered back to every pixel.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::{Arc, Mutex};

use rand_chacha::ChaCha8Rng;

use super::window::{build_triangle_windows, edge_angle, TriangleWindow};
use crate::autodiff::Var;
use crate::error::{contract, dim_err, Result};
use crate::nn::{Bound, Linear, ParamStore};

/// Hyperparameters of a [`TwlaBlock`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TwlaConfig {
    pub dim: usize,
    pub window: usize,
    pub neighbors: usize,
    /// Hidden and output width of φ and ψ.
    pub geo_dim: usize,
    pub heads: usize,
}

/// Precomputed indexing for one set of windows.
#[derive(Debug)]
pub struct TwlaGeometry {
    pub pixels: usize,
    pub k: usize,
    /// `[N × k]` neighbor indices.
    neighbors: Vec<usize>,
    /// `[N·k]` row of `pair_features` for each `(i, j)`.
    pair_index: Vec<usize>,
    /// `[P × 2]` distinct `e_ij`.
    pair_features: Vec<f64>,
    /// `[N·k·k]` row of `triple_features` for each `(i, j, k)`.
    triple_index: Vec<usize>,
    /// `[T × 5]` distinct `(e_ij, e_ik, θ_ijk)`.
    triple_features: Vec<f64>,
}

impl TwlaGeometry {
    pub fn from_windows(windows: &[TriangleWindow]) -> Result<Self> {
        let pixels = windows.len();
        let k = windows.first().map_or(0, |w| w.neighbors.len());
        if k == 0 {
            return Err(contract("TWLA needs at least one window with a non-empty neighborhood"));
        }
        let mut seen = vec![false; pixels];
        let mut neighbors = Vec::with_capacity(pixels * k);
        let mut pairs: HashMap<(i64, i64), usize> = HashMap::new();
        let mut triples: HashMap<[i64; 4], usize> = HashMap::new();
        let mut pair_index = Vec::with_capacity(pixels * k);
        let mut triple_index = Vec::with_capacity(pixels * k * k);
        let mut pair_features = Vec::new();
        let mut triple_features = Vec::new();
        let pos: Vec<(i64, i64)> = {
            let mut p = vec![(0, 0); pixels];
            for w in windows {
                if w.center < pixels {
                    p[w.center] = (w.position.0 as i64, w.position.1 as i64);
                }
            }
            p
        };
        let mut order: Vec<&TriangleWindow> = windows.iter().collect();
        order.sort_by_key(|w| w.center);
        for w in order {
            if w.center >= pixels || seen[w.center] {
                return Err(contract(format!(
                    "windows must cover each of the {pixels} pixels exactly once as a centre (bad centre {})",
                    w.center
                )));
            }
            seen[w.center] = true;
            if w.neighbors.len() != k || w.second_hop.iter().any(|s| s.len() != k) {
                return Err(contract(format!("every neighborhood must have {k} members")));
            }
            if w.neighbors.iter().chain(w.second_hop.iter().flatten()).any(|&j| j >= pixels) {
                return Err(contract(format!("neighbor index out of range for {pixels} pixels")));
            }
            let pi = pos[w.center];
            let off = |j: usize| (pos[j].0 - pi.0, pos[j].1 - pi.1);
            for (jj, &j) in w.neighbors.iter().enumerate() {
                neighbors.push(j);
                let e_ij = off(j);
                let n = pairs.len();
                let row = *pairs.entry(e_ij).or_insert_with(|| {
                    pair_features.extend([e_ij.0 as f64, e_ij.1 as f64]);
                    n
                });
                pair_index.push(row);
                for &kk in &w.second_hop[jj] {
                    let e_ik = off(kk);
                    let n = triples.len();
                    let row = *triples.entry([e_ij.0, e_ij.1, e_ik.0, e_ik.1]).or_insert_with(|| {
                        triple_features.extend([
                            e_ij.0 as f64,
                            e_ij.1 as f64,
                            e_ik.0 as f64,
                            e_ik.1 as f64,
                            edge_angle(e_ij, e_ik),
                        ]);
                        n
                    });
                    triple_index.push(row);
                }
            }
        }
        Ok(Self {
            pixels,
            k,
            neighbors,
            pair_index,
            pair_features,
            triple_index,
            triple_features,
        })
    }

    pub fn distinct_pairs(&self) -> usize {
        self.pair_features.len() / 2
    }

    pub fn distinct_triples(&self) -> usize {
        self.triple_features.len() / 5
    }
}

/// Softmax-normalized neighborhood weights for one head of one centre.
fn neighborhood_softmax(logits: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - m).exp();
        s += *l;
    }
    for l in logits.iter_mut() {
        *l /= s;
    }
}

/// Attention weights `[N × heads × k]` for given `Q, K: [N × D]`, bias `G: [N × k]`.
pub fn attention_weights(
    q: &[f64],
    k_: &[f64],
    bias: &[f64],
    neighbors: &[usize],
    dim: usize,
    heads: usize,
    k: usize,
) -> Vec<f64> {
    let n = q.len() / dim;
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut a = vec![0.0; n * heads * k];
    for i in 0..n {
        for h in 0..heads {
            let row = &mut a[(i * heads + h) * k..(i * heads + h + 1) * k];
            for (jj, l) in row.iter_mut().enumerate() {
                let j = neighbors[i * k + jj];
                let qi = &q[i * dim + h * dh..i * dim + (h + 1) * dh];
                let kj = &k_[j * dim + h * dh..j * dim + (h + 1) * dh];
                *l = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale + bias[i * k + jj];
            }
            neighborhood_softmax(row);
        }
    }
    a
}

/// Fused `Y_i = Σ_j A_ij g_ij V_j` with `A` from [`attention_weights`].
#[allow(clippy::too_many_arguments)]
pub fn neighborhood_attention<'t>(
    q: Var<'t>,
    k_: Var<'t>,
    v: Var<'t>,
    bias: Var<'t>,
    gate: Var<'t>,
    neighbors: Rc<Vec<usize>>,
    heads: usize,
) -> Result<Var<'t>> {
    let qs = q.shape();
    if qs.len() != 2 || k_.shape() != qs || v.shape() != qs {
        return Err(dim_err(format!(
            "Q, K, V must share a [N x D] shape, got {qs:?}, {:?}, {:?}",
            k_.shape(),
            v.shape()
        )));
    }
    let (n, dim) = (qs[0], qs[1]);
    let k = neighbors.len() / n.max(1);
    if neighbors.len() != n * k || bias.numel() != n * k || gate.numel() != n * k {
        return Err(dim_err(format!(
            "neighborhood tables must be [{n} x k]: indices {}, G {:?}, gate {:?}",
            neighbors.len(),
            bias.shape(),
            gate.shape()
        )));
    }
    if heads == 0 || dim % heads != 0 {
        return Err(contract(format!("{heads} heads do not divide dimension {dim}")));
    }
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qv, kv, vv, gv) = (q.value(), k_.value(), v.value(), gate.value());
    let att = attention_weights(&qv, &kv, &bias.value(), &neighbors, dim, heads, k);
    let mut y = vec![0.0; n * dim];
    for i in 0..n {
        for h in 0..heads {
            for jj in 0..k {
                let j = neighbors[i * k + jj];
                let w = att[(i * heads + h) * k + jj] * gv[i * k + jj];
                for c in h * dh..(h + 1) * dh {
                    y[i * dim + c] += w * vv[j * dim + c];
                }
            }
        }
    }
    Ok(q.push(
        vec![n, dim],
        y,
        &[q, k_, v, bias, gate],
        Box::new(move |gy, _| {
            let mut dq = vec![0.0; n * dim];
            let mut dk = vec![0.0; n * dim];
            let mut dv = vec![0.0; n * dim];
            let mut dbias = vec![0.0; n * k];
            let mut dgate = vec![0.0; n * k];
            let mut da = vec![0.0; k];
            for i in 0..n {
                let gyi = &gy[i * dim..(i + 1) * dim];
                for h in 0..heads {
                    let a = &att[(i * heads + h) * k..(i * heads + h + 1) * k];
                    let mut dot = 0.0;
                    for jj in 0..k {
                        let j = neighbors[i * k + jj];
                        let g = gv[i * k + jj];
                        let mut dw = 0.0;
                        for c in h * dh..(h + 1) * dh {
                            dw += gyi[c] * vv[j * dim + c];
                            dv[j * dim + c] += a[jj] * g * gyi[c];
                        }
                        dgate[i * k + jj] += dw * a[jj];
                        da[jj] = dw * g;
                        dot += a[jj] * da[jj];
                    }
                    for jj in 0..k {
                        let j = neighbors[i * k + jj];
                        let dl = a[jj] * (da[jj] - dot);
                        dbias[i * k + jj] += dl;
                        let s = dl * scale;
                        for c in h * dh..(h + 1) * dh {
                            dq[i * dim + c] += s * kv[j * dim + c];
                            dk[j * dim + c] += s * qv[i * dim + c];
                        }
                    }
                }
            }
            vec![Some(dq), Some(dk), Some(dv), Some(dbias), Some(dgate)]
        }),
    ))
}

/// Scalar-valued two-layer perceptron `s = u·gelu(W2·gelu(W1·x + b1) + b2)`.
#[derive(Clone, Debug)]
pub struct GeoMlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub head: Linear,
}

impl GeoMlp {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        width: usize,
    ) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), input, width, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), width, width, true),
            head: Linear::new(store, rng, &format!("{name}.proj"), width, 1, false),
        }
    }

    /// `x: [M × input]` → `[M]`.
    fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward_rows(p, x)?.gelu();
        let f = self.fc2.forward_rows(p, h)?.gelu();
        let s = self.head.forward_rows(p, f)?;
        Ok(s.reshape(&[s.numel()]))
    }

    fn numel(&self) -> usize {
        self.fc1.numel() + self.fc2.numel() + self.head.numel()
    }

    fn macs_per_row(&self) -> u64 {
        (self.fc1.in_dim * self.fc1.out_dim + self.fc2.in_dim * self.fc2.out_dim + self.head.in_dim)
            as u64
    }
}

/// Geometry cache keyed by grid size; a new block starts empty.
#[derive(Debug, Default)]
struct GeometryCache(Mutex<HashMap<(usize, usize), Arc<TwlaGeometry>>>);

impl Clone for GeometryCache {
    fn clone(&self) -> Self {
        Self::default()
    }
}

#[derive(Clone, Debug)]
pub struct TwlaBlock {
    pub config: TwlaConfig,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    /// φ with its scalar projection `u`.
    pub edge: GeoMlp,
    /// ψ with its scalar projection `v`.
    pub triangle: GeoMlp,
    cache: GeometryCache,
}

impl TwlaBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        config: TwlaConfig,
    ) -> Result<Self> {
        let d = config.dim;
        if config.heads == 0 || !d.is_multiple_of(config.heads) {
            return Err(contract(format!("{} heads do not divide dimension {d}", config.heads)));
        }
        Ok(Self {
            config,
            q: Linear::new(store, rng, &format!("{name}.q"), d, d, false),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d, false),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d, false),
            edge: GeoMlp::new(store, rng, &format!("{name}.phi"), 2, config.geo_dim),
            triangle: GeoMlp::new(store, rng, &format!("{name}.psi"), 5, config.geo_dim),
            cache: GeometryCache::default(),
        })
    }

    /// Geometry for an `h × w` grid, built on first use.
    pub fn geometry(&self, h: usize, w: usize) -> Result<Arc<TwlaGeometry>> {
        let mut cache = self.cache.0.lock().expect("geometry cache poisoned");
        if let Some(g) = cache.get(&(h, w)) {
            return Ok(g.clone());
        }
        let windows = build_triangle_windows(h, w, self.config.window, self.config.neighbors)?;
        let g = Arc::new(TwlaGeometry::from_windows(&windows)?);
        cache.insert((h, w), g.clone());
        Ok(g)
    }

    /// `G_ij` as `[N × k]`.
    pub fn pair_bias<'t>(&self, p: &Bound<'t>, geo: &TwlaGeometry) -> Result<Var<'t>> {
        let tape = p.get(self.q.weight).tape();
        let feats = tape.constant_from(&[geo.distinct_pairs(), 2], geo.pair_features.clone());
        let s = self.edge.forward(p, feats)?;
        Ok(s.gather(Rc::new(geo.pair_index.clone()), &[geo.pixels, geo.k]))
    }

    /// `G_ijk` as `[N·k × k]`, each row summing to 1.
    pub fn triple_weights<'t>(&self, p: &Bound<'t>, geo: &TwlaGeometry) -> Result<Var<'t>> {
        let tape = p.get(self.q.weight).tape();
        let feats = tape.constant_from(&[geo.distinct_triples(), 5], geo.triple_features.clone());
        let s = self.triangle.forward(p, feats)?;
        Ok(s.gather(Rc::new(geo.triple_index.clone()), &[geo.pixels * geo.k, geo.k])
            .softmax(1))
    }

    /// `x: [N × D]` → `[N × D]` over explicit windows.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        windows: &[TriangleWindow],
    ) -> Result<Var<'t>> {
        let geo = TwlaGeometry::from_windows(windows)?;
        self.forward_geometry(p, x, &geo)
    }

    pub fn forward_geometry<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        geo: &TwlaGeometry,
    ) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape != [geo.pixels, self.config.dim] {
            return Err(dim_err(format!(
                "TWLA expects [{} x {}] input, got {shape:?}",
                geo.pixels, self.config.dim
            )));
        }
        let q = self.q.forward_rows(p, x)?;
        let k = self.k.forward_rows(p, x)?;
        let v = self.v.forward_rows(p, x)?;
        let bias = self.pair_bias(p, geo)?;
        let gate = self
            .triple_weights(p, geo)?
            .row_mean()
            .scale(geo.k as f64)
            .reshape(&[geo.pixels, geo.k]);
        neighborhood_attention(q, k, v, bias, gate, Rc::new(geo.neighbors.clone()), self.config.heads)
    }

    /// Channel-major convenience form: `x: [D × H × W]` → `[D × H × W]`.
    pub fn forward_map<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[0] != self.config.dim {
            return Err(dim_err(format!(
                "TWLA expects a [{} x H x W] map, got {shape:?}",
                self.config.dim
            )));
        }
        let (d, h, w) = (shape[0], shape[1], shape[2]);
        let geo = self.geometry(h, w)?;
        let rows = x.reshape(&[d, h * w]).transpose();
        Ok(self.forward_geometry(p, rows, &geo)?.transpose().reshape(&shape))
    }

    /// Attention weights `[N × heads × k]` at the current parameters.
    pub fn attention(&self, p: &Bound<'_>, x: Var<'_>, geo: &TwlaGeometry) -> Result<Vec<f64>> {
        let q = self.q.forward_rows(p, x)?;
        let k = self.k.forward_rows(p, x)?;
        let bias = self.pair_bias(p, geo)?;
        Ok(attention_weights(
            &q.value(),
            &k.value(),
            &bias.value(),
            &geo.neighbors,
            self.config.dim,
            self.config.heads,
            geo.k,
        ))
    }

    pub fn numel(&self) -> usize {
        self.q.numel() + self.k.numel() + self.v.numel() + self.edge.numel() + self.triangle.numel()
    }

    /// Multiply-accumulates for an `h × w` map, with the geometric terms
    /// counted per pixel as in a direct evaluation.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (d, k) = (self.config.dim as u64, self.config.neighbors as u64);
        let per_pixel = 3 * d * d
            + 2 * k * d
            + k * self.edge.macs_per_row()
            + k * k * self.triangle.macs_per_row();
        per_pixel * (h * w) as u64
    }
}
