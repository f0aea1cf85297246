//! Parameter storage and the small set of layers shared by every block.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }
}

/// Parameters of a [`ParamStore`] recorded on a tape for one pass.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Binds every parameter as a trainable leaf.
    pub fn trainable(tape: &'t Tape, store: &ParamStore) -> Self {
        Self {
            vars: store.tensors.iter().map(|t| tape.leaf(t)).collect(),
        }
    }

    /// Binds every parameter as a constant (inference: no backward closures).
    pub fn frozen(tape: &'t Tape, store: &ParamStore) -> Self {
        Self {
            vars: store.tensors.iter().map(|t| tape.constant(t)).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Replaces the binding of one parameter, e.g. to differentiate with
    /// respect to it in isolation.
    pub fn set(&mut self, id: ParamId, v: Var<'t>) {
        self.vars[id.0] = v;
    }

    /// Gradients for every parameter after `tape.backward`, in store order.
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.vars.iter().map(|&v| tape.grad_or_zeros(v)).collect()
    }
}

/// Normal samples with standard deviation `std`, redrawn outside ±2·std.
pub fn trunc_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std is finite and positive");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

/// Uniform samples in `[-bound, bound]`.
pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}

/// Fully connected map `out = W·x + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            trunc_normal(rng, &[out_dim, in_dim], 0.02),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Applies the map to every column of `x: [in × M]`, giving `[out × M]`.
    /// Any trailing spatial shape of `x` is preserved.
    pub fn forward_channels<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let m = x.numel() / shape[0];
        let y = p.get(self.weight).matmul(x.reshape(&[shape[0], m]))?;
        let y = match self.bias {
            Some(b) => y.bias_rows(p.get(b)),
            None => y,
        };
        let mut out_shape = shape;
        out_shape[0] = self.out_dim;
        Ok(y.reshape(&out_shape))
    }

    /// Applies the map to every row of `x: [M × in]`, giving `[M × out]`.
    pub fn forward_rows<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(p.get(self.weight).transpose())?;
        Ok(match self.bias {
            Some(b) => y.transpose().bias_rows(p.get(b)).transpose(),
            None => y,
        })
    }

    pub fn numel(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

/// Layer normalization over the channel axis of a `[C × ...]` feature map.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

impl ChannelNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            channels,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let shape = x.shape();
        let m = x.numel() / shape[0];
        x.reshape(&[shape[0], m])
            .channel_norm(p.get(self.gamma), p.get(self.beta), Self::EPS)
            .reshape(&shape)
    }

    pub fn numel(&self) -> usize {
        2 * self.channels
    }
}

/// Same-padded square convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    ) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        let fan_in = (in_ch * kernel * kernel) as f64;
        let weight = store.add(
            format!("{name}.weight"),
            uniform(rng, &[out_ch, in_ch, kernel, kernel], 1.0 / fan_in.sqrt()),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x
            .conv2d(p.get(self.weight), self.kernel / 2)?
            .bias_rows(p.get(self.bias)))
    }

    pub fn numel(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + self.out_ch
    }

    /// Multiply-accumulates for one pass over an `h × w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        (self.out_ch * self.in_ch * self.kernel * self.kernel) as u64 * (h * w) as u64
    }
}

/// Position-wise feed-forward sublayer `fc2(gelu(fc1(x)))` on channel-major maps.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        ratio: usize,
    ) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, dim * ratio, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), dim * ratio, dim, true),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward_channels(p, x)?.gelu();
        self.fc2.forward_channels(p, h)
    }

    pub fn numel(&self) -> usize {
        self.fc1.numel() + self.fc2.numel()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn trunc_normal_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = trunc_normal(&mut rng, &[1000], 0.02);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean: f64 = t.data().iter().sum::<f64>() / 1000.0;
        assert!(mean.abs() < 0.003);
    }

    #[test]
    fn linear_row_and_channel_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, &mut rng, "l", 3, 5, true);
        store.get_mut(lin.bias.unwrap()).data_mut()[2] = 0.7;
        let x = uniform(&mut rng, &[3, 4], 1.0);
        let tape = Tape::new();
        let p = Bound::frozen(&tape, &store);
        let a = lin.forward_channels(&p, tape.constant(&x)).unwrap();
        let b = lin
            .forward_rows(&p, tape.constant(&x).transpose())
            .unwrap()
            .transpose();
        assert!(a.to_tensor().max_abs_diff(&b.to_tensor()) < 1e-15);
        assert_eq!(lin.numel(), 20);
    }

    #[test]
    fn conv_param_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, &mut rng, "c", 3, 16, 3);
        assert_eq!(conv.numel(), 448);
        assert_eq!(store.numel(), 448);
        assert_eq!(conv.macs(8, 8), 27_648);
    }
}
