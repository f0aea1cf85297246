//! Channel global attention.
//!
//! The spatial mean `z ∈ R^C` is projected to `Q, K, V`, a `C × C` channel
//! attention matrix `A = softmax(Q·Kᵀ / √C)` mixes `V`, and the result
//! rescales every pixel of the input channel-wise.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::{dim_err, Result};
use crate::nn::{Bound, Linear, ParamStore};

#[derive(Clone, Debug)]
pub struct CgaBlock {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub channels: usize,
}

impl CgaBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Self {
        let lin = |store: &mut ParamStore, rng: &mut ChaCha8Rng, s: &str| {
            Linear::new(store, rng, &format!("{name}.{s}"), channels, channels, false)
        };
        Self {
            q: lin(store, rng, "q"),
            k: lin(store, rng, "k"),
            v: lin(store, rng, "v"),
            channels,
        }
    }

    fn check<'t>(&self, x: Var<'t>) -> Result<(Vec<usize>, Var<'t>)> {
        let shape = x.shape();
        if shape.len() < 2 || shape[0] != self.channels {
            return Err(dim_err(format!(
                "CGA expects a [{} x ...] map, got {shape:?}",
                self.channels
            )));
        }
        let flat = x.reshape(&[self.channels, x.numel() / self.channels]);
        Ok((shape, flat))
    }

    /// Channel attention matrix `A: [C × C]` and value column `V: [C × 1]`.
    fn attend<'t>(&self, p: &Bound<'t>, flat: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let c = self.channels;
        let z = flat.row_mean().reshape(&[c, 1]);
        let q = self.q.forward_channels(p, z)?;
        let k = self.k.forward_channels(p, z)?;
        let v = self.v.forward_channels(p, z)?;
        let a = q
            .matmul(k.transpose())?
            .scale(1.0 / (c as f64).sqrt())
            .softmax(1);
        Ok((a, v))
    }

    pub fn attention<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let (_, flat) = self.check(x)?;
        Ok(self.attend(p, flat)?.0)
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let (shape, flat) = self.check(x)?;
        let (a, v) = self.attend(p, flat)?;
        let z_out = a.matmul(v)?;
        Ok(flat.mul_rows(z_out).reshape(&shape))
    }

    pub fn numel(&self) -> usize {
        3 * self.channels * self.channels
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let c = self.channels as u64;
        5 * c * c + 2 * c * (h * w) as u64
    }
}
