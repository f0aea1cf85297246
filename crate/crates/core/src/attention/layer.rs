use rand_chacha::ChaCha8Rng;

use super::{CgaBlock, TwlaBlock, TwlaConfig};
use crate::autodiff::Var;
use crate::error::Result;
use crate::nn::{Bound, ChannelNorm, FeedForward, ParamStore};

/// Which attention sublayers a [`TransformerLayer`] keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerParts {
    pub twla: bool,
    pub cga: bool,
}

impl Default for LayerParts {
    fn default() -> Self {
        Self { twla: true, cga: true }
    }
}

/// One pre-norm residual sublayer.
#[derive(Clone, Debug)]
struct Residual<B> {
    norm: ChannelNorm,
    block: B,
}

/// `x + TWLA(LN x)`, `+ FFN(LN ·)`, `+ CGA(LN ·)`, `+ FFN(LN ·)`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    twla: Option<Residual<TwlaBlock>>,
    ffn1: Residual<FeedForward>,
    cga: Option<Residual<CgaBlock>>,
    ffn2: Residual<FeedForward>,
    pub channels: usize,
}

impl TransformerLayer {
    pub const FFN_RATIO: usize = 2;

    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        config: TwlaConfig,
        parts: LayerParts,
    ) -> Result<Self> {
        let c = config.dim;
        let twla = if parts.twla {
            Some(Residual {
                norm: ChannelNorm::new(store, &format!("{name}.norm1"), c),
                block: TwlaBlock::new(store, rng, &format!("{name}.twla"), config)?,
            })
        } else {
            None
        };
        let ffn1 = Residual {
            norm: ChannelNorm::new(store, &format!("{name}.norm2"), c),
            block: FeedForward::new(store, rng, &format!("{name}.ffn1"), c, Self::FFN_RATIO),
        };
        let cga = parts.cga.then(|| Residual {
            norm: ChannelNorm::new(store, &format!("{name}.norm3"), c),
            block: CgaBlock::new(store, rng, &format!("{name}.cga"), c),
        });
        let ffn2 = Residual {
            norm: ChannelNorm::new(store, &format!("{name}.norm4"), c),
            block: FeedForward::new(store, rng, &format!("{name}.ffn2"), c, Self::FFN_RATIO),
        };
        Ok(Self {
            twla,
            ffn1,
            cga,
            ffn2,
            channels: c,
        })
    }

    pub fn twla(&self) -> Option<&TwlaBlock> {
        self.twla.as_ref().map(|r| &r.block)
    }

    pub fn cga(&self) -> Option<&CgaBlock> {
        self.cga.as_ref().map(|r| &r.block)
    }

    pub fn ffns(&self) -> [&FeedForward; 2] {
        [&self.ffn1.block, &self.ffn2.block]
    }

    /// `x: [C × H × W]` → `[C × H × W]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let mut x = x;
        if let Some(r) = &self.twla {
            x = x + r.block.forward_map(p, r.norm.forward(p, x))?;
        }
        x = x + self.ffn1.block.forward(p, self.ffn1.norm.forward(p, x))?;
        if let Some(r) = &self.cga {
            x = x + r.block.forward(p, r.norm.forward(p, x))?;
        }
        x = x + self.ffn2.block.forward(p, self.ffn2.norm.forward(p, x))?;
        Ok(x)
    }

    pub fn numel(&self) -> usize {
        let norm = 2 * self.channels;
        let ffn = self.ffn1.block.numel() + self.ffn2.block.numel() + 2 * norm;
        ffn + self.twla.as_ref().map_or(0, |r| r.block.numel() + norm)
            + self.cga.as_ref().map_or(0, |r| r.block.numel() + norm)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let hw = (h * w) as u64;
        let c = self.channels as u64;
        let ffn = 2 * 2 * c * c * Self::FFN_RATIO as u64 * hw;
        ffn + self.twla.as_ref().map_or(0, |r| r.block.macs(h, w))
            + self.cga.as_ref().map_or(0, |r| r.block.macs(h, w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradients, Tape};
    use crate::nn::uniform;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn layer(c: usize, parts: LayerParts, seed: u64) -> (ParamStore, TransformerLayer) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = TwlaConfig {
            dim: c,
            window: 4,
            neighbors: 3,
            geo_dim: 4,
            heads: 1,
        };
        let l = TransformerLayer::new(&mut store, &mut rng, "layer", cfg, parts).unwrap();
        (store, l)
    }

    #[test]
    fn zeroed_outputs_give_identity() {
        let (mut store, l) = layer(4, LayerParts::default(), 0);
        let twla_v = l.twla().unwrap().v.weight;
        let cga_v = l.cga().unwrap().v.weight;
        *store.get_mut(twla_v) = Tensor::zeros(&[4, 4]);
        *store.get_mut(cga_v) = Tensor::zeros(&[4, 4]);
        for f in l.ffns() {
            *store.get_mut(f.fc2.weight) = Tensor::zeros(&[4, 8]);
            *store.get_mut(f.fc2.bias.unwrap()) = Tensor::zeros(&[4]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = uniform(&mut rng, &[4, 8, 8], 1.0);
        let tape = Tape::new();
        let p = Bound::frozen(&tape, &store);
        let y = l.forward(&p, tape.constant(&x)).unwrap();
        assert_eq!(y.to_tensor().max_abs_diff(&x), 0.0);
    }

    #[test]
    fn shape_is_preserved() {
        let (store, l) = layer(8, LayerParts::default(), 2);
        let tape = Tape::new();
        let p = Bound::frozen(&tape, &store);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = l.forward(&p, tape.constant(&uniform(&mut rng, &[8, 12, 12], 1.0))).unwrap();
        assert_eq!(y.shape(), vec![8, 12, 12]);
    }

    #[test]
    fn input_gradient() {
        let (mut store, l) = layer(2, LayerParts::default(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for t in store.tensors_mut() {
            let shape = t.shape().to_vec();
            *t = uniform(&mut rng, &shape, 0.5);
        }
        let x0 = uniform(&mut rng, &[2, 4, 4], 1.0);
        let r = check_gradients(
            |t, x| {
                let p = Bound::frozen(t, &store);
                l.forward(&p, x).unwrap().sin().sum()
            },
            &x0,
            1e-6,
        )
        .unwrap();
        assert!(r < 1e-4, "{}", r);
    }

    #[test]
    fn parameter_count_matches_store() {
        for parts in [
            LayerParts::default(),
            LayerParts { twla: false, cga: true },
            LayerParts { twla: true, cga: false },
        ] {
            let (store, l) = layer(6, parts, 6);
            assert_eq!(l.numel(), store.numel());
        }
    }
}
