//! 2D convolution primitives (cross-correlation, zero padding, stride 1).

use super::ops::{matmul_nt as mul_nt, matmul_raw, matmul_tn as mul_tn};
use super::Var;
use crate::error::{dim_err, Result};

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(cin: usize, h: usize, w: usize, k: usize, pad: usize) -> Result<Self> {
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(dim_err(format!(
                "kernel {k}x{k} with padding {pad} does not fit a {h}x{w} input"
            )));
        }
        Ok(Self {
            cin,
            h,
            w,
            k,
            pad,
            oh: h + 2 * pad - k + 1,
            ow: w + 2 * pad - k + 1,
        })
    }

    /// Unfolds `x` into `[cin·k·k × oh·ow]` patch columns.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let Geometry { cin, h, w, k, pad, oh, ow } = *self;
        let mut cols = vec![0.0; cin * k * k * oh * ow];
        for c in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = oy + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let src = &x[(c * h + iy - pad) * w..];
                        for ox in 0..ow {
                            let ix = ox + kx;
                            if ix >= pad && ix - pad < w {
                                dst[oy * ow + ox] = src[ix - pad];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let Geometry { cin, h, w, k, pad, oh, ow } = *self;
        let mut x = vec![0.0; cin * h * w];
        for c in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = oy + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let base = (c * h + iy - pad) * w;
                        for ox in 0..ow {
                            let ix = ox + kx;
                            if ix >= pad && ix - pad < w {
                                x[base + ix - pad] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

#[derive(Clone, Copy)]
struct Taps {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Taps {
    /// Calls `f(weight_index, input_index, output_index)` for every tap that
    /// lands inside the unpadded input.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let Taps { c, h, w, k, pad, oh, ow } = *self;
        for ch in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let wi = (ch * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = oy + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let xrow = (ch * h + iy - pad) * w;
                        let orow = (ch * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = ox + kx;
                            if ix < pad || ix - pad >= w {
                                continue;
                            }
                            f(wi, xrow + ix - pad, orow + ox);
                        }
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    /// Cross-correlation of `self: [Cin×H×W]` with `weight: [Cout×Cin×k×k]`.
    pub fn conv2d(self, weight: Var<'t>, padding: usize) -> Result<Var<'t>> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(dim_err(format!(
                "conv2d expects [C,H,W] input and [Cout,Cin,k,k] weight, got {xs:?} and {ws:?}"
            )));
        }
        if xs[0] != ws[1] {
            return Err(dim_err(format!(
                "conv2d channel mismatch: input {xs:?} has {} channels, weight {ws:?} expects {}",
                xs[0], ws[1]
            )));
        }
        let geo = Geometry::new(xs[0], xs[1], xs[2], ws[2], padding)?;
        let cout = ws[0];
        let kk = geo.cin * geo.k * geo.k;
        let npix = geo.oh * geo.ow;
        let cols = geo.im2col(&self.value());
        let wv = weight.value();
        let out = matmul_raw(&wv, &cols, cout, kk, npix);
        let shape = vec![cout, geo.oh, geo.ow];
        Ok(self.push(
            shape,
            out,
            &[self, weight],
            Box::new(move |g, needs| {
                let dx = needs[0].then(|| geo.col2im(&mul_tn(&wv, g, cout, kk, npix)));
                let dw = needs[1].then(|| mul_nt(g, &cols, cout, npix, kk));
                vec![dx, dw]
            }),
        ))
    }

    /// Per-channel cross-correlation of `self: [C×H×W]` with `weight: [C×1×k×k]`.
    pub fn depthwise_conv2d(self, weight: Var<'t>, padding: usize) -> Result<Var<'t>> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != 1 || ws[2] != ws[3] || ws[0] != xs[0] {
            return Err(dim_err(format!(
                "depthwise conv expects [C,H,W] input and [C,1,k,k] weight, got {xs:?} and {ws:?}"
            )));
        }
        let geo = Geometry::new(1, xs[1], xs[2], ws[2], padding)?;
        let c = xs[0];
        let (h, w, k, pad, oh, ow) = (geo.h, geo.w, geo.k, geo.pad, geo.oh, geo.ow);
        let x = self.value();
        let wv = weight.value();
        let mut out = vec![0.0; c * oh * ow];
        let taps = Taps { c, h, w, k, pad, oh, ow };
        taps.for_each(|wi, xi, oi| out[oi] += wv[wi] * x[xi]);
        Ok(self.push(
            vec![c, oh, ow],
            out,
            &[self, weight],
            Box::new(move |g, needs| {
                let mut dx = needs[0].then(|| vec![0.0; x.len()]);
                let mut dw = needs[1].then(|| vec![0.0; wv.len()]);
                taps.for_each(|wi, xi, oi| {
                    if let Some(dx) = dx.as_mut() {
                        dx[xi] += wv[wi] * g[oi];
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[wi] += x[xi] * g[oi];
                    }
                });
                vec![dx, dw]
            }),
        ))
    }
}
