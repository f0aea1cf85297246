//! Separable bicubic resampling (`a = −0.5`), anti-aliased when shrinking.
//!
//! Tap placement and boundary handling follow MATLAB's `imresize`: output
//! sample `x` maps to input coordinate `u = x/s + ½(1 − 1/s)` (1-based), the
//! kernel is stretched by `1/s` when `s < 1`, and out-of-range taps mirror
//! symmetrically.

use crate::autodiff::Var;
use crate::error::{contract, Result};

/// Catmull-Rom style cubic with `a = −0.5`.
pub fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let t = x.abs();
    if t <= 1.0 {
        (a + 2.0) * t.powi(3) - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t.powi(3) - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Interpolation weights for one axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Resample1d {
    pub in_len: usize,
    pub out_len: usize,
    /// `(input index, weight)` per output sample; weights sum to 1.
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl Resample1d {
    pub fn bicubic(in_len: usize, out_len: usize) -> Self {
        assert!(in_len > 0 && out_len > 0);
        let scale = out_len as f64 / in_len as f64;
        let (width, stretch) = if scale < 1.0 { (4.0 / scale, scale) } else { (4.0, 1.0) };
        let p = width.ceil() as i64 + 2;
        let mirror = |i: i64| -> usize {
            // 1-based symmetric reflection with period 2n.
            let n = in_len as i64;
            let m = (i - 1).rem_euclid(2 * n);
            (if m < n { m } else { 2 * n - 1 - m }) as usize
        };
        let taps = (1..=out_len)
            .map(|x| {
                let u = x as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
                let left = (u - width / 2.0).floor() as i64;
                let raw: Vec<(i64, f64)> = (0..p)
                    .map(|j| {
                        let idx = left + j;
                        (idx, stretch * cubic(stretch * (u - idx as f64)))
                    })
                    .collect();
                let total: f64 = raw.iter().map(|t| t.1).sum();
                let mut merged: Vec<(usize, f64)> = Vec::new();
                for (idx, w) in raw {
                    if w == 0.0 {
                        continue;
                    }
                    let i = mirror(idx);
                    match merged.iter_mut().find(|t| t.0 == i) {
                        Some(t) => t.1 += w / total,
                        None => merged.push((i, w / total)),
                    }
                }
                merged
            })
            .collect();
        Self {
            in_len,
            out_len,
            taps,
        }
    }

    /// Applies the map along one axis of a `[outer × len × inner]` array.
    fn apply(&self, x: &[f64], outer: usize, inner: usize) -> Vec<f64> {
        let mut y = vec![0.0; outer * self.out_len * inner];
        for o in 0..outer {
            for (t, taps) in self.taps.iter().enumerate() {
                let dst = &mut y[(o * self.out_len + t) * inner..(o * self.out_len + t + 1) * inner];
                for &(i, w) in taps {
                    let src = &x[(o * self.in_len + i) * inner..(o * self.in_len + i + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }
        y
    }

    /// Adjoint of [`apply`](Self::apply).
    fn apply_transpose(&self, g: &[f64], outer: usize, inner: usize) -> Vec<f64> {
        let mut x = vec![0.0; outer * self.in_len * inner];
        for o in 0..outer {
            for (t, taps) in self.taps.iter().enumerate() {
                let src = &g[(o * self.out_len + t) * inner..(o * self.out_len + t + 1) * inner];
                for &(i, w) in taps {
                    let dst = &mut x[(o * self.in_len + i) * inner..(o * self.in_len + i + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }
        x
    }
}

/// Separable resize of a `[C × H × W]` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Resize2d {
    pub rows: Resample1d,
    pub cols: Resample1d,
}

impl Resize2d {
    pub fn bicubic(h: usize, w: usize, out_h: usize, out_w: usize) -> Self {
        Self {
            rows: Resample1d::bicubic(h, out_h),
            cols: Resample1d::bicubic(w, out_w),
        }
    }

    pub fn apply(&self, x: &[f64], channels: usize) -> Vec<f64> {
        let (h, w) = (self.rows.in_len, self.cols.in_len);
        debug_assert_eq!(x.len(), channels * h * w);
        let t = self.cols.apply(x, channels * h, 1);
        self.rows.apply(&t, channels, self.cols.out_len)
    }

    fn apply_transpose(&self, g: &[f64], channels: usize) -> Vec<f64> {
        let t = self.rows.apply_transpose(g, channels, self.cols.out_len);
        self.cols.apply_transpose(&t, channels * self.rows.in_len, 1)
    }
}

/// Bicubic rescale of `[C × H × W]` by an integer factor (`up = true`
/// enlarges, otherwise shrinks and requires divisibility).
pub fn rescale_dims(h: usize, w: usize, factor: usize, up: bool) -> Result<(usize, usize)> {
    if factor == 0 {
        return Err(contract("scale factor must be positive"));
    }
    if up {
        Ok((h * factor, w * factor))
    } else if !h.is_multiple_of(factor) || !w.is_multiple_of(factor) {
        Err(contract(format!(
            "{h}x{w} image is not divisible by scale {factor}; crop to a multiple of {factor}"
        )))
    } else {
        Ok((h / factor, w / factor))
    }
}

impl<'t> Var<'t> {
    /// Differentiable separable resize of a `[C × H × W]` map.
    pub fn resize(self, op: &Resize2d) -> Var<'t> {
        let shape = self.shape();
        assert_eq!(
            &shape[1..],
            &[op.rows.in_len, op.cols.in_len],
            "resize: input {shape:?} does not match operator"
        );
        let c = shape[0];
        let y = op.apply(&self.value(), c);
        let op = op.clone();
        self.push(
            vec![c, op.rows.out_len, op.cols.out_len],
            y,
            &[self],
            Box::new(move |g, _| vec![Some(op.apply_transpose(g, c))]),
        )
    }
}
