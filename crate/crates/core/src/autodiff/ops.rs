//! Differentiable primitives on [`Var`].
//!
//! All reductions run sequentially in ascending index order so results are
//! bit-reproducible.

use std::ops::{Add, Mul, Neg, Sub};
use std::rc::Rc;

use super::Var;
use crate::error::{dim_err, Result};

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[m×k] = a[m×n] · b[k×n]ᵀ`
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            c[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `c[k×n] = a[m×k]ᵀ · b[m×n]`
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl<'t> Var<'t> {
    fn assert_same_shape(&self, other: &Var<'t>, op: &str) {
        let (a, b) = (self.shape(), other.shape());
        assert_eq!(a, b, "{op}: shape mismatch {a:?} vs {b:?}");
    }

    fn zip_with(
        self,
        other: Var<'t>,
        f: impl Fn(f64, f64) -> f64,
        backward: super::BackwardFn,
    ) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let out = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
        self.push(self.shape(), out, &[self, other], backward)
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.assert_same_shape(&other, "add");
        self.zip_with(
            other,
            |x, y| x + y,
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
        )
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.assert_same_shape(&other, "sub");
        self.zip_with(
            other,
            |x, y| x - y,
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
        )
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.assert_same_shape(&other, "mul");
        let (a, b) = (self.value(), other.value());
        self.zip_with(
            other,
            |x, y| x * y,
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.iter().zip(b.iter()).map(|(g, y)| g * y).collect()),
                    needs[1].then(|| g.iter().zip(a.iter()).map(|(g, x)| g * x).collect()),
                ]
            }),
        )
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.value().iter().map(|v| v * c).collect();
        self.push(
            self.shape(),
            out,
            &[self],
            Box::new(move |g, _| vec![Some(g.iter().map(|v| v * c).collect())]),
        )
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let out = self.value().iter().map(|v| v + c).collect();
        self.push(self.shape(), out, &[self], Box::new(|g, _| vec![Some(g.to_vec())]))
    }

    /// Elementwise map with derivative `df(x, y)` expressed in terms of the
    /// input `x` and output `y`.
    pub fn map(self, f: fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var<'t> {
        let x = self.value();
        let y: Rc<Vec<f64>> = Rc::new(x.iter().map(|&v| f(v)).collect());
        let y_keep = y.clone();
        self.push(
            self.shape(),
            y.to_vec(),
            &[self],
            Box::new(move |g, _| {
                vec![Some(
                    g.iter()
                        .zip(x.iter().zip(y_keep.iter()))
                        .map(|(g, (&x, &y))| g * df(x, y))
                        .collect(),
                )]
            }),
        )
    }

    pub fn exp(self) -> Var<'t> {
        self.map(f64::exp, |_, y| y)
    }

    pub fn sin(self) -> Var<'t> {
        self.map(f64::sin, |x, _| x.cos())
    }

    pub fn tanh(self) -> Var<'t> {
        self.map(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn abs(self) -> Var<'t> {
        self.map(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.map(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(self) -> Var<'t> {
        self.map(softplus, |x, _| sigmoid(x))
    }

    /// `x · sigmoid(x)`
    pub fn silu(self) -> Var<'t> {
        self.map(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'t> {
        self.map(gelu, |x, _| gelu_grad(x))
    }

    pub fn sum(self) -> Var<'t> {
        let n = self.numel();
        let s = self.value().iter().sum();
        self.push(vec![1], vec![s], &[self], Box::new(move |g, _| vec![Some(vec![g[0]; n])]))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.numel();
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(),
            "reshape {:?} -> {shape:?}",
            self.shape()
        );
        self.push(
            shape.to_vec(),
            self.value().to_vec(),
            &[self],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        )
    }

    /// Matrix product of two rank-2 values.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (a, b) = (self.value(), other.value());
        let out = matmul_raw(&a, &b, m, k, n);
        Ok(self.push(
            vec![m, n],
            out,
            &[self, other],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| matmul_nt(g, &b, m, n, k)),
                    needs[1].then(|| matmul_tn(&a, g, m, k, n)),
                ]
            }),
        ))
    }

    /// Transpose of a rank-2 value.
    pub fn transpose(self) -> Var<'t> {
        let s = self.shape();
        assert_eq!(s.len(), 2, "transpose needs rank 2, got {s:?}");
        let (r, c) = (s[0], s[1]);
        let out = transpose_raw(&self.value(), r, c);
        self.push(
            vec![c, r],
            out,
            &[self],
            Box::new(move |g, _| vec![Some(transpose_raw(g, c, r))]),
        )
    }

    /// `out[i] = x[indices[i]]`, reshaped to `shape`. Indices may repeat.
    pub fn gather(self, indices: Rc<Vec<usize>>, shape: &[usize]) -> Var<'t> {
        assert_eq!(shape.iter().product::<usize>(), indices.len());
        let x = self.value();
        let n = x.len();
        let out = indices.iter().map(|&i| x[i]).collect();
        self.push(
            shape.to_vec(),
            out,
            &[self],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; n];
                for (&i, &gv) in indices.iter().zip(g) {
                    dx[i] += gv;
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(self, start: usize, end: usize) -> Var<'t> {
        let mut shape = self.shape();
        assert!(start < end && end <= shape[0], "slice_rows {start}..{end} of {shape:?}");
        let inner: usize = shape[1..].iter().product();
        let total = self.numel();
        shape[0] = end - start;
        let out = self.value()[start * inner..end * inner].to_vec();
        self.push(
            shape,
            out,
            &[self],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; total];
                dx[start * inner..end * inner].copy_from_slice(g);
                vec![Some(dx)]
            }),
        )
    }

    /// Concatenation along axis 0.
    pub fn concat_rows(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let first = parts[0].shape();
        let mut rows = 0;
        let mut out = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            assert_eq!(s[1..], first[1..], "concat_rows: trailing shapes differ");
            rows += s[0];
            let v = p.value();
            sizes.push(v.len());
            out.extend_from_slice(&v);
        }
        let mut shape = first;
        shape[0] = rows;
        parts[0].push(
            shape,
            out,
            parts,
            Box::new(move |g, needs| {
                let mut off = 0;
                sizes
                    .iter()
                    .zip(needs)
                    .map(|(&n, &need)| {
                        let slice = need.then(|| g[off..off + n].to_vec());
                        off += n;
                        slice
                    })
                    .collect()
            }),
        )
    }

    /// Adds `b[r]` to every element of row `r`, viewing self as `[R × rest]`.
    pub fn bias_rows(self, b: Var<'t>) -> Var<'t> {
        let shape = self.shape();
        let rows = shape[0];
        assert_eq!(b.numel(), rows, "bias_rows: {} biases for {shape:?}", b.numel());
        let inner = self.numel() / rows;
        let bv = b.value();
        let mut out = self.value().to_vec();
        for (r, chunk) in out.chunks_mut(inner).enumerate() {
            chunk.iter_mut().for_each(|v| *v += bv[r]);
        }
        self.push(
            shape,
            out,
            &[self, b],
            Box::new(move |g, needs| {
                vec![
                    Some(g.to_vec()),
                    needs[1].then(|| g.chunks(inner).map(|c| c.iter().sum()).collect()),
                ]
            }),
        )
    }

    /// Multiplies every element of row `r` by `s[r]`, viewing self as `[R × rest]`.
    pub fn mul_rows(self, s: Var<'t>) -> Var<'t> {
        let shape = self.shape();
        let rows = shape[0];
        assert_eq!(s.numel(), rows, "mul_rows: {} scales for {shape:?}", s.numel());
        let inner = self.numel() / rows;
        let (xv, sv) = (self.value(), s.value());
        let out = xv
            .chunks(inner)
            .zip(sv.iter())
            .flat_map(|(c, &k)| c.iter().map(move |v| v * k))
            .collect();
        self.push(
            shape,
            out,
            &[self, s],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| {
                        g.chunks(inner)
                            .zip(sv.iter())
                            .flat_map(|(c, &k)| c.iter().map(move |v| v * k))
                            .collect()
                    }),
                    needs[1].then(|| {
                        g.chunks(inner)
                            .zip(xv.chunks(inner))
                            .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                            .collect()
                    }),
                ]
            }),
        )
    }

    /// Mean of each row, viewing self as `[R × rest]`; result has shape `[R]`.
    pub fn row_mean(self) -> Var<'t> {
        let rows = self.shape()[0];
        let inner = self.numel() / rows;
        let scale = 1.0 / inner as f64;
        let out = self
            .value()
            .chunks(inner)
            .map(|c| c.iter().sum::<f64>() * scale)
            .collect();
        self.push(
            vec![rows],
            out,
            &[self],
            Box::new(move |g, _| {
                vec![Some(
                    g.iter()
                        .flat_map(|&gv| std::iter::repeat_n(gv * scale, inner))
                        .collect(),
                )]
            }),
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Var<'t> {
        let shape = self.shape();
        assert!(axis < shape.len(), "softmax axis {axis} for shape {shape:?}");
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let x = self.value();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for a in 0..len {
                    mx = mx.max(x[base + a * inner]);
                }
                let mut z = 0.0;
                for a in 0..len {
                    let e = (x[base + a * inner] - mx).exp();
                    y[base + a * inner] = e;
                    z += e;
                }
                for a in 0..len {
                    y[base + a * inner] /= z;
                }
            }
        }
        let yk = Rc::new(y.clone());
        self.push(
            shape,
            y,
            &[self],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0;
                        for a in 0..len {
                            dot += g[base + a * inner] * yk[base + a * inner];
                        }
                        for a in 0..len {
                            let k = base + a * inner;
                            dx[k] = yk[k] * (g[k] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Layer normalization across axis 0 of a `[C × M]` value: every column is
    /// normalized over its `C` entries, then scaled by `gamma[c]` and shifted
    /// by `beta[c]`.
    pub fn channel_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Var<'t> {
        let shape = self.shape();
        let c = shape[0];
        let m = self.numel() / c;
        assert_eq!(gamma.numel(), c);
        assert_eq!(beta.numel(), c);
        let x = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; x.len()];
        for j in 0..m {
            let mut mu = 0.0;
            for ch in 0..c {
                mu += x[ch * m + j];
            }
            mu /= c as f64;
            let mut var = 0.0;
            for ch in 0..c {
                let d = x[ch * m + j] - mu;
                var += d * d;
            }
            var /= c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[j] = is;
            for ch in 0..c {
                let k = ch * m + j;
                xhat[k] = (x[k] - mu) * is;
                out[k] = xhat[k] * gv[ch] + bv[ch];
            }
        }
        self.push(
            shape,
            out,
            &[self, gamma, beta],
            Box::new(move |g, needs| {
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; g.len()];
                    let cf = c as f64;
                    for j in 0..m {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for ch in 0..c {
                            let k = ch * m + j;
                            let d = g[k] * gv[ch];
                            mean_d += d;
                            mean_dx += d * xhat[k];
                        }
                        mean_d /= cf;
                        mean_dx /= cf;
                        for ch in 0..c {
                            let k = ch * m + j;
                            let d = g[k] * gv[ch];
                            dx[k] = inv_std[j] * (d - mean_d - xhat[k] * mean_dx);
                        }
                    }
                    dx
                });
                let dgamma = needs[1].then(|| {
                    (0..c)
                        .map(|ch| (0..m).map(|j| g[ch * m + j] * xhat[ch * m + j]).sum())
                        .collect()
                });
                let dbeta = needs[2]
                    .then(|| (0..c).map(|ch| g[ch * m..(ch + 1) * m].iter().sum()).collect());
                vec![dx, dgamma, dbeta]
            }),
        )
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        Var::add(self, rhs)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        Var::sub(self, rhs)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        Var::mul(self, rhs)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}
