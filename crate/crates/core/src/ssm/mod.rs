//! Linear state-space sequence models.
//!
//! A continuous system `h' = A h + B x`, `y = C h + D x` is discretized with a
//! zero-order hold at step `Δ`:
//!
//! ```text
//! Ā = exp(ΔA)
//! B̄ = (ΔA)⁻¹ (exp(ΔA) − I) ΔB  =  Σ_{j≥0} Δ^{j+1} A^j / (j+1)! · B
//! ```
//!
//! The series form stays regular when `A` is singular. The discrete system can
//! be evaluated either as a recurrence or as a causal convolution with the
//! kernel `(CB̄, CĀB̄, …, CĀ^{L−1}B̄)`; both give the same output.

mod selective;

pub use selective::{selective_scan, SelectiveSsm};

use crate::error::{contract, dim_err, Result};

/// Row-major square matrix helpers for small state sizes.
pub(crate) mod mat {
    pub fn identity(n: usize) -> Vec<f64> {
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            m[i * n + i] = 1.0;
        }
        m
    }

    pub fn mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
        crate::autodiff::matmul_raw(a, b, n, n, n)
    }

    pub fn mul_vec(a: &[f64], v: &[f64], n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (0..n).map(|j| a[i * n + j] * v[j]).sum())
            .collect()
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(a: &[f64], n: usize) -> f64 {
        (0..n)
            .map(|i| a[i * n..(i + 1) * n].iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn norm_fro(a: &[f64]) -> f64 {
        a.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Continuous-time single-input single-output state-space parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    /// `N × N`, row-major.
    pub a: Vec<f64>,
    /// `N × 1`
    pub b: Vec<f64>,
    /// `1 × N`
    pub c: Vec<f64>,
    pub d: f64,
    pub state_size: usize,
}

impl SsmParams {
    pub fn new(a: Vec<f64>, b: Vec<f64>, c: Vec<f64>, d: f64) -> Result<Self> {
        let n = b.len();
        if n == 0 || a.len() != n * n || c.len() != n {
            return Err(dim_err(format!(
                "inconsistent SSM shapes: A has {} entries, B {}, C {}",
                a.len(),
                b.len(),
                c.len()
            )));
        }
        Ok(Self {
            a,
            b,
            c,
            d,
            state_size: n,
        })
    }

    /// Diagonal real initialization: `A_ii = −softplus(log v_i)` with `v_i`
    /// evenly spaced in `[1, N]`, unit `B` and `C`, `D = 1`.
    pub fn diagonal_init(state_size: usize) -> Self {
        let n = state_size;
        let mut a = vec![0.0; n * n];
        for (i, v) in diagonal_log_init(n).into_iter().enumerate() {
            a[i * n + i] = -crate::autodiff::ops::softplus(v);
        }
        Self {
            a,
            b: vec![1.0; n],
            c: vec![1.0; n],
            d: 1.0,
            state_size: n,
        }
    }
}

/// `log v_i` for `v_i` evenly spaced in `[1, n]`.
pub fn diagonal_log_init(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let v = if n == 1 {
                1.0
            } else {
                1.0 + (n - 1) as f64 * i as f64 / (n - 1) as f64
            };
            v.ln()
        })
        .collect()
}

/// Zero-order-hold discretization of an [`SsmParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm {
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
    pub c: Vec<f64>,
    pub d: f64,
    pub delta: f64,
    pub state_size: usize,
}

/// Convolution kernel `k[t] = C Ā^t B̄`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmKernel {
    pub k: Vec<f64>,
}

impl SsmKernel {
    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }
}

/// Norm above which the series is evaluated on a halved argument and
/// recombined by squaring.
const SERIES_NORM_LIMIT: f64 = 4.0;
const SERIES_TOL: f64 = 1e-16;
const SERIES_MAX_TERMS: usize = 200;

/// Returns `(exp(M), φ₁(M))` with `φ₁(M) = Σ_{j≥0} M^j / (j+1)!`.
fn exp_and_phi1(m: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let norm = mat::norm_inf(m, n);
    let mut halvings = 0;
    let mut scale = 1.0;
    while norm * scale > SERIES_NORM_LIMIT {
        halvings += 1;
        scale *= 0.5;
    }
    let ms: Vec<f64> = m.iter().map(|v| v * scale).collect();

    // term_j = M^j / j!; exp accumulates term_j, φ₁ accumulates term_j / (j+1).
    let mut term = mat::identity(n);
    let mut exp = term.clone();
    let mut phi = term.clone();
    for j in 1..SERIES_MAX_TERMS {
        term = mat::mul(&term, &ms, n);
        let inv_j = 1.0 / j as f64;
        term.iter_mut().for_each(|v| *v *= inv_j);
        let inv_j1 = 1.0 / (j + 1) as f64;
        for i in 0..n * n {
            exp[i] += term[i];
            phi[i] += term[i] * inv_j1;
        }
        if mat::norm_fro(&term) < SERIES_TOL {
            break;
        }
    }
    // exp(2X) = exp(X)²,  φ₁(2X) = ½ φ₁(X) (exp(X) + I)
    for _ in 0..halvings {
        let mut e_plus_i = exp.clone();
        for i in 0..n {
            e_plus_i[i * n + i] += 1.0;
        }
        phi = mat::mul(&phi, &e_plus_i, n);
        phi.iter_mut().for_each(|v| *v *= 0.5);
        exp = mat::mul(&exp, &exp, n);
    }
    (exp, phi)
}

/// Zero-order-hold discretization at step `delta ≥ 0`.
pub fn discretize(p: &SsmParams, delta: f64) -> Result<DiscreteSsm> {
    if !delta.is_finite() || delta < 0.0 {
        return Err(contract(format!("discretization step must be finite and ≥ 0, got {delta}")));
    }
    let n = p.state_size;
    let m: Vec<f64> = p.a.iter().map(|v| v * delta).collect();
    let (a_bar, phi) = exp_and_phi1(&m, n);
    let b_bar = mat::mul_vec(&phi, &p.b, n)
        .into_iter()
        .map(|v| v * delta)
        .collect();
    Ok(DiscreteSsm {
        a_bar,
        b_bar,
        c: p.c.clone(),
        d: p.d,
        delta,
        state_size: n,
    })
}

/// Recurrent evaluation from a zero initial state:
/// `h_k = Ā h_{k−1} + B̄ x_k`, `y_k = C h_k + D x_k`.
pub fn scan_recurrent(m: &DiscreteSsm, x: &[f64]) -> Vec<f64> {
    let n = m.state_size;
    let mut h = vec![0.0; n];
    let mut y = Vec::with_capacity(x.len());
    for &xk in x {
        let mut next = mat::mul_vec(&m.a_bar, &h, n);
        for (hn, b) in next.iter_mut().zip(&m.b_bar) {
            *hn += b * xk;
        }
        h = next;
        let out: f64 = m.c.iter().zip(&h).map(|(c, h)| c * h).sum();
        y.push(out + m.d * xk);
    }
    y
}

/// The length-`len` convolution kernel of a discretized system.
pub fn kernel(m: &DiscreteSsm, len: usize) -> SsmKernel {
    let n = m.state_size;
    let mut v = m.b_bar.clone();
    let mut k = Vec::with_capacity(len);
    for t in 0..len {
        if t > 0 {
            v = mat::mul_vec(&m.a_bar, &v, n);
        }
        k.push(m.c.iter().zip(&v).map(|(c, v)| c * v).sum());
    }
    SsmKernel { k }
}

/// Convolutional evaluation: `y_t = Σ_{s=0..t} k[s] x_{t−s} + D x_t`.
pub fn scan_convolutional(m: &DiscreteSsm, x: &[f64]) -> Vec<f64> {
    let k = kernel(m, x.len()).k;
    (0..x.len())
        .map(|t| {
            let conv: f64 = (0..=t).map(|s| k[s] * x[t - s]).sum();
            conv + m.d * x[t]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_ssm(a: f64, b: f64, c: f64, d: f64) -> SsmParams {
        SsmParams::new(vec![a], vec![b], vec![c], d).unwrap()
    }

    fn manual(a_bar: f64, b_bar: f64, c: f64, d: f64) -> DiscreteSsm {
        DiscreteSsm {
            a_bar: vec![a_bar],
            b_bar: vec![b_bar],
            c: vec![c],
            d,
            delta: 1.0,
            state_size: 1,
        }
    }

    #[test]
    fn scalar_zoh_at_ln2() {
        let m = discretize(&scalar_ssm(-1.0, 1.0, 1.0, 0.0), 2f64.ln()).unwrap();
        assert!((m.a_bar[0] - 0.5).abs() < 1e-15);
        assert!((m.b_bar[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_matrix_gives_identity_and_scaled_b() {
        let p = SsmParams::new(vec![0.0; 9], vec![1.0, -2.0, 0.5], vec![1.0; 3], 0.0).unwrap();
        let m = discretize(&p, 0.25).unwrap();
        assert_eq!(m.a_bar, mat::identity(3));
        assert_eq!(m.b_bar, vec![0.25, -0.5, 0.125]);
    }

    #[test]
    fn zero_step_gives_identity_and_zero_b() {
        let p = SsmParams::diagonal_init(4);
        let m = discretize(&p, 0.0).unwrap();
        assert_eq!(m.a_bar, mat::identity(4));
        assert!(m.b_bar.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn negative_step_is_rejected() {
        let p = SsmParams::diagonal_init(2);
        assert!(matches!(discretize(&p, -0.1), Err(crate::Error::Contract(_))));
        assert!(discretize(&p, f64::NAN).is_err());
    }

    #[test]
    fn large_argument_uses_squaring_path() {
        // exp(-20) and (1 - exp(-20))/20·Δ for a scalar system with Δ = 1.
        let m = discretize(&scalar_ssm(-20.0, 1.0, 1.0, 0.0), 1.0).unwrap();
        assert!((m.a_bar[0] - (-20f64).exp()).abs() < 1e-15);
        assert!((m.b_bar[0] - (1.0 - (-20f64).exp()) / 20.0).abs() < 1e-14);
    }

    #[test]
    fn recurrent_examples() {
        let m = manual(0.5, 0.5, 1.0, 0.0);
        assert_eq!(scan_recurrent(&m, &[1.0, 0.0, 0.0]), vec![0.5, 0.25, 0.125]);
        let m = manual(0.0, 0.0, 1.0, 2.0);
        assert_eq!(scan_recurrent(&m, &[3.0, 4.0]), vec![6.0, 8.0]);
        let m = manual(0.9, 0.3, -1.2, 0.4);
        assert!(scan_recurrent(&m, &[0.0; 5]).iter().all(|&v| v == 0.0));
        assert!(scan_recurrent(&m, &[]).is_empty());
    }

    #[test]
    fn kernel_examples() {
        let m = manual(0.5, 0.5, 1.0, 0.0);
        assert_eq!(kernel(&m, 3).k, vec![0.5, 0.25, 0.125]);
        assert!(kernel(&manual(0.5, 0.5, 0.0, 0.0), 4).k.iter().all(|&v| v == 0.0));
        assert_eq!(kernel(&manual(0.7, 0.3, 2.0, 0.0), 1).k, vec![0.6]);
    }

    #[test]
    fn convolutional_examples() {
        let m = manual(0.5, 0.5, 1.0, 0.0);
        assert_eq!(scan_convolutional(&m, &[1.0, 0.0, 0.0]), vec![0.5, 0.25, 0.125]);
        let p = SsmParams::diagonal_init(3);
        let m = discretize(&p, 0.3).unwrap();
        let m = DiscreteSsm { d: 0.0, ..m };
        let mut impulse = vec![0.0; 10];
        impulse[0] = 1.0;
        assert_eq!(scan_convolutional(&m, &impulse), kernel(&m, 10).k);
    }

    #[test]
    fn diagonal_init_is_stable() {
        let p = SsmParams::diagonal_init(16);
        for i in 0..16 {
            assert!(p.a[i * 16 + i] < 0.0);
        }
        let m = discretize(&p, 0.1).unwrap();
        for i in 0..16 {
            let v = m.a_bar[i * 16 + i];
            assert!(v > 0.0 && v < 1.0);
        }
    }

    proptest! {
        #[test]
        fn time_invariant_scan_is_linear(
            xs in proptest::collection::vec(-1.0f64..1.0, 1..40),
            zs_seed in 0u64..1000,
            alpha in -2.0f64..2.0,
            beta in -2.0f64..2.0,
        ) {
            let zs: Vec<f64> = xs.iter().enumerate()
                .map(|(i, _)| ((i as u64 * 2654435761 + zs_seed) % 1000) as f64 / 500.0 - 1.0)
                .collect();
            let m = discretize(&SsmParams::diagonal_init(4), 0.2).unwrap();
            let mix: Vec<f64> = xs.iter().zip(&zs).map(|(x, z)| alpha * x + beta * z).collect();
            let lhs = scan_recurrent(&m, &mix);
            let (sx, sz) = (scan_recurrent(&m, &xs), scan_recurrent(&m, &zs));
            for i in 0..lhs.len() {
                prop_assert!((lhs[i] - (alpha * sx[i] + beta * sz[i])).abs() < 1e-10);
            }
        }

        #[test]
        fn semigroup(d1 in 0.0f64..1.5, d2 in 0.0f64..1.5, seed in 0u64..500) {
            let n = 3;
            let a: Vec<f64> = (0..n * n)
                .map(|i| (((i as u64 + 1) * 7919 + seed * 31) % 200) as f64 / 100.0 - 1.0)
                .collect();
            let p = SsmParams::new(a, vec![1.0; n], vec![1.0; n], 0.0).unwrap();
            let lhs = discretize(&p, d1 + d2).unwrap().a_bar;
            let rhs = mat::mul(
                &discretize(&p, d1).unwrap().a_bar,
                &discretize(&p, d2).unwrap().a_bar,
                n,
            );
            for (l, r) in lhs.iter().zip(&rhs) {
                prop_assert!((l - r).abs() < 1e-9);
            }
        }
    }
}
