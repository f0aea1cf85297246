//! Input-dependent (selective) scan.
//!
//! Every channel `e` of a `[L × E]` sequence owns a diagonal state matrix
//! `A[e, :]` of size `N`. At step `t` the channel is discretized with its own
//! step `Δ[t, e]` and the step's shared `B[t, :]`, `C[t, :]`:
//!
//! ```text
//! Ā = exp(Δ A)            B̄ = (exp(Δ A) − 1) / A · B   (→ Δ B as A → 0)
//! h_t = Ā h_{t−1} + B̄ u_t
//! y_t = C_t · h_t + D u_t
//! ```

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::diagonal_log_init;
use crate::autodiff::ops::softplus;
use crate::autodiff::Var;
use crate::error::{dim_err, Result};
use crate::nn::{Bound, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

/// `(e^z − 1) / z`, continuous at 0.
fn phi1(z: f64) -> f64 {
    if z.abs() < 1e-8 {
        1.0 + 0.5 * z
    } else {
        z.exp_m1() / z
    }
}

/// `d/dz (e^z − 1) / z`.
fn phi1_prime(z: f64) -> f64 {
    if z.abs() < 1e-2 {
        0.5 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z * (1.0 / 30.0 + z / 144.0)))
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// Fused selective scan.
///
/// Shapes: `u`, `delta`: `[L × E]`; `a`: `[E × N]`; `b`, `c`: `[L × N]`;
/// `d`: `[E]`. `delta` must be positive (apply softplus upstream) and `a`
/// should be negative for a contracting recurrence. Returns `[L × E]`.
pub fn selective_scan<'t>(
    u: Var<'t>,
    delta: Var<'t>,
    a: Var<'t>,
    b: Var<'t>,
    c: Var<'t>,
    d: Var<'t>,
) -> Result<Var<'t>> {
    let us = u.shape();
    if us.len() != 2 {
        return Err(dim_err(format!("selective scan input must be [L, E], got {us:?}")));
    }
    let (len, e) = (us[0], us[1]);
    let n = a.shape().last().copied().unwrap_or(0);
    let ok = delta.shape() == us
        && a.shape() == [e, n]
        && b.shape() == [len, n]
        && c.shape() == [len, n]
        && d.numel() == e;
    if !ok {
        return Err(dim_err(format!(
            "selective scan shapes: u {us:?}, delta {:?}, A {:?}, B {:?}, C {:?}, D {:?}",
            delta.shape(),
            a.shape(),
            b.shape(),
            c.shape(),
            d.shape()
        )));
    }
    let (uv, dv, av, bv, cv, dd) = (
        u.value(),
        delta.value(),
        a.value(),
        b.value(),
        c.value(),
        d.value(),
    );
    // states[t] holds h_t for t in 0..=len, states[0] = 0.
    let mut states = vec![0.0; (len + 1) * e * n];
    let mut y = vec![0.0; len * e];
    for t in 0..len {
        let (prev, rest) = states.split_at_mut((t + 1) * e * n);
        let prev = &prev[t * e * n..];
        let cur = &mut rest[..e * n];
        for ch in 0..e {
            let dt = dv[t * e + ch];
            let x = uv[t * e + ch];
            let mut acc = 0.0;
            for s in 0..n {
                let av_ = av[ch * n + s];
                let z = dt * av_;
                let abar = z.exp();
                let beta = dt * phi1(z);
                let h = abar * prev[ch * n + s] + beta * bv[t * n + s] * x;
                cur[ch * n + s] = h;
                acc += cv[t * n + s] * h;
            }
            y[t * e + ch] = acc + dd[ch] * x;
        }
    }
    Ok(u.push(
        vec![len, e],
        y,
        &[u, delta, a, b, c, d],
        Box::new(move |gy, needs| {
            let mut du = vec![0.0; len * e];
            let mut ddelta = vec![0.0; len * e];
            let mut da = vec![0.0; e * n];
            let mut db = vec![0.0; len * n];
            let mut dc = vec![0.0; len * n];
            let mut d_d = vec![0.0; e];
            let mut dh = vec![0.0; e * n];
            for t in (0..len).rev() {
                let prev = &states[t * e * n..(t + 1) * e * n];
                let cur = &states[(t + 1) * e * n..(t + 2) * e * n];
                for ch in 0..e {
                    let g = gy[t * e + ch];
                    let dt = dv[t * e + ch];
                    let x = uv[t * e + ch];
                    du[t * e + ch] += dd[ch] * g;
                    d_d[ch] += x * g;
                    let mut ddt = 0.0;
                    let mut dx = 0.0;
                    for s in 0..n {
                        let k = ch * n + s;
                        dc[t * n + s] += g * cur[k];
                        let dhk = dh[k] + g * cv[t * n + s];
                        let av_ = av[k];
                        let z = dt * av_;
                        let abar = z.exp();
                        let beta = dt * phi1(z);
                        let bs = bv[t * n + s];
                        let d_abar = dhk * prev[k];
                        let d_beta = dhk * bs * x;
                        db[t * n + s] += dhk * beta * x;
                        dx += dhk * beta * bs;
                        // ∂Ā/∂Δ = AĀ, ∂Ā/∂A = ΔĀ, ∂β/∂Δ = Ā, ∂β/∂A = Δ² φ₁'(ΔA)
                        ddt += d_abar * av_ * abar + d_beta * abar;
                        da[k] += d_abar * dt * abar + d_beta * dt * dt * phi1_prime(z);
                        dh[k] = dhk * abar;
                    }
                    ddelta[t * e + ch] += ddt;
                    du[t * e + ch] += dx;
                }
            }
            vec![
                needs[0].then_some(du),
                needs[1].then_some(ddelta),
                needs[2].then_some(da),
                needs[3].then_some(db),
                needs[4].then_some(dc),
                needs[5].then_some(d_d),
            ]
        }),
    ))
}

/// Learned projections producing `Δ`, `B`, `C` from the sequence itself,
/// plus the per-channel `A` and feedthrough `D`.
#[derive(Clone, Debug)]
pub struct SelectiveSsm {
    /// `E → R`, the low-rank input to the step projection.
    pub dt_in: Linear,
    /// `R → E` with bias; `Δ = softplus(dt_proj(dt_in(x)))`.
    pub dt_proj: Linear,
    pub b_proj: Linear,
    pub c_proj: Linear,
    /// `[E × N]`; `A = −softplus(a_log)`.
    pub a_log: ParamId,
    /// `[E]`
    pub d: ParamId,
    pub channels: usize,
    pub state_size: usize,
    pub dt_rank: usize,
}

impl SelectiveSsm {
    pub const DT_MIN: f64 = 1e-3;
    pub const DT_MAX: f64 = 1e-1;

    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        state_size: usize,
        dt_rank: usize,
    ) -> Self {
        let dt_in = Linear::new(store, rng, &format!("{name}.dt_in"), channels, dt_rank, false);
        let dt_proj = Linear::new(store, rng, &format!("{name}.dt_proj"), dt_rank, channels, true);
        // Initial steps log-uniform in [DT_MIN, DT_MAX], stored as softplus⁻¹.
        let bias = store.get_mut(dt_proj.bias.expect("dt_proj has a bias"));
        for v in bias.data_mut() {
            let log_dt = rng.gen_range(Self::DT_MIN.ln()..Self::DT_MAX.ln());
            let dt = log_dt.exp();
            *v = dt + (-(-dt).exp_m1()).ln();
        }
        let b_proj = Linear::new(store, rng, &format!("{name}.b_proj"), channels, state_size, false);
        let c_proj = Linear::new(store, rng, &format!("{name}.c_proj"), channels, state_size, false);
        let row = diagonal_log_init(state_size);
        let a_log = store.add(
            format!("{name}.a_log"),
            Tensor::from_fn(&[channels, state_size], |i| row[i % state_size]),
        );
        let d = store.add(format!("{name}.d"), Tensor::full(&[channels], 1.0));
        Self {
            dt_in,
            dt_proj,
            b_proj,
            c_proj,
            a_log,
            d,
            channels,
            state_size,
            dt_rank,
        }
    }

    /// Runs the scan over `x: [L × E]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let delta = self
            .dt_proj
            .forward_rows(p, self.dt_in.forward_rows(p, x)?)?
            .softplus();
        let b = self.b_proj.forward_rows(p, x)?;
        let c = self.c_proj.forward_rows(p, x)?;
        let a = -p.get(self.a_log).softplus();
        selective_scan(x, delta, a, b, c, p.get(self.d))
    }

    pub fn numel(&self) -> usize {
        self.dt_in.numel()
            + self.dt_proj.numel()
            + self.b_proj.numel()
            + self.c_proj.numel()
            + self.channels * self.state_size
            + self.channels
    }

    /// Multiply-accumulates for a sequence of length `len`: projections plus
    /// the per-step state update and readout.
    pub fn macs(&self, len: usize) -> u64 {
        let proj = self.dt_in.numel() + self.dt_rank * self.channels + 2 * self.channels * self.state_size;
        let scan = 3 * self.channels * self.state_size + self.channels;
        (len * (proj + scan)) as u64
    }

    /// Initial `softplus(bias)` steps, for inspection.
    pub fn initial_steps(&self, store: &ParamStore) -> Vec<f64> {
        store
            .get(self.dt_proj.bias.expect("dt_proj has a bias"))
            .data()
            .iter()
            .map(|&v| softplus(v))
            .collect()
    }
}
