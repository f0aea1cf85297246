//! Runtime property suites over the library's mathematical building blocks.
//!
//! Each check reports a measured quantity against a tolerance. The suites are
//! `ssm`, `scan`, `attention`, `grad` and `metrics`.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_weights, build_triangle_windows, CgaBlock, LayerParts, TransformerLayer, TwlaBlock, TwlaConfig};
use crate::autodiff::{check_gradients, Tape, Var};
use crate::checkpoint;
use crate::error::{contract, Result};
use crate::irss::{flatten, unflatten, IrssBlock, IrssConfig, ScanPath};
use crate::model::{MatIrConfig, MatIrModel, Task};
use crate::nn::{Bound, ParamStore};
use crate::pipeline::{psnr, ssim, train, Dataset, Degradation, ImagePlane, TrainSpec};
use crate::ssm::{discretize, kernel, mat, scan_convolutional, scan_recurrent, DiscreteSsm, SsmParams};
use crate::tensor::Tensor;

pub const SUITES: [&str; 5] = ["ssm", "scan", "attention", "grad", "metrics"];

/// Implementation under test for the substitutable pieces.
#[derive(Clone, Copy)]
pub struct Subject {
    pub recurrence: fn(&DiscreteSsm, &[f64]) -> Vec<f64>,
}

impl Default for Subject {
    fn default() -> Self {
        Self {
            recurrence: scan_recurrent,
        }
    }
}

impl Subject {
    /// Recurrence with the sign of the input term flipped, for checking that
    /// the suites catch a broken scan.
    pub fn faulty() -> Self {
        Self {
            recurrence: flipped_recurrence,
        }
    }
}

fn flipped_recurrence(m: &DiscreteSsm, x: &[f64]) -> Vec<f64> {
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    let y = scan_recurrent(&DiscreteSsm { d: 0.0, ..m.clone() }, &neg);
    y.iter().zip(x).map(|(y, x)| y + m.d * x).collect()
}

#[derive(Clone, Debug)]
pub struct Check {
    pub suite: &'static str,
    pub name: &'static str,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub seconds: f64,
}

impl Check {
    pub fn full_name(&self) -> String {
        format!("{}/{}", self.suite, self.name)
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<34} measured={:.3e} tol={:.1e} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.full_name(),
            self.measured,
            self.tolerance,
            self.seconds
        )
    }
}

struct Suite {
    name: &'static str,
    checks: Vec<Check>,
}

impl Suite {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            checks: Vec::new(),
        }
    }

    /// Passes when `measured < tolerance`, or `measured == 0` for a zero
    /// tolerance. NaN never passes.
    fn below(&mut self, name: &'static str, tolerance: f64, f: impl FnOnce() -> Result<f64>) -> Result<()> {
        let t = Instant::now();
        let measured = f()?;
        self.checks.push(Check {
            suite: self.name,
            name,
            measured,
            tolerance,
            passed: if tolerance == 0.0 { measured == 0.0 } else { measured < tolerance },
            seconds: t.elapsed().as_secs_f64(),
        });
        Ok(())
    }
}

/// Runs every suite whose name matches `filter` (all suites when `None`).
/// A filter of the form `suite/check` keeps only matching checks.
pub fn run(filter: Option<&str>, subject: &Subject) -> Result<Vec<Check>> {
    let selected: Vec<&str> = SUITES
        .iter()
        .copied()
        .filter(|s| match filter {
            None => true,
            Some(f) => s.contains(f) || f.starts_with(&format!("{s}/")),
        })
        .collect();
    if selected.is_empty() {
        return Err(contract(format!(
            "filter {:?} matches no suite (available: {})",
            filter.unwrap_or_default(),
            SUITES.join(", ")
        )));
    }
    let mut out = Vec::new();
    for name in selected {
        let checks = match name {
            "ssm" => ssm_suite(subject)?,
            "scan" => scan_suite()?,
            "attention" => attention_suite()?,
            "grad" => grad_suite()?,
            _ => metrics_suite()?,
        };
        out.extend(checks);
    }
    if let Some(f) = filter.filter(|f| f.contains('/')) {
        out.retain(|c| c.full_name().contains(f));
        if out.is_empty() {
            return Err(contract(format!("filter {f:?} matches no check")));
        }
    }
    Ok(out)
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Solves `A X = B` for square `A` (`n × n`) and `B` (`n × m`) by Gaussian
/// elimination with partial pivoting.
fn solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize, m: usize) -> Vec<f64> {
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .expect("non-empty range");
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            for k in 0..m {
                b.swap(col * m + k, piv * m + k);
            }
        }
        let d = a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[r * n + k] -= f * a[col * n + k];
            }
            for k in 0..m {
                b[r * m + k] -= f * b[col * m + k];
            }
        }
    }
    let mut x = vec![0.0; n * m];
    for r in (0..n).rev() {
        for k in 0..m {
            let s: f64 = (r + 1..n).map(|j| a[r * n + j] * x[j * m + k]).sum();
            x[r * m + k] = (b[r * m + k] - s) / a[r * n + r];
        }
    }
    x
}

/// Matrix exponential by scaling and squaring of the degree-6 diagonal Padé
/// approximant.
pub fn expm_pade(a: &[f64], n: usize) -> Vec<f64> {
    const Q: usize = 6;
    let norm = (0..n)
        .map(|j| (0..n).map(|i| a[i * n + j].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut s = 0;
    while norm / 2f64.powi(s) > 0.5 {
        s += 1;
    }
    let scaled: Vec<f64> = a.iter().map(|v| v / 2f64.powi(s)).collect();
    // c_k = (2q − k)! q! / ((2q)! k! (q − k)!)
    let mut c = [1.0; Q + 1];
    for k in 1..=Q {
        c[k] = c[k - 1] * (Q + 1 - k) as f64 / (k * (2 * Q + 1 - k)) as f64;
    }
    let mut power = mat::identity(n);
    let mut num = vec![0.0; n * n];
    let mut den = vec![0.0; n * n];
    for (k, ck) in c.iter().enumerate() {
        if k > 0 {
            power = mat::mul(&power, &scaled, n);
        }
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        for i in 0..n * n {
            num[i] += ck * power[i];
            den[i] += sign * ck * power[i];
        }
    }
    let mut e = solve(den, num, n, n);
    for _ in 0..s {
        e = mat::mul(&e, &e, n);
    }
    e
}

/// `(Ā, B̄)` from the exponential of the block matrix `[[ΔA, ΔB], [0, 0]]`.
fn zoh_oracle(p: &SsmParams, delta: f64) -> (Vec<f64>, Vec<f64>) {
    let n = p.state_size;
    let m = n + 1;
    let mut big = vec![0.0; m * m];
    for i in 0..n {
        for j in 0..n {
            big[i * m + j] = delta * p.a[i * n + j];
        }
        big[i * m + n] = delta * p.b[i];
    }
    let e = expm_pade(&big, m);
    let a_bar = (0..n * n).map(|k| e[(k / n) * m + k % n]).collect();
    let b_bar = (0..n).map(|i| e[i * m + n]).collect();
    (a_bar, b_bar)
}

/// Random `N × N` system with `‖ΔA‖∞` drawn uniformly from `(0, max_norm]`.
fn random_system(rng: &mut ChaCha8Rng, max_norm: f64) -> (SsmParams, f64) {
    let n = rng.gen_range(1..=8);
    let mut a = uniform_vec(rng, n * n, -1.0, 1.0);
    let delta = rng.gen_range(0.01..1.0);
    let target = rng.gen_range(0.0..max_norm) + 1e-3;
    let norm = mat::norm_inf(&a, n) * delta;
    a.iter_mut().for_each(|v| *v *= target / norm);
    let b = uniform_vec(rng, n, -1.0, 1.0);
    let c = uniform_vec(rng, n, -1.0, 1.0);
    let d = rng.gen_range(-1.0..1.0);
    (SsmParams::new(a, b, c, d).expect("consistent shapes"), delta)
}

/// As [`random_system`] with `A` shifted by `−2/Δ·I`, so `‖ΔA‖∞ ≤ 2` keeps
/// every eigenvalue of `ΔA` in the left half-plane and sequences stay bounded.
fn stable_system(rng: &mut ChaCha8Rng) -> (SsmParams, f64) {
    let (mut p, delta) = random_system(rng, 2.0);
    let n = p.state_size;
    for i in 0..n {
        p.a[i * n + i] -= 2.0 / delta;
    }
    (p, delta)
}

fn ssm_suite(subject: &Subject) -> Result<Vec<Check>> {
    let mut s = Suite::new("ssm");
    s.below("rnn_cnn_duality", 1e-10, || {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let (p, delta) = stable_system(&mut rng);
            let m = discretize(&p, delta)?;
            let len = rng.gen_range(1..=64);
            let x = uniform_vec(&mut rng, len, -1.0, 1.0);
            worst = worst.max(max_abs(&(subject.recurrence)(&m, &x), &scan_convolutional(&m, &x)));
        }
        Ok(worst)
    })?;
    s.below("impulse_response_is_kernel", 1e-12, || {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let (p, delta) = stable_system(&mut rng);
            let m = DiscreteSsm { d: 0.0, ..discretize(&p, delta)? };
            let mut impulse = vec![0.0; 32];
            impulse[0] = 1.0;
            worst = worst.max(max_abs(&(subject.recurrence)(&m, &impulse), &kernel(&m, 32).k));
        }
        Ok(worst)
    })?;
    s.below("zoh_matches_expm_oracle", 1e-10, || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let (p, delta) = random_system(&mut rng, 4.0);
            let m = discretize(&p, delta)?;
            let (a_bar, b_bar) = zoh_oracle(&p, delta);
            worst = worst.max(max_abs(&m.a_bar, &a_bar)).max(max_abs(&m.b_bar, &b_bar));
        }
        Ok(worst)
    })?;
    s.below("zoh_zero_a_and_zero_step_exact", 0.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let n = rng.gen_range(1..=8);
            let b = uniform_vec(&mut rng, n, -1.0, 1.0);
            let delta = rng.gen_range(0.0..2.0);
            let zero_a = SsmParams::new(vec![0.0; n * n], b.clone(), vec![1.0; n], 0.0)?;
            let m = discretize(&zero_a, delta)?;
            let scaled: Vec<f64> = b.iter().map(|v| v * delta).collect();
            worst = worst.max(max_abs(&m.a_bar, &mat::identity(n))).max(max_abs(&m.b_bar, &scaled));
            let (p, _) = random_system(&mut rng, 4.0);
            let m = discretize(&p, 0.0)?;
            let n = p.state_size;
            worst = worst.max(max_abs(&m.a_bar, &mat::identity(n))).max(max_abs(&m.b_bar, &vec![0.0; n]));
        }
        Ok(worst)
    })?;
    s.below("zoh_semigroup", 1e-9, || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let (p, delta) = random_system(&mut rng, 2.0);
            let split = rng.gen_range(0.0..1.0);
            let (d1, d2) = (delta * split, delta * (1.0 - split));
            let whole = discretize(&p, d1 + d2)?.a_bar;
            let parts = mat::mul(&discretize(&p, d1)?.a_bar, &discretize(&p, d2)?.a_bar, p.state_size);
            worst = worst.max(max_abs(&whole, &parts));
        }
        Ok(worst)
    })?;
    s.below("expm_oracle_scalar_sanity", 1e-13, || {
        Ok([-4.0f64, -1.0, 0.0, 0.5, 3.0]
            .iter()
            .map(|&a| ((expm_pade(&[a], 1)[0] - a.exp()) / a.exp()).abs())
            .fold(0.0, f64::max))
    })?;
    Ok(s.checks)
}

/// Finite-difference dependence map `dep[p][q] = max_{c,c'} |∂y[c', p] / ∂x[c, q]|`.
fn dependence(f: &dyn Fn(&Tensor) -> Result<Tensor>, x: &Tensor, eps: f64) -> Result<Vec<Vec<f64>>> {
    let s = x.shape();
    let (c, hw) = (s[0], s[1] * s[2]);
    let mut dep = vec![vec![0.0f64; hw]; hw];
    for q in 0..hw {
        for ch in 0..c {
            let mut hi = x.clone();
            hi.data_mut()[ch * hw + q] += eps;
            let mut lo = x.clone();
            lo.data_mut()[ch * hw + q] -= eps;
            let (yh, yl) = (f(&hi)?, f(&lo)?);
            let oc = yh.numel() / hw;
            for (p, row) in dep.iter_mut().enumerate() {
                for o in 0..oc {
                    let d = ((yh.data()[o * hw + p] - yl.data()[o * hw + p]) / (2.0 * eps)).abs();
                    row[q] = row[q].max(d);
                }
            }
        }
    }
    Ok(dep)
}

fn perturb(store: &mut ParamStore, seed: u64, amp: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-amp..amp);
        }
    }
}

fn irss_block(channels: usize, seed: u64) -> (ParamStore, IrssBlock) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = IrssConfig {
        channels,
        expansion: 2,
        state_size: 4,
        paths: ScanPath::ALL.to_vec(),
    };
    let b = IrssBlock::new(&mut store, &mut rng, "irss", cfg);
    perturb(&mut store, seed + 1, 0.2);
    (store, b)
}

fn scan_suite() -> Result<Vec<Check>> {
    let mut s = Suite::new("scan");
    s.below("flatten_bijection_all_sizes", 0.0, || {
        let mut failures = 0usize;
        let tape = Tape::new();
        for h in 1..=16 {
            for w in 1..=16 {
                let x = tape.constant(&Tensor::from_fn(&[2, h, w], |i| i as f64));
                for path in ScanPath::ALL {
                    let mut seen = vec![false; h * w];
                    for pos in path.order(h, w) {
                        if pos >= h * w || seen[pos] {
                            failures += 1;
                        } else {
                            seen[pos] = true;
                        }
                    }
                    let back = unflatten(flatten(x, path)?, path, h, w)?;
                    if *back.value() != *x.value() {
                        failures += 1;
                    }
                }
            }
        }
        Ok(failures as f64)
    })?;

    // At least three channels: a channel norm over two maps every pixel to ±1.
    let (mut store, block) = irss_block(4, 11);
    // Centre-tap depthwise kernel: the local mixing then cannot leak future
    // pixels into the scan.
    for (i, v) in store.get_mut(block.dw_weight).data_mut().iter_mut().enumerate() {
        if i % 9 != 4 {
            *v = 0.0;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_tensor(&mut rng, &[4, 4, 4]);
    let one_dir = |x: &Tensor| -> Result<Tensor> {
        let tape = Tape::new();
        let p = Bound::frozen(&tape, &store);
        Ok(block.forward_ndir(&p, tape.constant(x), 1)?.to_tensor())
    };
    let dep = dependence(&one_dir, &x, 1e-5)?;
    s.below("one_direction_causal", 0.0, || {
        let mut leak = 0.0f64;
        for (p, row) in dep.iter().enumerate() {
            for (q, &d) in row.iter().enumerate() {
                if q > p {
                    leak = leak.max(d);
                }
            }
        }
        Ok(leak)
    })?;
    s.below("one_direction_sees_past", 0.0, || {
        // Counts past pixels with no measurable influence.
        let mut missing = 0usize;
        for (p, row) in dep.iter().enumerate() {
            missing += row[..=p].iter().filter(|&&d| d < 1e-9).count();
        }
        Ok(missing as f64)
    })?;

    let (store4, block4) = irss_block(4, 13);
    let four_dir = |x: &Tensor| -> Result<Tensor> {
        let tape = Tape::new();
        let p = Bound::frozen(&tape, &store4);
        Ok(block4.forward_ndir(&p, tape.constant(x), 4)?.to_tensor())
    };
    let dep4 = dependence(&four_dir, &x, 1e-5)?;
    s.below("four_directions_full_receptive_field", 0.0, || {
        Ok(dep4.iter().flatten().filter(|&&d| d < 1e-9).count() as f64)
    })?;
    Ok(s.checks)
}

fn twla_block(seed: u64, dim: usize, heads: usize, k: usize) -> Result<(ParamStore, TwlaBlock)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = TwlaConfig {
        dim,
        window: 4,
        neighbors: k,
        geo_dim: 8,
        heads,
    };
    let b = TwlaBlock::new(&mut store, &mut rng, "twla", cfg)?;
    perturb(&mut store, seed + 1, 0.3);
    Ok((store, b))
}

fn cga_block(seed: u64, channels: usize) -> (ParamStore, CgaBlock) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let b = CgaBlock::new(&mut store, &mut rng, "cga", channels);
    perturb(&mut store, seed + 1, 0.3);
    (store, b)
}

fn attention_suite() -> Result<Vec<Check>> {
    let mut s = Suite::new("attention");
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    s.below("twla_rows_sum_to_one", 1e-12, || {
        let mut worst = 0.0f64;
        for (heads, k, size) in [(1, 3, 4), (2, 5, 8), (4, 1, 4)] {
            let (store, b) = twla_block(22 + k as u64, 8, heads, k)?;
            let geo = b.geometry(size, size)?;
            let tape = Tape::new();
            let p = Bound::frozen(&tape, &store);
            let x = tape.constant(&random_tensor(&mut rng, &[size * size, 8])).scale(3.0);
            let a = b.attention(&p, x, &geo)?;
            for row in a.chunks(k) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        Ok(worst)
    })?;
    s.below("cga_rows_sum_to_one", 1e-12, || {
        let mut worst = 0.0f64;
        for c in [2, 5, 16] {
            let (store, b) = cga_block(30 + c as u64, c);
            let tape = Tape::new();
            let p = Bound::frozen(&tape, &store);
            let x = tape.constant(&random_tensor(&mut rng, &[c, 4, 6])).scale(4.0);
            for row in b.attention(&p, x)?.value().chunks(c) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        Ok(worst)
    })?;
    s.below("logit_shift_invariance", 1e-12, || {
        let (n, dim, k) = (16, 4, 3);
        let windows = build_triangle_windows(4, 4, 4, k)?;
        let neighbors: Vec<usize> = windows.iter().flat_map(|w| w.neighbors.clone()).collect();
        let q = uniform_vec(&mut rng, n * dim, -1.0, 1.0);
        let kk = uniform_vec(&mut rng, n * dim, -1.0, 1.0);
        let bias = uniform_vec(&mut rng, n * k, -1.0, 1.0);
        let base = attention_weights(&q, &kk, &bias, &neighbors, dim, 1, k);
        let mut worst = 0.0f64;
        for shift in [-50.0, 3.5, 700.0] {
            // A per-row constant added to every logit of that row.
            let shifted: Vec<f64> = bias.iter().enumerate().map(|(i, b)| b + shift * (1 + i / k) as f64).collect();
            worst = worst.max(max_abs(&base, &attention_weights(&q, &kk, &shifted, &neighbors, dim, 1, k)));
        }
        let tape = Tape::new();
        let logits = random_tensor(&mut rng, &[6, 5]);
        let a = tape.constant(&logits).softmax(1).to_tensor();
        let shifted = Tensor::from_fn(&[6, 5], |i| logits.data()[i] + 40.0 * (i / 5) as f64 - 100.0);
        let b = tape.constant(&shifted).softmax(1).to_tensor();
        Ok(worst.max(a.max_abs_diff(&b)))
    })?;
    s.below("twla_two_hop_locality", 0.0, || {
        let (store, b) = twla_block(40, 2, 1, 3)?;
        let windows = build_triangle_windows(4, 4, 4, 3)?;
        let x0 = random_tensor(&mut rng, &[16, 2]);
        let eps = 1e-6;
        let mut leak = 0.0f64;
        for i in 0..16 {
            let mut reach = vec![i];
            for (jj, &j) in windows[i].neighbors.iter().enumerate() {
                reach.push(j);
                reach.extend(&windows[i].second_hop[jj]);
            }
            for j in (0..16).filter(|j| !reach.contains(j)) {
                for c in 0..2 {
                    let eval = |delta: f64| -> Result<Vec<f64>> {
                        let mut xs = x0.clone();
                        xs.data_mut()[j * 2 + c] += delta;
                        let tape = Tape::new();
                        let p = Bound::frozen(&tape, &store);
                        let y = b.forward(&p, tape.constant(&xs), &windows)?.value();
                        Ok(vec![y[i * 2], y[i * 2 + 1]])
                    };
                    leak = leak.max(max_abs(&eval(eps)?, &eval(-eps)?));
                }
            }
        }
        Ok(leak)
    })?;
    s.below("cga_spatial_permutation", 1e-12, || {
        let (c, h, w) = (6, 4, 5);
        let (store, b) = cga_block(50, c);
        let x = random_tensor(&mut rng, &[c, h, w]);
        let mut perm: Vec<usize> = (0..h * w).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let permute = |t: &Tensor| Tensor::from_fn(&[c, h, w], |i| t.data()[(i / (h * w)) * h * w + perm[i % (h * w)]]);
        let tape = Tape::new();
        let p = Bound::frozen(&tape, &store);
        let y = b.forward(&p, tape.constant(&x))?.to_tensor();
        let y_perm = b.forward(&p, tape.constant(&permute(&x)))?.to_tensor();
        Ok(permute(&y).max_abs_diff(&y_perm))
    })?;
    Ok(s.checks)
}

/// `Σ y ⊙ r` for a fixed random `r`, so that no gradient cancels by symmetry.
fn weighted_sum<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> Var<'t> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random_tensor(&mut rng, &y.shape());
    (y * tape.constant(&r)).sum()
}

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

fn grad_suite() -> Result<Vec<Check>> {
    let mut s = Suite::new("grad");
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let x4 = random_tensor(&mut rng, &[4, 4, 4]);
    s.below("cga", GRAD_TOL, || {
        let (store, b) = cga_block(61, 4);
        check_gradients(
            |tape, x| {
                let p = Bound::frozen(tape, &store);
                weighted_sum(tape, b.forward(&p, x).expect("valid shapes"), 1)
            },
            &x4,
            GRAD_EPS,
        )
    })?;
    s.below("twla", GRAD_TOL, || {
        let (store, b) = twla_block(62, 4, 2, 3)?;
        check_gradients(
            |tape, x| {
                let p = Bound::frozen(tape, &store);
                weighted_sum(tape, b.forward_map(&p, x).expect("valid shapes"), 2)
            },
            &x4,
            GRAD_EPS,
        )
    })?;
    s.below("irss", GRAD_TOL, || {
        let (store, b) = irss_block(4, 63);
        check_gradients(
            |tape, x| {
                let p = Bound::frozen(tape, &store);
                weighted_sum(tape, b.forward(&p, x).expect("valid shapes"), 3)
            },
            &x4,
            GRAD_EPS,
        )
    })?;
    s.below("transformer_layer", GRAD_TOL, || {
        let mut store = ParamStore::new();
        let mut lrng = ChaCha8Rng::seed_from_u64(64);
        let cfg = TwlaConfig {
            dim: 4,
            window: 4,
            neighbors: 3,
            geo_dim: 8,
            heads: 1,
        };
        let layer = TransformerLayer::new(&mut store, &mut lrng, "layer", cfg, LayerParts::default())?;
        perturb(&mut store, 65, 0.2);
        check_gradients(
            |tape, x| {
                let p = Bound::frozen(tape, &store);
                weighted_sum(tape, layer.forward(&p, x).expect("valid shapes"), 4)
            },
            &x4,
            GRAD_EPS,
        )
    })?;
    // Fresh models have a zeroed head; perturb so every tensor reaches the loss.
    let mut model = MatIrModel::build(&MatIrConfig::tiny(Task::Denoise, 1))?;
    perturb(&mut model.params, 66, 0.05);
    let image = Tensor::from_fn(&[3, 4, 4], |_| rng.gen_range(0.0..1.0));
    let target = Tensor::from_fn(&[3, 4, 4], |_| rng.gen_range(0.0..1.0));
    let l1 = |tape: &Tape, p: &Bound<'_>, x: Var<'_>| -> Result<f64> {
        let out = model.forward_bound(p, x)?;
        Ok((out - tape.constant(&target)).abs().mean().item())
    };
    s.below("matir_tiny_l1_input", GRAD_TOL, || {
        check_gradients(
            |tape, x| {
                let p = Bound::frozen(tape, &model.params);
                let out = model.forward_bound(&p, x).expect("valid shapes");
                (out - tape.constant(&target)).abs().mean()
            },
            &image,
            GRAD_EPS,
        )
    })?;
    s.below("matir_tiny_l1_params_directional", GRAD_TOL, || {
        // One random direction per parameter tensor, compared against a
        // central difference along it.
        let tape = Tape::new();
        let p = Bound::trainable(&tape, &model.params);
        let out = model.forward_bound(&p, tape.constant(&image))?;
        let loss = (out - tape.constant(&target)).abs().mean();
        tape.backward(loss)?;
        let grads = p.grads(&tape);
        let mut worst = 0.0f64;
        for (idx, g) in grads.iter().enumerate() {
            let dir: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let analytic: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
            let eval = |sign: f64| -> Result<f64> {
                let mut m = model.clone();
                let t = &mut m.params.tensors_mut()[idx];
                for (v, d) in t.data_mut().iter_mut().zip(&dir) {
                    *v += sign * GRAD_EPS * d;
                }
                let tape = Tape::new();
                let p = Bound::frozen(&tape, &m.params);
                l1(&tape, &p, tape.constant(&image))
            };
            let numeric = (eval(1.0)? - eval(-1.0)?) / (2.0 * GRAD_EPS);
            // Tensors whose effect on the loss is at rounding level are
            // compared on an absolute 1e-6 floor.
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6));
        }
        Ok(worst)
    })?;
    Ok(s.checks)
}

fn metrics_suite() -> Result<Vec<Check>> {
    let mut s = Suite::new("metrics");
    let a = ImagePlane::from_fn(32, 32, 3, |x, y, c| (20 + x * 5 + y * 2 + c * 7) as u8);
    s.below("psnr_off_by_one", 0.01, || {
        let b = ImagePlane::new(32, 32, 3, a.pixels.iter().map(|v| v + 1).collect())?;
        Ok((psnr(&a, &b, false)? - 48.13).abs())
    })?;
    s.below("ssim_identity", 0.0, || Ok((ssim(&a, &a)? - 1.0).abs()))?;
    s.below("checkpoint_round_trip", 1e-5, || {
        let config = MatIrConfig::tiny(Task::Sr, 2);
        let mut model = MatIrModel::build(&config)?;
        perturb(&mut model.params, 70, 0.05);
        let bytes = checkpoint::encode(model.params.iter());
        let loaded = MatIrModel::from_entries(checkpoint::decode(&bytes)?, &config)?;
        let x = Tensor::from_fn(&[3, 8, 8], |i| (i % 17) as f64 / 17.0);
        Ok(model.forward(&x)?.max_abs_diff(&loaded.forward(&x)?))
    })?;
    s.below("same_seed_training_identical", 0.0, || {
        let img = ImagePlane::from_fn(16, 16, 3, |x, y, c| (x * 13 + y * 7 + c * 40) as u8);
        let data = Dataset::from_images(vec![img], vec![]);
        let spec = TrainSpec {
            patch: 8,
            batch: 2,
            max_steps: 3,
            val_every: 1,
            seed: 9,
            ..TrainSpec::default()
        };
        let run = || -> Result<String> {
            let mut m = MatIrModel::build(&MatIrConfig::tiny(Task::Denoise, 1))?;
            Ok(train(&mut m, &data, Degradation::GaussianNoise(25.0), &spec)?.to_text())
        };
        Ok(if run()? == run()? { 0.0 } else { 1.0 })
    })?;
    Ok(s.checks)
}
