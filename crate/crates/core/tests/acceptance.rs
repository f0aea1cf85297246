//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Criteria can be selected by number: `cargo test --test acceptance -- 1 2 6`.
//! Criterion 9 is the long ablation tier and runs only when selected
//! explicitly or with `MATIR_NIGHTLY=1`.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use matir::attention::{attention_weights, build_triangle_windows, CgaBlock, LayerParts, TransformerLayer, TwlaBlock, TwlaConfig};
use matir::autodiff::check_gradients;
use matir::irss::{flatten, unflatten, IrssBlock, IrssConfig, ScanPath};
use matir::nn::{Bound, ParamStore};
use matir::pipeline::{
    degrade, evaluate_image, psnr, ssim, train, Dataset, Degradation, DegradationSpec, ImagePlane, TrainReport, TrainSpec,
};
use matir::ssm::{discretize, scan_convolutional, scan_recurrent, DiscreteSsm, SsmParams};
use matir::{MatIrConfig, MatIrModel, Result, Tape, Task, Tensor, Var};

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn below(measured: f64, tol: f64, what: &str) -> Self {
        Self {
            passed: measured < tol,
            detail: format!("{what}={measured:.3e} (< {tol:.0e})"),
        }
    }

    fn exact(measured: f64, what: &str) -> Self {
        Self {
            passed: measured == 0.0,
            detail: format!("{what}={measured} (== 0)"),
        }
    }

    fn and(self, other: Outcome) -> Self {
        Self {
            passed: self.passed && other.passed,
            detail: format!("{}; {}", self.detail, other.detail),
        }
    }
}

fn all(parts: Vec<Outcome>) -> Outcome {
    let mut it = parts.into_iter();
    let first = it.next().expect("at least one part");
    it.fold(first, Outcome::and)
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            for j in 0..n {
                out[i * n + j] += a[i * n + k] * b[k * n + j];
            }
        }
    }
    out
}

fn matvec(a: &[f64], v: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|i| (0..n).map(|j| a[i * n + j] * v[j]).sum()).collect()
}

fn perturb(store: &mut ParamStore, seed: u64, amp: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-amp..amp);
        }
    }
}

// ---------------------------------------------------------------- 1 and 2

/// Random system with `‖ΔA‖∞ ≤ max_norm`, optionally shifted to be stable.
fn random_ssm(rng: &mut ChaCha8Rng, max_norm: f64, stable: bool) -> (SsmParams, f64) {
    let n = rng.gen_range(1..=8);
    let delta = rng.gen_range(0.05..1.0);
    let mut a = uniform(rng, n * n);
    let norm = (0..n).map(|i| a[i * n..(i + 1) * n].iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let target = rng.gen_range(0.01..max_norm);
    a.iter_mut().for_each(|v| *v *= target / (norm * delta));
    if stable {
        for i in 0..n {
            a[i * n + i] -= target / delta;
        }
    }
    let (b, c) = (uniform(rng, n), uniform(rng, n));
    (SsmParams::new(a, b, c, rng.gen_range(-1.0..1.0)).unwrap(), delta)
}

/// `y_t = D x_t + Σ_{j ≤ t} C Ā^j B̄ x_{t−j}` evaluated term by term.
fn direct_sum(m: &DiscreteSsm, x: &[f64]) -> Vec<f64> {
    let n = m.state_size;
    let mut taps = Vec::with_capacity(x.len());
    let mut v = m.b_bar.clone();
    for _ in 0..x.len() {
        taps.push(m.c.iter().zip(&v).map(|(c, v)| c * v).sum::<f64>());
        v = matvec(&m.a_bar, &v, n);
    }
    (0..x.len())
        .map(|t| m.d * x[t] + (0..=t).map(|j| taps[j] * x[t - j]).sum::<f64>())
        .collect()
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut dual, mut oracle) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let (p, delta) = random_ssm(&mut rng, 2.0, true);
        let m = discretize(&p, delta).unwrap();
        let len = rng.gen_range(1..=64);
        let x = uniform(&mut rng, len);
        let rec = scan_recurrent(&m, &x);
        let conv = scan_convolutional(&m, &x);
        dual = dual.max(max_abs(&rec, &conv));
        oracle = oracle.max(max_abs(&rec, &direct_sum(&m, &x)));
    }
    Outcome::below(dual, 1e-10, "recurrent_vs_conv").and(Outcome::below(oracle, 1e-10, "recurrent_vs_direct_sum"))
}

/// Integrates `d/dt [s; u] = [[ΔA, ΔB], [0, 0]] [s; u]` over `t ∈ [0, 1]` with
/// classical RK4, column by column: the solution at `t = 1` from `[e_j; 0]`
/// is column `j` of `Ā`, and from `[0; 1]` is `B̄`.
fn zoh_rk4(p: &SsmParams, delta: f64) -> (Vec<f64>, Vec<f64>) {
    let n = p.state_size;
    let da: Vec<f64> = p.a.iter().map(|v| v * delta).collect();
    let db: Vec<f64> = p.b.iter().map(|v| v * delta).collect();
    let steps = 4000;
    let h = 1.0 / steps as f64;
    let rhs = |s: &[f64], u: f64| -> Vec<f64> { matvec(&da, s, n).iter().zip(&db).map(|(a, b)| a + b * u).collect() };
    let solve = |mut s: Vec<f64>, u: f64| -> Vec<f64> {
        for _ in 0..steps {
            let k1 = rhs(&s, u);
            let s2: Vec<f64> = s.iter().zip(&k1).map(|(s, k)| s + 0.5 * h * k).collect();
            let k2 = rhs(&s2, u);
            let s3: Vec<f64> = s.iter().zip(&k2).map(|(s, k)| s + 0.5 * h * k).collect();
            let k3 = rhs(&s3, u);
            let s4: Vec<f64> = s.iter().zip(&k3).map(|(s, k)| s + h * k).collect();
            let k4 = rhs(&s4, u);
            for i in 0..n {
                s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        s
    };
    let mut a_bar = vec![0.0; n * n];
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        for (i, v) in solve(e, 0.0).into_iter().enumerate() {
            a_bar[i * n + j] = v;
        }
    }
    (a_bar, solve(vec![0.0; n], 1.0))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut oracle = 0.0f64;
    for _ in 0..200 {
        let (p, delta) = random_ssm(&mut rng, 4.0, false);
        let m = discretize(&p, delta).unwrap();
        let (a_bar, b_bar) = zoh_rk4(&p, delta);
        oracle = oracle.max(max_abs(&m.a_bar, &a_bar)).max(max_abs(&m.b_bar, &b_bar));
    }
    let mut exact = 0.0f64;
    for _ in 0..50 {
        let (p, delta) = random_ssm(&mut rng, 4.0, false);
        let n = p.state_size;
        let eye: Vec<f64> = (0..n * n).map(|k| if k / n == k % n { 1.0 } else { 0.0 }).collect();
        let zero_step = discretize(&p, 0.0).unwrap();
        exact = exact.max(max_abs(&zero_step.a_bar, &eye)).max(max_abs(&zero_step.b_bar, &vec![0.0; n]));
        let zero_a = SsmParams { a: vec![0.0; n * n], ..p.clone() };
        let m = discretize(&zero_a, delta).unwrap();
        let db: Vec<f64> = p.b.iter().map(|b| b * delta).collect();
        exact = exact.max(max_abs(&m.a_bar, &eye)).max(max_abs(&m.b_bar, &db));
    }
    let mut semigroup = 0.0f64;
    for _ in 0..100 {
        let (p, delta) = random_ssm(&mut rng, 2.0, false);
        let split = rng.gen_range(0.0..1.0);
        let whole = discretize(&p, delta).unwrap().a_bar;
        let parts = matmul(
            &discretize(&p, delta * split).unwrap().a_bar,
            &discretize(&p, delta * (1.0 - split)).unwrap().a_bar,
            p.state_size,
        );
        semigroup = semigroup.max(max_abs(&whole, &parts));
    }
    all(vec![
        Outcome::below(oracle, 1e-10, "zoh_vs_rk4"),
        Outcome::exact(exact, "zero_cases"),
        Outcome::below(semigroup, 1e-9, "semigroup"),
    ])
}

// ---------------------------------------------------------------------- 3

fn irss(channels: usize, seed: u64) -> (ParamStore, IrssBlock) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = IrssConfig {
        channels,
        expansion: 2,
        state_size: 4,
        paths: ScanPath::ALL.to_vec(),
    };
    let block = IrssBlock::new(&mut store, &mut rng, "irss", cfg);
    perturb(&mut store, seed + 1, 0.2);
    (store, block)
}

/// `dep[p][q]`: largest central-difference sensitivity of any output channel
/// at pixel `p` to any input channel at pixel `q`.
fn jacobian_map(f: impl Fn(&Tensor) -> Tensor, x: &Tensor) -> Vec<Vec<f64>> {
    let s = x.shape().to_vec();
    let hw = s[1] * s[2];
    let eps = 1e-5;
    let mut dep = vec![vec![0.0f64; hw]; hw];
    for q in 0..hw {
        for c in 0..s[0] {
            let mut hi = x.clone();
            hi.data_mut()[c * hw + q] += eps;
            let mut lo = x.clone();
            lo.data_mut()[c * hw + q] -= eps;
            let (yh, yl) = (f(&hi), f(&lo));
            for (p, row) in dep.iter_mut().enumerate() {
                for o in 0..yh.numel() / hw {
                    let i = o * hw + p;
                    row[q] = row[q].max(((yh.data()[i] - yl.data()[i]) / (2.0 * eps)).abs());
                }
            }
        }
    }
    dep
}

fn criterion_3() -> Outcome {
    let mut broken = 0usize;
    let tape = Tape::new();
    for h in 1..=16 {
        for w in 1..=16 {
            let x = tape.constant(&Tensor::from_fn(&[3, h, w], |i| i as f64));
            for path in ScanPath::ALL {
                let order = path.order(h, w);
                let mut sorted = order.clone();
                sorted.sort_unstable();
                if sorted != (0..h * w).collect::<Vec<_>>() {
                    broken += 1;
                }
                let seq = flatten(x, path).unwrap();
                // Position l of the sequence holds pixel order[l].
                let first_channel: Vec<f64> = order.iter().map(|&pos| pos as f64).collect();
                let got: Vec<f64> = (0..h * w).map(|l| seq.value()[l * 3]).collect();
                if got != first_channel {
                    broken += 1;
                }
                if *unflatten(seq, path, h, w).unwrap().value() != *x.value() {
                    broken += 1;
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let x = random_tensor(&mut rng, &[4, 4, 4]);
    let (mut store, block) = irss(4, 304);
    // Centre tap only, so the local convolution cannot reach future pixels.
    for (i, v) in store.get_mut(block.dw_weight).data_mut().iter_mut().enumerate() {
        if i % 9 != 4 {
            *v = 0.0;
        }
    }
    let one = jacobian_map(
        |x| {
            let tape = Tape::new();
            let p = Bound::frozen(&tape, &store);
            block.forward_ndir(&p, tape.constant(x), 1).unwrap().to_tensor()
        },
        &x,
    );
    // Row-major forward scan: pixel p may depend only on pixels q ≤ p, and on all of them.
    let mut future_leak = 0.0f64;
    let mut missing_past = 0usize;
    for (p, row) in one.iter().enumerate() {
        for (q, &d) in row.iter().enumerate() {
            if q > p {
                future_leak = future_leak.max(d);
            } else if d < 1e-9 {
                missing_past += 1;
            }
        }
    }
    let (store4, block4) = irss(4, 305);
    let four = jacobian_map(
        |x| {
            let tape = Tape::new();
            let p = Bound::frozen(&tape, &store4);
            block4.forward_ndir(&p, tape.constant(x), 4).unwrap().to_tensor()
        },
        &x,
    );
    let blind = four.iter().flatten().filter(|&&d| d < 1e-9).count();
    all(vec![
        Outcome::exact(broken as f64, "bijection_failures"),
        Outcome::exact(future_leak, "one_dir_future_leak"),
        Outcome::exact(missing_past as f64, "one_dir_missing_past"),
        Outcome::exact(blind as f64, "four_dir_blind_pairs"),
    ])
}

// ---------------------------------------------------------------------- 4

fn twla(seed: u64, dim: usize, heads: usize, k: usize) -> (ParamStore, TwlaBlock) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = TwlaConfig {
        dim,
        window: 4,
        neighbors: k,
        geo_dim: 8,
        heads,
    };
    let block = TwlaBlock::new(&mut store, &mut rng, "twla", cfg).unwrap();
    perturb(&mut store, seed + 1, 0.3);
    (store, block)
}

fn cga(seed: u64, channels: usize) -> (ParamStore, CgaBlock) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = CgaBlock::new(&mut store, &mut rng, "cga", channels);
    perturb(&mut store, seed + 1, 0.3);
    (store, block)
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut rows = 0.0f64;
    for (heads, k, size) in [(1, 3, 4), (2, 5, 8), (4, 1, 8)] {
        let (store, block) = twla(405 + k as u64, 8, heads, k);
        let geo = block.geometry(size, size).unwrap();
        let tape = Tape::new();
        let p = Bound::frozen(&tape, &store);
        let x = tape.constant(&random_tensor(&mut rng, &[size * size, 8])).scale(5.0);
        for row in block.attention(&p, x, &geo).unwrap().chunks(k) {
            rows = rows.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    for c in [3, 8, 16] {
        let (store, block) = cga(410 + c as u64, c);
        let tape = Tape::new();
        let p = Bound::frozen(&tape, &store);
        let x = tape.constant(&random_tensor(&mut rng, &[c, 4, 4])).scale(5.0);
        for row in block.attention(&p, x).unwrap().value().chunks(c) {
            rows = rows.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }

    // Adding a per-row constant to the logits leaves the weights unchanged.
    let (n, dim, k) = (16, 4, 3);
    let windows = build_triangle_windows(4, 4, 4, k).unwrap();
    let neighbors: Vec<usize> = windows.iter().flat_map(|w| w.neighbors.clone()).collect();
    let q = uniform(&mut rng, n * dim);
    let kk = uniform(&mut rng, n * dim);
    let bias = uniform(&mut rng, n * k);
    let base = attention_weights(&q, &kk, &bias, &neighbors, dim, 1, k);
    let mut shift = 0.0f64;
    for c in [-30.0, 0.25, 500.0] {
        let shifted: Vec<f64> = bias.iter().enumerate().map(|(i, b)| b + c * (i / k) as f64).collect();
        shift = shift.max(max_abs(&base, &attention_weights(&q, &kk, &shifted, &neighbors, dim, 1, k)));
    }

    // Output at pixel i must not move when a pixel outside i, 𝒩(i) and the
    // second hop changes.
    let (store, block) = twla(420, 2, 1, 3);
    let x0 = random_tensor(&mut rng, &[16, 2]);
    let out = |xs: &Tensor| -> Vec<f64> {
        let tape = Tape::new();
        let p = Bound::frozen(&tape, &store);
        block.forward(&p, tape.constant(xs), &windows).unwrap().value().to_vec()
    };
    let mut leak = 0.0f64;
    let mut reached = 0usize;
    for j in 0..16 {
        for c in 0..2 {
            let mut hi = x0.clone();
            hi.data_mut()[j * 2 + c] += 1e-3;
            let (a, b) = (out(&x0), out(&hi));
            for (i, w) in windows.iter().enumerate() {
                let inside = i == j || w.neighbors.contains(&j) || w.second_hop.iter().any(|s| s.contains(&j));
                let moved = (a[i * 2] - b[i * 2]).abs().max((a[i * 2 + 1] - b[i * 2 + 1]).abs());
                if inside {
                    reached += usize::from(moved > 0.0);
                } else {
                    leak = leak.max(moved);
                }
            }
        }
    }

    let (c, h, w) = (6, 4, 5);
    let (store, block) = cga(430, c);
    let x = random_tensor(&mut rng, &[c, h, w]);
    let mut perm: Vec<usize> = (0..h * w).collect();
    for i in (1..perm.len()).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let permute = |t: &Tensor| Tensor::from_fn(&[c, h, w], |i| t.data()[(i / (h * w)) * h * w + perm[i % (h * w)]]);
    let tape = Tape::new();
    let p = Bound::frozen(&tape, &store);
    let y = block.forward(&p, tape.constant(&x)).unwrap().to_tensor();
    let y_perm = block.forward(&p, tape.constant(&permute(&x))).unwrap().to_tensor();
    let perm_err = permute(&y).max_abs_diff(&y_perm);

    all(vec![
        Outcome::below(rows, 1e-12, "row_sum_err"),
        Outcome::below(shift, 1e-12, "shift_err"),
        Outcome::exact(leak, "two_hop_leak"),
        Outcome {
            passed: reached > 0,
            detail: format!("in_reach_responses={reached}"),
        },
        Outcome::below(perm_err, 1e-12, "cga_perm_err"),
    ])
}

// ---------------------------------------------------------------------- 5

const EPS: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

fn probe<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> Var<'t> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random_tensor(&mut rng, &y.shape());
    (y * tape.constant(&r)).sum()
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let x = random_tensor(&mut rng, &[4, 4, 4]);
    let mut parts = Vec::new();

    let (store, block) = cga(506, 4);
    let e = check_gradients(|t, x| probe(t, block.forward(&Bound::frozen(t, &store), x).unwrap(), 1), &x, EPS).unwrap();
    parts.push(Outcome::below(e, GRAD_TOL, "cga"));

    let (store, block) = twla(507, 4, 2, 3);
    let e = check_gradients(|t, x| probe(t, block.forward_map(&Bound::frozen(t, &store), x).unwrap(), 2), &x, EPS).unwrap();
    parts.push(Outcome::below(e, GRAD_TOL, "twla"));

    let (store, block) = irss(4, 508);
    let e = check_gradients(|t, x| probe(t, block.forward(&Bound::frozen(t, &store), x).unwrap(), 3), &x, EPS).unwrap();
    parts.push(Outcome::below(e, GRAD_TOL, "irss"));

    let mut store = ParamStore::new();
    let cfg = TwlaConfig {
        dim: 4,
        window: 4,
        neighbors: 3,
        geo_dim: 8,
        heads: 1,
    };
    let layer = TransformerLayer::new(&mut store, &mut ChaCha8Rng::seed_from_u64(509), "layer", cfg, LayerParts::default()).unwrap();
    perturb(&mut store, 510, 0.2);
    let e = check_gradients(|t, x| probe(t, layer.forward(&Bound::frozen(t, &store), x).unwrap(), 4), &x, EPS).unwrap();
    parts.push(Outcome::below(e, GRAD_TOL, "transformer_layer"));

    // Full tiny model with L1 loss. A fresh head is zero, which would hide
    // every upstream gradient, so all parameters are perturbed.
    let mut model = MatIrModel::build(&MatIrConfig::tiny(Task::Denoise, 1)).unwrap();
    perturb(&mut model.params, 511, 0.05);
    let image = Tensor::from_fn(&[3, 8, 8], |_| rng.gen_range(0.0..1.0));
    let target = Tensor::from_fn(&[3, 8, 8], |_| rng.gen_range(0.0..1.0));
    let e = check_gradients(
        |t, x| (model.forward_bound(&Bound::frozen(t, &model.params), x).unwrap() - t.constant(&target)).abs().mean(),
        &image,
        EPS,
    )
    .unwrap();
    parts.push(Outcome::below(e, GRAD_TOL, "matir_l1_input"));

    // Parameter gradients: central differences along one random direction per tensor.
    let loss_at = |m: &MatIrModel| -> f64 {
        let t = Tape::new();
        let out = m.forward_bound(&Bound::frozen(&t, &m.params), t.constant(&image)).unwrap();
        (out - t.constant(&target)).abs().mean().item()
    };
    let tape = Tape::new();
    let p = Bound::trainable(&tape, &model.params);
    let loss = (model.forward_bound(&p, tape.constant(&image)).unwrap() - tape.constant(&target)).abs().mean();
    tape.backward(loss).unwrap();
    let grads = p.grads(&tape);
    let mut worst = 0.0f64;
    for (idx, g) in grads.iter().enumerate() {
        let dir = uniform(&mut rng, g.len());
        let analytic: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        let shifted = |sign: f64| {
            let mut m = model.clone();
            for (v, d) in m.params.tensors_mut()[idx].data_mut().iter_mut().zip(&dir) {
                *v += sign * EPS * d;
            }
            loss_at(&m)
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * EPS);
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6));
    }
    parts.push(Outcome::below(worst, GRAD_TOL, "matir_l1_params"));
    all(parts)
}

// ------------------------------------------------------------- 6, 7, 8, 9

/// Deterministic synthetic photograph stand-in: shaded background, soft
/// edges, discs and a patch of oriented texture.
fn scene(seed: u64, size: usize) -> ImagePlane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let base: Vec<f64> = (0..3).map(|_| rng.gen_range(0.25..0.75)).collect();
    let slope: Vec<(f64, f64)> = (0..3).map(|_| (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3))).collect();
    let edges: Vec<(f64, f64, f64, [f64; 3])> = (0..rng.gen_range(2..5))
        .map(|_| {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let offset = rng.gen_range(0.2..0.8) * s;
            let soft = rng.gen_range(0.4..1.5);
            (angle, offset, soft, [0, 1, 2].map(|_| rng.gen_range(-0.25..0.25)))
        })
        .collect();
    let discs: Vec<(f64, f64, f64, [f64; 3])> = (0..rng.gen_range(1..3))
        .map(|_| {
            let (cx, cy) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
            (cx, cy, rng.gen_range(0.08..0.25) * s, [0, 1, 2].map(|_| rng.gen_range(-0.2..0.2)))
        })
        .collect();
    let tex_angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let tex_period = rng.gen_range(3.0..9.0);
    let tex_amp = rng.gen_range(0.03..0.1);
    let tex_centre = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
    ImagePlane::from_fn(size, size, 3, |x, y, c| {
        let (fx, fy) = (x as f64, y as f64);
        let mut v = base[c] + slope[c].0 * fx / s + slope[c].1 * fy / s;
        for (angle, offset, soft, col) in &edges {
            let d = fx * angle.cos() + fy * angle.sin() - offset;
            v += col[c] * (0.5 + 0.5 * (d / soft).tanh());
        }
        for (cx, cy, r, col) in &discs {
            let d = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt() - r;
            v += col[c] * (0.5 - 0.5 * (d / 0.7).tanh());
        }
        let dt = ((fx - tex_centre.0).powi(2) + (fy - tex_centre.1).powi(2)).sqrt();
        let phase = (fx * tex_angle.cos() + fy * tex_angle.sin()) * std::f64::consts::TAU / tex_period;
        v += tex_amp * phase.sin() * (-(dt / (0.25 * s)).powi(2)).exp();
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    })
}

fn criterion_6() -> Outcome {
    let image = scene(6, 32);
    let mut model = MatIrModel::build(&MatIrConfig::tiny(Task::Denoise, 1)).unwrap();
    let data = Dataset::from_images(vec![image], vec![]);
    let spec = TrainSpec {
        patch: 32,
        batch: 1,
        augment: false,
        resample_noise: false,
        max_steps: 2000,
        milestones: vec![],
        val_every: 500,
        threads: 1,
        ..TrainSpec::default()
    };
    let report = train(&mut model, &data, Degradation::GaussianNoise(15.0), &spec).unwrap();
    let losses = report.losses();
    let first = losses.first().copied().unwrap_or(f64::NAN);
    let last = losses.last().copied().unwrap_or(f64::NAN);
    let db = report.final_val_psnr().unwrap();
    Outcome {
        passed: db > 40.0,
        detail: format!(
            "training_psnr={db:.3} dB (> 40); start={:.3} dB; loss {first:.5} -> {last:.5} ({:.1}x)",
            report.records[0].val_psnr.unwrap(),
            first / last
        ),
    }
}

/// Twenty training and five held-out 64×64 patches, each cut from its own
/// scene.
fn patches() -> (Vec<ImagePlane>, Vec<ImagePlane>) {
    let train = (0..20).map(|i| scene(1000 + i, 64)).collect();
    let held = (0..5).map(|i| scene(2000 + i, 64)).collect();
    (train, held)
}

fn fit(config: &MatIrConfig, kind: Degradation, steps: usize, seed: u64) -> (MatIrModel, TrainReport) {
    let (train_set, _) = patches();
    let mut model = MatIrModel::build(config).unwrap();
    let data = Dataset::from_images(train_set, vec![]);
    let spec = TrainSpec {
        patch: 32,
        batch: 4,
        max_steps: steps,
        milestones: vec![],
        val_every: steps,
        seed,
        threads: 1,
        ..TrainSpec::default()
    };
    let report = train(&mut model, &data, kind, &spec).unwrap();
    (model, report)
}

fn denoise_gain(model: &MatIrModel) -> (f64, f64) {
    let (_, held) = patches();
    let (mut restored, mut noisy) = (0.0, 0.0);
    for (i, clean) in held.iter().enumerate() {
        let spec = DegradationSpec::noise(25.0, 7000 + i as u64);
        restored += evaluate_image(model, clean, &spec, false).unwrap().metrics.psnr;
        noisy += psnr(&degrade(clean, &spec).unwrap(), clean, false).unwrap();
    }
    (restored / held.len() as f64, noisy / held.len() as f64)
}

fn criterion_7() -> Outcome {
    let (model, _) = fit(&MatIrConfig::tiny(Task::Denoise, 1), Degradation::GaussianNoise(25.0), 500, 7);
    let (restored, noisy) = denoise_gain(&model);
    Outcome {
        passed: restored - noisy >= 2.0,
        detail: format!("restored={restored:.3} dB noisy={noisy:.3} dB gain={:+.3} dB (>= +2)", restored - noisy),
    }
}

fn criterion_8() -> Outcome {
    let (model, _) = fit(&MatIrConfig::tiny(Task::Sr, 2), Degradation::BicubicDown(2), 500, 8);
    let (_, held) = patches();
    let (mut out, mut base) = (0.0, 0.0);
    for (i, clean) in held.iter().enumerate() {
        let row = evaluate_image(&model, clean, &DegradationSpec::bicubic(2, i as u64), true).unwrap();
        out += row.metrics.psnr;
        base += row.baseline.unwrap().psnr;
    }
    let (out, base) = (out / held.len() as f64, base / held.len() as f64);
    Outcome {
        passed: out - base >= 0.3,
        detail: format!("model={out:.3} dB bicubic={base:.3} dB gain={:+.3} dB (>= +0.3)", out - base),
    }
}

fn criterion_9() -> Outcome {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..5u64 {
        let run = |dirs: usize| {
            let config = MatIrConfig {
                scan_directions: dirs,
                seed,
                ..MatIrConfig::tiny(Task::Denoise, 1)
            };
            let (model, _) = fit(&config, Degradation::GaussianNoise(25.0), 300, seed);
            denoise_gain(&model).0
        };
        let (four, one) = (run(4), run(1));
        wins += usize::from(four >= one);
        pairs.push(format!("{:+.3}", four - one));
    }
    Outcome {
        passed: wins >= 4,
        detail: format!("four_dir_wins={wins}/5 (>= 4); deltas_db=[{}]", pairs.join(", ")),
    }
}

// --------------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let a = scene(10, 32);
    let b = ImagePlane::new(32, 32, 3, a.pixels.iter().map(|&v| if v < 255 { v + 1 } else { v - 1 }).collect()).unwrap();
    let want = 10.0 * (255.0f64 * 255.0).log10();
    let db = psnr(&a, &b, false).unwrap();

    let config = MatIrConfig::tiny(Task::Sr, 2);
    let mut model = MatIrModel::build(&config).unwrap();
    perturb(&mut model.params, 1010, 0.05);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.ckpt");
    model.save_checkpoint(&path).unwrap();
    let loaded = MatIrModel::load_checkpoint(&path, &config).unwrap();
    let x = Tensor::from_fn(&[3, 8, 8], |i| ((i * 37) % 101) as f64 / 101.0);
    let divergence = model.forward(&x).unwrap().max_abs_diff(&loaded.forward(&x).unwrap());

    let run = || -> Result<String> {
        let mut m = MatIrModel::build(&MatIrConfig::tiny(Task::Denoise, 1))?;
        let data = Dataset::from_images(vec![scene(11, 24), scene(12, 24)], vec![]);
        let spec = TrainSpec {
            patch: 16,
            batch: 2,
            max_steps: 4,
            val_every: 2,
            seed: 3,
            threads: 1,
            ..TrainSpec::default()
        };
        Ok(train(&mut m, &data, Degradation::GaussianNoise(25.0), &spec)?.to_text())
    };
    let same = run().unwrap() == run().unwrap();
    all(vec![
        Outcome {
            passed: (db - 48.13).abs() <= 0.01 && (db - want).abs() < 1e-9,
            detail: format!("psnr_off_by_one={db:.4} dB (48.13 ± 0.01, formula {want:.4})"),
        },
        Outcome::exact((ssim(&a, &a).unwrap() - 1.0).abs(), "ssim_identity_err"),
        Outcome::below(divergence, 1e-5, "checkpoint_divergence"),
        Outcome {
            passed: same,
            detail: format!("same_seed_reports_identical={same}"),
        },
    ])
}

// ------------------------------------------------------------------ driver

type Criterion = (u8, &'static str, f64, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    (1, "rnn_cnn_duality", 5.0, criterion_1),
    (2, "zoh_correctness", 5.0, criterion_2),
    (3, "scan_path_algebra", 30.0, criterion_3),
    (4, "attention_properties", 30.0, criterion_4),
    (5, "gradient_fidelity", 120.0, criterion_5),
    (6, "overfit_oracle", 600.0, criterion_6),
    (7, "denoise_generalization", 1800.0, criterion_7),
    (8, "sr_generalization", 1800.0, criterion_8),
    (9, "ablation_direction", 7200.0, criterion_9),
    (10, "metric_oracles", 60.0, criterion_10),
];

fn main() -> ExitCode {
    let picked: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let nightly = std::env::var("MATIR_NIGHTLY").is_ok_and(|v| v == "1");
    let mut failed = 0;
    for (id, name, budget, run) in CRITERIA {
        let selected = if picked.is_empty() { id != 9 || nightly } else { picked.contains(&id) };
        if !selected {
            if picked.is_empty() {
                println!("SKIP {id:>2} {name:<24} long tier; set MATIR_NIGHTLY=1 or pass {id}");
            }
            continue;
        }
        let t = Instant::now();
        let outcome = run();
        let secs = t.elapsed().as_secs_f64();
        let passed = outcome.passed && secs < budget;
        failed += usize::from(!passed);
        println!(
            "{} {id:>2} {name:<24} {} [{secs:.1}s of {budget:.0}s]",
            if passed { "PASS" } else { "FAIL" },
            outcome.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
