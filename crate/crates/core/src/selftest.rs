//! Built-in invariant and oracle checks behind `denviscom selftest`.
//!
//! Each check is self-contained: its oracles are written here from the
//! definitions rather than shared with the code under test.

use std::rc::Rc;
use std::time::Instant;

use denviscom_tensor::{concat, grad_check, grad_check_indices, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionBlock;
use crate::checkpoint::Checkpoint;
use crate::config::{Flags, ModelConfig};
use crate::denviscom::{BlockDims, DenViscomBlock, PatchSet};
use crate::error::{Error, Result};
use crate::formats::{decode_flo, decode_pfm, encode_flo, encode_pfm};
use crate::heads::{disparity_correspondence, disparity_match_1d, flow_correspondence, flow_global_match, Task};
use crate::model::Model;
use crate::nn::{Init, ParamStore};
use crate::ssm::{lti_convolve, lti_kernel, scan_recurrence, selective_scan, zoh_discretize, ScanMode, SsmParams};
use crate::train::toy_sample;

/// Criteria covered by [`run_all`].
pub const SELFTEST_CRITERIA: [u8; 7] = [1, 2, 3, 4, 5, 9, 10];

pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-3;
pub const END_TO_END_TOL: f64 = 2e-3;

#[derive(Debug, Clone)]
pub struct Outcome {
    pub criterion: u8,
    pub title: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Outcome {
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} {} {} ({}; {:.2}s)",
            self.criterion,
            if self.passed { "PASS" } else { "FAIL" },
            self.title,
            self.detail,
            self.seconds
        )
    }
}

type Check = fn() -> Result<String>;

fn check_for(criterion: u8) -> Option<(&'static str, Check, f64)> {
    Some(match criterion {
        1 => ("scan/convolution duality", duality as Check, 5.0),
        2 => ("zoh discretization", zoh, 1.0),
        3 => ("gradient suite", || gradient_suite(GRAD_TOL, END_TO_END_TOL), 60.0),
        4 => ("matching-head oracles", heads, f64::INFINITY),
        5 => ("fusion sensitivity", fusion, f64::INFINITY),
        9 => ("ablation flags", ablations, f64::INFINITY),
        10 => ("formats and checkpoints", formats, f64::INFINITY),
        _ => return None,
    })
}

/// Runs one criterion; `None` for criteria that need training.
pub fn run(criterion: u8) -> Option<Outcome> {
    let (title, check, budget) = check_for(criterion)?;
    let start = Instant::now();
    let result = check();
    let seconds = start.elapsed().as_secs_f64();
    let (passed, detail) = match result {
        Ok(d) if seconds < budget => (true, d),
        Ok(d) => (false, format!("{d}; over the {budget}s budget")),
        Err(e) => (false, e.to_string()),
    };
    Some(Outcome {
        criterion,
        title,
        passed,
        detail,
        seconds,
    })
}

pub fn run_all() -> Vec<Outcome> {
    SELFTEST_CRITERIA.iter().filter_map(|&c| run(c)).collect()
}

fn fail(msg: String) -> Error {
    Error::Contract(msg)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn duality() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xD0A1);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let n = rng.random_range(1..=8);
        let channels = rng.random_range(1..=4);
        let m = rng.random_range(1..=64);
        for _ in 0..channels {
            let ssm = SsmParams {
                a: (0..n).map(|_| -rng.random_range(0.0..3.0)).collect(),
                b: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                c: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                delta: rng.random_range(1e-3..1.0),
            }
            .discretize()?;
            let x: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = scan_recurrence(&ssm, &x)?;
            let yc = lti_convolve(&x, &lti_kernel(&ssm, m)?);
            let scale = y.iter().fold(1.0f64, |s, v| s.max(v.abs()));
            let dev = y.iter().zip(&yc).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
            worst = worst.max(dev);
            if dev > 1e-10 {
                return Err(fail(format!("case {case}: relative deviation {dev:.3e}")));
            }
        }
    }
    Ok(format!("200 systems, worst relative deviation {worst:.1e}"))
}

/// `exp(z)` and `expm1(z) / z` by their Taylor series.
fn series_zoh(z: f64) -> (f64, f64) {
    let (mut e, mut r, mut term) = (1.0, 1.0, 1.0);
    for k in 1..60 {
        term *= z / k as f64;
        e += term;
        r += term / (k + 1) as f64;
    }
    (e, r)
}

fn zoh() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x20B);
    let mut worst = 0.0f64;
    let mut limit_cases = 0;
    for case in 0..100 {
        let n = rng.random_range(1..=8);
        let delta = rng.random_range(1e-3..2.0);
        let mut a: Vec<f64> = (0..n).map(|_| -rng.random_range(0.0..4.0)).collect();
        if case % 4 == 0 {
            a[0] = -rng.random_range(0.0..1e-8) / delta;
            limit_cases += 1;
        }
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (a_bar, b_bar) = zoh_discretize(&a, &b, delta)?;
        for i in 0..n {
            let (e, r) = series_zoh(delta * a[i]);
            let da = (a_bar[i] - e).abs() / e.abs().max(1.0);
            let want = r * delta * b[i];
            let db = (b_bar[i] - want).abs() / want.abs().max(1e-300);
            worst = worst.max(da).max(db);
            if da > 1e-10 || db > 1e-10 {
                return Err(fail(format!("case {case} entry {i}: deviation {:.3e}", da.max(db))));
            }
        }
    }
    Ok(format!("100 systems ({limit_cases} near the limit), worst deviation {worst:.1e}"))
}

fn weighted_sum<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let w = y.constant(random(&mut rng, &y.shape(), -1.0, 1.0));
    Ok(y.mul(w)?.sum()?)
}

type OpFn = Box<dyn for<'t> Fn(Var<'t>, &mut ChaCha8Rng) -> Result<Var<'t>>>;

/// Every differentiable op, each driven through one checked input.
fn op_cases() -> Vec<(&'static str, Vec<usize>, OpFn)> {
    fn c<'t>(x: Var<'t>, rng: &mut ChaCha8Rng, shape: &[usize]) -> Var<'t> {
        x.constant(random(rng, shape, -1.0, 1.0))
    }
    let allowed: Rc<[bool]> = (0..9).map(|i| i % 3 <= i / 3).collect();
    let cases: Vec<(&'static str, Vec<usize>, OpFn)> = vec![
        ("matmul", vec![3, 3], Box::new(|x, r| Ok(c(x, r, &[3, 3]).matmul(x)?.matmul(c(x, r, &[2, 3, 3]))?))),
        ("matmul_nt", vec![2, 5, 3], Box::new(|x, r| Ok(c(x, r, &[2, 4, 3]).matmul_nt(x)?.add(x.matmul_nt(x)?.narrow(1, 0, 4)?)?))),
        ("linear input", vec![2, 3, 4], Box::new(|x, r| Ok(x.linear(c(x, r, &[5, 4]), Some(c(x, r, &[5])))?))),
        ("linear weight", vec![5, 4], Box::new(|w, r| Ok(c(w, r, &[3, 4]).linear(w, None)?))),
        ("linear bias", vec![5], Box::new(|b, r| Ok(c(b, r, &[3, 4]).linear(c(b, r, &[5, 4]), Some(b))?))),
        ("add/sub/mul", vec![3, 4], Box::new(|x, r| {
            let k = c(x, r, &[3, 4]);
            Ok(x.mul(x)?.sub(k.mul(x)?)?.add(x)?.add_scalar(0.5)?.scale(1.5)?)
        })),
        ("add_lastdim", vec![4], Box::new(|b, r| Ok(c(b, r, &[3, 4]).add_lastdim(b)?.square()?))),
        ("mean", vec![3, 4], Box::new(|x, _| Ok(x.square()?.mean()?))),
        ("silu", vec![3, 4], Box::new(|x, _| Ok(x.scale(3.0)?.silu()?))),
        ("gelu", vec![3, 4], Box::new(|x, _| Ok(x.scale(3.0)?.gelu()?))),
        ("softplus", vec![3, 4], Box::new(|x, _| Ok(x.scale(4.0)?.softplus()?))),
        ("exp", vec![3, 4], Box::new(|x, _| Ok(x.exp()?))),
        ("relu", vec![3, 4], Box::new(|x, _| Ok(x.add_scalar(0.05)?.relu()?))),
        ("abs", vec![3, 4], Box::new(|x, _| Ok(x.add_scalar(0.05)?.abs()?))),
        ("softmax", vec![3, 5], Box::new(|x, _| Ok(x.scale(2.0)?.softmax_lastdim()?))),
        ("masked softmax", vec![2, 3, 3], Box::new(move |x, _| Ok(x.masked_softmax_lastdim(Rc::clone(&allowed))?))),
        ("layer_norm input", vec![3, 6], Box::new(|x, r| Ok(x.layer_norm(c(x, r, &[6]), c(x, r, &[6]), 1e-5)?))),
        ("layer_norm gamma", vec![6], Box::new(|g, r| Ok(c(g, r, &[3, 6]).layer_norm(g, c(g, r, &[6]), 1e-5)?))),
        ("layer_norm beta", vec![6], Box::new(|b, r| Ok(c(b, r, &[3, 6]).layer_norm(c(b, r, &[6]), b, 1e-5)?.square()?))),
        ("conv1d input", vec![2, 3, 7], Box::new(|x, r| Ok(x.depthwise_conv1d(c(x, r, &[3, 3]), c(x, r, &[3]))?))),
        ("conv1d kernel", vec![3, 5], Box::new(|k, r| Ok(c(k, r, &[2, 3, 7]).depthwise_conv1d(k, c(k, r, &[3]))?))),
        ("conv1d bias", vec![3], Box::new(|b, r| Ok(c(b, r, &[2, 3, 7]).depthwise_conv1d(c(b, r, &[3, 3]), b)?.square()?))),
        ("conv2d input", vec![2, 6, 5], Box::new(|x, r| Ok(x.conv2d(c(x, r, &[3, 2, 3, 3]), c(x, r, &[3]), 2, 1)?))),
        ("conv2d weight", vec![3, 2, 3, 3], Box::new(|w, r| Ok(c(w, r, &[2, 6, 5]).conv2d(w, c(w, r, &[3]), 1, 1)?))),
        ("conv2d bias", vec![3], Box::new(|b, r| Ok(c(b, r, &[2, 6, 5]).conv2d(c(b, r, &[3, 2, 1, 1]), b, 2, 0)?.square()?))),
        ("permute", vec![2, 3, 4], Box::new(|x, _| Ok(x.permute(&[1, 2, 0])?.square()?))),
        ("transpose", vec![2, 3, 4], Box::new(|x, _| Ok(x.transpose_last2()?.square()?))),
        ("narrow/halves/concat", vec![2, 4, 3], Box::new(|x, _| {
            let (a, b) = x.halves(1)?;
            Ok(concat(&[b, a.square()?, x.narrow(2, 1, 2)?.narrow(1, 0, 2)?.square()?], 2)?)
        })),
        ("gather/reshape", vec![3], Box::new(|x, _| {
            let idx: Rc<[usize]> = (0..12).map(|i| (i * 5) % 3).collect();
            Ok(x.gather(idx, &[4, 3])?.reshape(&[2, 6])?.square()?)
        })),
    ];
    let scan: Vec<(&'static str, Vec<usize>, OpFn)> = vec![
        ("selective_scan x", vec![2, 3, 5], Box::new(|x, r| {
            let (d, a, b, cc) = scan_inputs(x, r);
            Ok(selective_scan(x, d, a, b, cc)?)
        })),
        ("selective_scan delta", vec![2, 3, 5], Box::new(|d, r| {
            let (_, a, b, cc) = scan_inputs(d, r);
            let x = c(d, r, &[2, 3, 5]);
            Ok(selective_scan(x, d.softplus()?, a, b, cc)?)
        })),
        ("selective_scan a", vec![3, 4], Box::new(|a, r| {
            let (d, _, b, cc) = scan_inputs(a, r);
            let x = c(a, r, &[2, 3, 5]);
            Ok(selective_scan(x, d, a.exp()?.scale(-1.0)?, b, cc)?)
        })),
        ("selective_scan b", vec![2, 5, 4], Box::new(|b, r| {
            let (d, a, _, cc) = scan_inputs(b, r);
            let x = c(b, r, &[2, 3, 5]);
            Ok(selective_scan(x, d, a, b, cc)?)
        })),
        ("selective_scan c", vec![2, 5, 4], Box::new(|cc, r| {
            let (d, a, b, _) = scan_inputs(cc, r);
            let x = c(cc, r, &[2, 3, 5]);
            Ok(selective_scan(x, d, a, b, cc)?)
        })),
    ];
    cases.into_iter().chain(scan).collect()
}

/// Positive delta, negative `a` and random projections for `[2, 3, 5]` inputs with N = 4.
fn scan_inputs<'t>(v: Var<'t>, rng: &mut ChaCha8Rng) -> (Var<'t>, Var<'t>, Var<'t>, Var<'t>) {
    let delta = v.constant(random(rng, &[2, 3, 5], 0.05, 1.0));
    let a = v.constant(random(rng, &[3, 4], -2.0, -0.1));
    let b = v.constant(random(rng, &[2, 5, 4], -1.0, 1.0));
    let c = v.constant(random(rng, &[2, 5, 4], -1.0, 1.0));
    (delta, a, b, c)
}

fn require(name: &str, seed: u64, dev: f64, tol: f64) -> Result<()> {
    if dev <= tol {
        Ok(())
    } else {
        Err(fail(format!("{name} seed {seed}: deviation {dev:.3e} exceeds {tol:e}")))
    }
}

pub fn block_dims() -> BlockDims {
    BlockDims {
        embed: 8,
        state: 4,
        kernel: 3,
        mlp_ratio: 2,
    }
}

/// Gradient checks of every op, both block kinds and the reduced model
/// against central differences; `e2e_tol` applies to the whole model.
pub fn gradient_suite(tol: f64, e2e_tol: f64) -> Result<String> {
    let mut worst = 0.0f64;
    let mut checks = 0;
    for (name, shape, f) in op_cases() {
        for seed in SEEDS {
            let x = random(&mut ChaCha8Rng::seed_from_u64(seed), &shape, -1.0, 1.0);
            let report = grad_check(
                |v| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
                    weighted_sum(f(v, &mut rng)?, seed)
                },
                &x,
                FD_STEP,
                tol,
            )?;
            worst = worst.max(report.max_rel_dev);
            checks += 1;
            require(name, seed, report.max_rel_dev, tol)?;
        }
    }
    for seed in SEEDS {
        for dev in block_grad_devs(seed)? {
            worst = worst.max(dev);
            checks += 1;
            require("denviscom block", seed, dev, tol)?;
        }
        for dev in attention_grad_devs(seed)? {
            worst = worst.max(dev);
            checks += 1;
            require("attention block", seed, dev, tol)?;
        }
    }
    let mut worst_e2e = 0.0f64;
    for seed in SEEDS {
        for dev in end_to_end_grad_devs(seed)? {
            worst_e2e = worst_e2e.max(dev);
            checks += 1;
            require("end to end", seed, dev, e2e_tol)?;
        }
    }
    Ok(format!(
        "{checks} checks, worst deviation {worst:.1e}, end to end {worst_e2e:.1e}"
    ))
}

/// Deviations of the block gradient for the input and every parameter.
pub fn block_grad_devs(seed: u64) -> Result<Vec<f64>> {
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let block = DenViscomBlock::new(&mut store, &mut init, "b", block_dims(), ScanMode::Selective, false, false);
    let x = random(&mut ChaCha8Rng::seed_from_u64(seed), &[2, 8, 8], -1.0, 1.0);
    let mut devs = vec![
        grad_check(
            |v| {
                let tape = v.tape();
                let out = block.forward(&store.bind(tape, false), &PatchSet::new(v)?)?;
                weighted_sum(out.data(), seed)
            },
            &x,
            FD_STEP,
            GRAD_TOL,
        )?
        .max_rel_dev,
    ];
    for entry in store.entries() {
        let id = store.id(&entry.name).expect("registered");
        let report = grad_check(
            |v| {
                let p = store.bind_replacing(v.tape(), id, v);
                let input = PatchSet::new(v.constant(x.clone()))?;
                weighted_sum(block.forward(&p, &input)?.data(), seed)
            },
            &entry.value,
            FD_STEP,
            GRAD_TOL,
        )?;
        devs.push(report.max_rel_dev);
    }
    Ok(devs)
}

/// Deviations of the attention block gradient at L = 4, E = 8, two heads.
pub fn attention_grad_devs(seed: u64) -> Result<Vec<f64>> {
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let block = AttentionBlock::new(&mut store, &mut init, "a", 8, 2, 2, &Flags::default())?;
    let x = random(&mut ChaCha8Rng::seed_from_u64(seed), &[2, 4, 8], -1.0, 1.0);
    let mut devs = vec![
        grad_check(
            |v| {
                let out = block.forward(&store.bind(v.tape(), false), &PatchSet::new(v)?)?;
                weighted_sum(out.data(), seed)
            },
            &x,
            FD_STEP,
            GRAD_TOL,
        )?
        .max_rel_dev,
    ];
    for entry in store.entries() {
        let id = store.id(&entry.name).expect("registered");
        let report = grad_check(
            |v| {
                let p = store.bind_replacing(v.tape(), id, v);
                let input = PatchSet::new(v.constant(x.clone()))?;
                weighted_sum(block.forward(&p, &input)?.data(), seed)
            },
            &entry.value,
            FD_STEP,
            GRAD_TOL,
        )?;
        devs.push(report.max_rel_dev);
    }
    Ok(devs)
}

/// Probes of the reduced model's full-resolution output, contracted with
/// fixed weights, with respect to a few elements of parameters spread along
/// the network. Odd seeds use the flow head, even seeds the disparity head.
///
/// The L1 task loss is left out: its kinks at zero residual make central
/// differences unreliable for small gradient entries.
pub fn end_to_end_grad_devs(seed: u64) -> Result<Vec<f64>> {
    let task = if seed % 2 == 1 { Task::Flow } else { Task::Disparity };
    let model = Model::new(&ModelConfig::reduced(), seed)?;
    let sample = toy_sample(task, seed)?;
    let pair = model.prepare(&sample.img1, &sample.img2)?;
    let probes = ["encoder_l.stem", "pos.table", "stage1.0.mixer.scan", "stage2.0.attn.cross"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut devs = Vec::new();
    for probe in probes {
        let entry = model
            .params
            .entries()
            .iter()
            .find(|e| e.name.starts_with(probe))
            .ok_or_else(|| fail(format!("no parameter named {probe}*")))?;
        let id = model.params.id(&entry.name).expect("registered");
        let indices: Vec<usize> = (0..3).map(|_| rng.random_range(0..entry.value.numel())).collect();
        let report = grad_check_indices(
            |v| {
                let p = model.params.bind_replacing(v.tape(), id, v);
                weighted_sum(model.forward(&p, task, &pair)?, seed)
            },
            &entry.value,
            &indices,
            FD_STEP,
            END_TO_END_TOL,
        )?;
        devs.push(report.max_rel_dev);
    }
    Ok(devs)
}

/// Brute-force soft-argmax flow of `[D, h, w]` features.
fn oracle_flow(f1: &Tensor, f2: &Tensor) -> Vec<f64> {
    let (d, h, w) = (f1.shape()[0], f1.shape()[1], f1.shape()[2]);
    let n = h * w;
    let mut out = vec![0.0; 2 * n];
    for p in 0..n {
        let scores: Vec<f64> = (0..n)
            .map(|q| (0..d).map(|k| f1.data()[k * n + p] * f2.data()[k * n + q]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let ex: f64 = (0..n).map(|q| e[q] / z * (q % w) as f64).sum();
        let ey: f64 = (0..n).map(|q| e[q] / z * (q / w) as f64).sum();
        out[p] = ex - (p % w) as f64;
        out[n + p] = ey - (p / w) as f64;
    }
    out
}

/// Brute-force scanline disparity over columns `j <= i`.
fn oracle_disparity(f1: &Tensor, f2: &Tensor) -> Vec<f64> {
    let (d, h, w) = (f1.shape()[0], f1.shape()[1], f1.shape()[2]);
    let at = |f: &Tensor, k: usize, y: usize, x: usize| f.data()[(k * h + y) * w + x];
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for i in 0..w {
            let scores: Vec<f64> = (0..=i)
                .map(|j| (0..d).map(|k| at(f1, k, y, i) * at(f2, k, y, j)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            out[y * w + i] = i as f64 - (0..=i).map(|j| e[j] / z * j as f64).sum::<f64>();
        }
    }
    out
}

fn heads() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4EAD);
    let mut worst = 0.0f64;
    let tape = Tape::new();
    for h in 1..=4 {
        for w in 1..=4 {
            let d = rng.random_range(1..=5);
            let f1 = random(&mut rng, &[d, h, w], -2.0, 2.0);
            let f2 = random(&mut rng, &[d, h, w], -2.0, 2.0);
            let (v1, v2) = (tape.constant(f1.clone()), tape.constant(f2.clone()));
            let flow = flow_global_match(v1, v2)?;
            let disp = disparity_match_1d(v1, v2)?;
            for (got, want) in [(flow.value(), oracle_flow(&f1, &f2)), (disp.value(), oracle_disparity(&f1, &f2))] {
                let dev = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                worst = worst.max(dev);
                if dev > 1e-12 {
                    return Err(fail(format!("{h}x{w} grid: head differs from oracle by {dev:.3e}")));
                }
            }
            let fp = flow_correspondence(v1, v2)?;
            let dp = disparity_correspondence(v1, v2)?;
            for probs in [fp.value(), dp.value()] {
                let n = *probs.shape().last().unwrap();
                if let Some(row) = probs.data().chunks(n).position(|r| (r.iter().sum::<f64>() - 1.0).abs() > 1e-9) {
                    return Err(fail(format!("{h}x{w} grid: probability row {row} does not sum to 1")));
                }
            }
            let masked_nonzero = dp.value().data().iter().enumerate().any(|(k, &p)| k % w > (k / w) % w && p != 0.0);
            if masked_nonzero {
                return Err(fail(format!("{h}x{w} grid: a masked disparity probability is nonzero")));
            }
        }
    }
    for pair in 0..100 {
        let (d, h, w) = (rng.random_range(1..=8), rng.random_range(1..=6), rng.random_range(1..=12));
        let scale = rng.random_range(0.1..20.0);
        let f1 = tape.constant(random(&mut rng, &[d, h, w], -scale, scale));
        let f2 = tape.constant(random(&mut rng, &[d, h, w], -scale, scale));
        let disp = disparity_match_1d(f1, f2)?;
        if let Some(v) = disp.value().data().iter().find(|&&v| !(v >= 0.0)) {
            return Err(fail(format!("pair {pair}: disparity {v} is negative")));
        }
    }
    Ok(format!("16 grids within {worst:.1e}, 100 non-negative disparity maps"))
}

/// `[p, L, E]` block input whose first half are left patches.
fn block_input(rng: &mut ChaCha8Rng, p: usize, l: usize, e: usize) -> Tensor {
    random(rng, &[p, l, e], -1.0, 1.0)
}

/// Swaps the two right-side patches of a four-patch input.
pub fn swap_right_patches(x: &Tensor) -> Tensor {
    let per = x.numel() / 4;
    let mut data = x.data().to_vec();
    let (a, b) = data.split_at_mut(3 * per);
    a[2 * per..].swap_with_slice(&mut b[..per]);
    Tensor::new(x.shape(), data).expect("same shape")
}

/// Max-abs change of the left outputs and of the (re-paired) right outputs
/// when the right patches are swapped.
pub fn pairing_sensitivity(no_fusion: bool, seed: u64, dims: BlockDims, seq_len: usize) -> Result<(f64, f64)> {
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let block = DenViscomBlock::new(&mut store, &mut init, "b", dims, ScanMode::Selective, no_fusion, false);
    let x = block_input(&mut ChaCha8Rng::seed_from_u64(seed), 4, seq_len, dims.embed);
    let run = |input: &Tensor| -> Result<Tensor> {
        let tape = Tape::new();
        let out = block.forward(&store.bind(&tape, false), &PatchSet::new(tape.constant(input.clone()))?)?;
        Ok((*out.data().value()).clone())
    };
    let base = run(&x)?;
    let swapped = swap_right_patches(&run(&swap_right_patches(&x))?);
    let half = base.numel() / 2;
    let diff = |lo: usize, hi: usize| {
        base.data()[lo..hi]
            .iter()
            .zip(&swapped.data()[lo..hi])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    };
    Ok((diff(0, half), diff(half, 2 * half)))
}

/// Block of the reduced model, run on its 7x7 second-stage patches.
fn fusion() -> Result<String> {
    let cfg = ModelConfig::reduced();
    let dims = BlockDims {
        embed: cfg.embed,
        state: cfg.state_n,
        kernel: cfg.conv_kernel,
        mlp_ratio: cfg.mlp_ratio,
    };
    let seq = cfg.patch_side_stage2 * cfg.patch_side_stage2;
    let mut fused_min = f64::INFINITY;
    let mut lone_max = 0.0f64;
    for seed in SEEDS {
        let (l, r) = pairing_sensitivity(false, seed, dims, seq)?;
        fused_min = fused_min.min(l.min(r));
        let (l, r) = pairing_sensitivity(true, seed, dims, seq)?;
        lone_max = lone_max.max(l.max(r));
    }
    if fused_min <= 1e-6 {
        return Err(fail(format!("fused block ignores the pairing (change {fused_min:.3e})")));
    }
    if lone_max > 1e-12 {
        return Err(fail(format!("no_fusion block depends on the pairing (change {lone_max:.3e})")));
    }
    Ok(format!("fused change >= {fused_min:.2e}, no_fusion change {lone_max:.1e}"))
}

/// The ablation variants with their expected parameter deficit relative to
/// the full model, in attention sublayers per attention block.
pub fn ablation_variants() -> Vec<(&'static str, Flags, usize)> {
    let f = Flags::default;
    vec![
        ("full", f(), 0),
        ("no_self", Flags { no_self: true, ..f() }, 1),
        ("no_cross", Flags { no_cross: true, ..f() }, 1),
        ("no_attention", Flags { no_attention: true, ..f() }, 2),
        ("no_fusion", Flags { no_fusion: true, ..f() }, 0),
    ]
}

fn ablations() -> Result<String> {
    let base = ModelConfig::reduced();
    let sample = toy_sample(Task::Flow, 1)?;
    let blocks = base.depth_n + base.stage2_depth();
    let full = Model::new(&base, 3)?.params.num_scalars();
    let sub = AttentionBlock::sublayer_param_count(base.embed);
    for (name, flags, missing) in ablation_variants() {
        let cfg = ModelConfig { flags, ..base.clone() };
        let a = Model::new(&cfg, 3)?;
        let b = Model::new(&cfg, 3)?;
        let expected = full - missing * blocks * sub;
        if a.params.num_scalars() != expected {
            return Err(fail(format!(
                "{name}: {} parameters, expected {expected}",
                a.params.num_scalars()
            )));
        }
        let flow = a.infer(Task::Flow, &sample.img1, &sample.img2)?;
        let disp = a.infer(Task::Disparity, &sample.img1, &sample.img2)?;
        if flow.shape() != [2, 112, 112] || disp.shape() != [112, 112] {
            return Err(fail(format!("{name}: output shapes {:?} and {:?}", flow.shape(), disp.shape())));
        }
        if !flow.data().iter().chain(disp.data()).all(|v| v.is_finite()) {
            return Err(fail(format!("{name}: non-finite output")));
        }
        if b.infer(Task::Flow, &sample.img1, &sample.img2)? != flow {
            return Err(fail(format!("{name}: rebuilt model disagrees")));
        }
    }
    Ok(format!("5 variants, {blocks} blocks x {sub} parameters per sublayer"))
}

fn f32_field(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-500.0f32..500.0) as f64)
}

fn formats() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF10);
    let dir = std::env::temp_dir().join(format!("denviscom-selftest-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(crate::error::io_err(&dir))?;
    let result = (|| -> Result<String> {
        for case in 0..10 {
            let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
            let flow = f32_field(&mut rng, &[2, h, w]);
            let path = dir.join("f.flo");
            crate::formats::write_flo(&flow, &path)?;
            let back = crate::formats::read_flo(&path)?;
            if back != flow || decode_flo(&encode_flo(&flow)?, &path)? != flow {
                return Err(fail(format!("flo case {case} is not bit-exact")));
            }
            let disp = f32_field(&mut rng, &[h, w]);
            let path = dir.join("d.pfm");
            crate::formats::write_pfm(&disp, &path)?;
            if crate::formats::read_pfm(&path)? != disp || decode_pfm(&encode_pfm(&disp)?, &path)? != disp {
                return Err(fail(format!("pfm case {case} is not bit-exact")));
            }
        }
        let ckpt = Checkpoint::from_model(&Model::new(&ModelConfig::reduced(), 9)?, Task::Flow);
        let bytes = ckpt.to_bytes();
        if Checkpoint::from_bytes(&bytes)?.to_bytes() != bytes {
            return Err(fail("checkpoint bytes change across a round trip".into()));
        }
        let path = dir.join("m.ckpt");
        ckpt.save(&path)?;
        Checkpoint::load(&path)?.save(&path)?;
        if std::fs::read(&path).map_err(crate::error::io_err(&path))? != bytes {
            return Err(fail("saved checkpoint changes after load and save".into()));
        }
        Ok(format!("10 flo and pfm fields, checkpoint of {} bytes", bytes.len()))
    })();
    let _ = std::fs::remove_dir_all(&dir);
    result
}
