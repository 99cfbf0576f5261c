use denviscom::denviscom::{fuse_lr, unfuse_lr, BlockDims, DenViscomBlock, PatchSet};
use denviscom::nn::{Init, ParamStore};
use denviscom::ssm::ScanMode;
use denviscom_tensor::{grad_check, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIMS: BlockDims = BlockDims {
    embed: 8,
    state: 4,
    kernel: 3,
    mlp_ratio: 2,
};

fn random(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn build(seed: u64, dims: BlockDims, no_fusion: bool) -> (DenViscomBlock, ParamStore) {
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let block = DenViscomBlock::new(&mut store, &mut init, "b", dims, ScanMode::Selective, no_fusion, false);
    (block, store)
}

fn run(block: &DenViscomBlock, store: &ParamStore, x: &Tensor) -> Tensor {
    let tape = Tape::new();
    let out = block
        .forward(&store.bind(&tape, false), &PatchSet::new(tape.constant(x.clone())).unwrap())
        .unwrap();
    (*out.data().value()).clone()
}

/// Swaps the left and right halves of the patch axis.
fn swap_sides(x: &Tensor) -> Tensor {
    let half = x.numel() / 2;
    let d = x.data();
    let data = d[half..].iter().chain(&d[..half]).copied().collect();
    Tensor::new(x.shape(), data).unwrap()
}

/// Maps channel `i` of a fused `2c` axis to the channel it occupies after the
/// sides trade places.
fn flip(i: usize, c: usize) -> usize {
    (i + c) % (2 * c)
}

/// Reorders axes of `t` that index fused scan channels.
fn permute_channels(t: &Tensor, rows: bool, cols: bool, c: usize) -> Tensor {
    let s = t.shape();
    let (r, k) = if s.len() == 1 { (s[0], 1) } else { (s[0], s[1]) };
    Tensor::from_fn(s, |idx| {
        let (i, j) = (idx / k, idx % k);
        let si = if rows { flip(i, c) } else { i };
        let sj = if cols && s.len() > 1 { flip(j, c) } else { j };
        debug_assert!(si < r);
        t.data()[si * k + sj]
    })
}

/// The same block with the two sides' roles exchanged: per-side conv
/// branches swapped and every fused scan channel moved to its mirror.
fn mirrored(store: &ParamStore, c: usize) -> ParamStore {
    let mut out = store.clone();
    let get = |n: &str| store.by_name(n).unwrap().clone();
    let mut values: Vec<(String, Tensor)> = Vec::new();
    for e in store.entries() {
        let name = e.name.as_str();
        let v = if let Some(rest) = name.strip_prefix("b.conv_l.") {
            get(&format!("b.conv_r.{rest}"))
        } else if let Some(rest) = name.strip_prefix("b.conv_r.") {
            get(&format!("b.conv_l.{rest}"))
        } else if let Some(rest) = name.strip_prefix("b.scan.") {
            match rest {
                "linear.weight" | "ssm.w_delta" => permute_channels(&e.value, true, true, c),
                "linear.bias" | "kernel" | "conv_bias" | "ssm.a_log" | "ssm.b_delta" => {
                    permute_channels(&e.value, true, false, c)
                }
                "ssm.w_b" | "ssm.w_c" => permute_channels(&e.value, false, true, c),
                "ssm.b_b" | "ssm.b_c" => e.value.clone(),
                other => panic!("unhandled scan parameter {other}"),
            }
        } else {
            e.value.clone()
        };
        values.push((name.to_string(), v));
    }
    out.load_values(values.iter().map(|(n, v)| (n.as_str(), v))).unwrap();
    out
}

#[test]
fn swapping_sides_with_mirrored_weights_swaps_outputs() {
    for seed in 1..=3 {
        let (block, store) = build(seed, DIMS, false);
        let x = random(seed + 10, &[4, 8, 8]);
        let base = run(&block, &store, &x);
        let mirror = run(&block, &mirrored(&store, DIMS.embed / 2), &swap_sides(&x));
        assert!(swap_sides(&mirror).max_abs_diff(&base).unwrap() < 1e-12);
        // without the weight mirror the block is not side-symmetric
        let plain = run(&block, &store, &swap_sides(&x));
        assert!(swap_sides(&plain).max_abs_diff(&base).unwrap() > 1e-9);
    }
}

/// Swaps the two right-hand patches of a four-patch set.
fn repair(x: &Tensor) -> Tensor {
    let per = x.numel() / 4;
    let d = x.data();
    let data = [&d[..2 * per], &d[3 * per..], &d[2 * per..3 * per]].concat();
    Tensor::new(x.shape(), data).unwrap()
}

#[test]
fn fused_block_depends_on_the_pairing() {
    let dims = BlockDims {
        embed: 16,
        ..DIMS
    };
    for seed in 1..=5 {
        let (block, store) = build(seed, dims, false);
        let x = random(seed, &[4, 16, 16]);
        let base = run(&block, &store, &x);
        let re = repair(&run(&block, &store, &repair(&x)));
        let half = base.numel() / 2;
        let left = base.data()[..half]
            .iter()
            .zip(&re.data()[..half])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(left > 1e-6, "seed {seed}: left outputs moved only {left:e}");
    }
}

#[test]
fn unfused_block_ignores_the_pairing() {
    for seed in 1..=5 {
        let (block, store) = build(seed, DIMS, true);
        let x = random(seed, &[4, 8, 8]);
        let base = run(&block, &store, &x);
        let re = repair(&run(&block, &store, &repair(&x)));
        assert!(base.max_abs_diff(&re).unwrap() < 1e-12);
    }
}

#[test]
fn unfused_block_matches_single_patch_runs() {
    // each side processed alone against a zero partner of the other side
    let (block, store) = build(4, DIMS, true);
    let x = random(9, &[4, 8, 8]);
    let base = run(&block, &store, &x);
    let per = 64;
    for (patch, pair_slot) in [(0usize, 0usize), (1, 0), (2, 1), (3, 1)] {
        let mut data = vec![0.0; 2 * per];
        data[pair_slot * per..(pair_slot + 1) * per].copy_from_slice(&x.data()[patch * per..(patch + 1) * per]);
        let alone = run(&block, &store, &Tensor::new(&[2, 8, 8], data).unwrap());
        let got = &alone.data()[pair_slot * per..(pair_slot + 1) * per];
        let want = &base.data()[patch * per..(patch + 1) * per];
        let dev = got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-12, "patch {patch} differs by {dev:e}");
    }
}

fn weighted<'t>(y: Var<'t>, seed: u64) -> denviscom::Result<Var<'t>> {
    let w = y.constant(random(seed ^ 0xF00D, &y.shape()));
    Ok(y.mul(w)?.sum()?)
}

#[test]
fn block_gradients_match_finite_differences() {
    for no_fusion in [false, true] {
        for seed in 1..=5 {
            let (block, store) = build(seed, DIMS, no_fusion);
            let x = random(seed, &[2, 8, 8]);
            let report = grad_check(
                |v| {
                    let out = block.forward(&store.bind(v.tape(), false), &PatchSet::new(v)?)?;
                    weighted(out.data(), seed)
                },
                &x,
                1e-5,
                1e-3,
            )
            .unwrap();
            assert!(report.passed, "seed {seed}: {:.3e}", report.max_rel_dev);
            for e in store.entries() {
                let id = store.id(&e.name).unwrap();
                let report = grad_check(
                    |v| {
                        let input = PatchSet::new(v.constant(x.clone()))?;
                        let out = block.forward(&store.bind_replacing(v.tape(), id, v), &input)?;
                        weighted(out.data(), seed)
                    },
                    &e.value,
                    1e-5,
                    1e-3,
                )
                .unwrap();
                assert!(report.passed, "{} seed {seed}: {:.3e}", e.name, report.max_rel_dev);
            }
        }
    }
}

#[test]
fn identity_conv_branch_reduces_to_silu() {
    let (block, mut store) = build(2, DIMS, false);
    let c = DIMS.embed;
    let eye = Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
    let delta_kernel = Tensor::from_fn(&[c, 3], |i| if i % 3 == 1 { 1.0 } else { 0.0 });
    store
        .load_values([("b.scan.linear.weight", &eye), ("b.scan.kernel", &delta_kernel)])
        .unwrap();
    let tape = Tape::new();
    let x = tape.constant(random(5, &[2, c, 6]));
    let u = block.scan.pre_scan(&store.bind(&tape, false), x).unwrap();
    let want = x.value().map(|v| v / (1.0 + (-v).exp()));
    assert!(u.value().max_abs_diff(&want).unwrap() < 1e-15);
}

#[test]
fn output_keeps_patch_shape() {
    let (block, store) = build(1, DIMS, false);
    for p in [2, 4, 6] {
        let out = run(&block, &store, &random(3, &[p, 5, 8]));
        assert_eq!(out.shape(), [p, 5, 8]);
        assert!(out.data().iter().all(|v| v.is_finite()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fuse_then_unfuse_is_identity(pairs in 1usize..4, c in 1usize..5, l in 1usize..7, seed in any::<u64>()) {
        let tape = Tape::new();
        let x = tape.constant(random(seed, &[2 * pairs, c, l]));
        let back = unfuse_lr(fuse_lr(x).unwrap()).unwrap();
        prop_assert_eq!(&*back.value(), &*x.value());
    }
}
