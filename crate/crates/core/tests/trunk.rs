use denviscom::config::ModelConfig;
use denviscom::heads::Task;
use denviscom::model::Model;
use denviscom::nn::{Bound, ParamStore};
use denviscom::trunk::{add_pos_and_concat, patchify, repatch, unpatchify, PatchGrid, Trunk};
use denviscom_tensor::{grad_check, grad_check_indices, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small enough for exhaustive gradient checks: 16x16 images, 2x2 feature map.
fn tiny() -> ModelConfig {
    ModelConfig {
        embed: 8,
        encoder_channels: vec![4, 4, 8],
        patch_side_stage1: 2,
        patch_side_stage2: 1,
        depth_n: 1,
        heads_h: 1,
        state_n: 2,
        mlp_ratio: 2,
        ..ModelConfig::default()
    }
}

fn random(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn features(trunk: &Trunk, store: &ParamStore, a: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
    let tape = Tape::new();
    let out = trunk
        .forward(&store.bind(&tape, false), tape.constant(a.clone()), tape.constant(b.clone()))
        .unwrap();
    ((*out.left.value()).clone(), (*out.right.value()).clone())
}

#[test]
fn trunk_output_is_feature_resolution() {
    let cfg = tiny();
    let (trunk, store) = Trunk::build(&cfg, 1).unwrap();
    let (l, r) = features(&trunk, &store, &random(1, &[3, 32, 16]), &random(2, &[3, 32, 16]));
    assert_eq!(l.shape(), [8, 4, 2]);
    assert_eq!(r.shape(), [8, 4, 2]);
    assert!(l.data().iter().chain(r.data()).all(|v| v.is_finite()));
}

#[test]
fn trunk_is_deterministic_per_seed() {
    let cfg = tiny();
    let (a, b) = (random(1, &[3, 16, 16]), random(2, &[3, 16, 16]));
    let (t1, s1) = Trunk::build(&cfg, 7).unwrap();
    let (t2, s2) = Trunk::build(&cfg, 7).unwrap();
    let (t3, s3) = Trunk::build(&cfg, 8).unwrap();
    let x1 = features(&t1, &s1, &a, &b);
    let x2 = features(&t2, &s2, &a, &b);
    let x3 = features(&t3, &s3, &a, &b);
    assert_eq!(x1.0, x2.0);
    assert_eq!(x1.1, x2.1);
    assert!(x1.0.max_abs_diff(&x3.0).unwrap() > 1e-9);
}

#[test]
fn rejects_mismatched_or_unpadded_images() {
    let (trunk, store) = Trunk::build(&tiny(), 1).unwrap();
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let run = |a: &[usize], b: &[usize]| {
        trunk
            .forward(&p, tape.constant(Tensor::zeros(a)), tape.constant(Tensor::zeros(b)))
            .is_err()
    };
    assert!(run(&[3, 16, 16], &[3, 16, 32]));
    assert!(run(&[3, 18, 16], &[3, 18, 16]));
    assert!(!run(&[3, 16, 16], &[3, 16, 16]));
}

#[test]
fn shared_encoders_drop_one_encoder() {
    let cfg = ModelConfig::reduced();
    let (_, separate) = Trunk::build(&cfg, 1).unwrap();
    let mut shared_cfg = cfg.clone();
    shared_cfg.flags.share_encoders = true;
    let (_, shared) = Trunk::build(&shared_cfg, 1).unwrap();
    let encoder: usize = separate
        .entries()
        .iter()
        .filter(|e| e.name.starts_with("encoder_r."))
        .map(|e| e.value.numel())
        .sum();
    assert!(encoder > 0);
    assert_eq!(separate.num_scalars() - shared.num_scalars(), encoder);
    assert!(shared.entries().iter().all(|e| !e.name.starts_with("encoder_r.")));
}

#[test]
fn separate_encoders_differ_on_identical_images() {
    let img = random(4, &[3, 16, 16]);
    for share in [true, false] {
        let mut cfg = tiny();
        cfg.flags.share_encoders = share;
        let (trunk, store) = Trunk::build(&cfg, 1).unwrap();
        let tape = Tape::new();
        let x = tape.constant(img.clone());
        let (l, r) = trunk.encode_pair(&store.bind(&tape, false), x, x).unwrap();
        assert_eq!(l.value().shape(), [8, 2, 2]);
        assert_eq!(l.value() == r.value(), share);
    }
}

#[test]
fn positional_embedding_is_additive_and_collects_both_gradients() {
    let (fl, fr, pos) = (random(1, &[4, 2, 3]), random(2, &[4, 2, 3]), random(3, &[4, 2, 3]));
    let tape = Tape::new();
    let out = add_pos_and_concat(tape.constant(fl.clone()), tape.constant(fr.clone()), tape.constant(pos.clone()))
        .unwrap()
        .value();
    assert_eq!(out.shape(), [2, 4, 2, 3]);
    let (left, right) = out.data().split_at(24);
    assert!(left.iter().zip(fl.data()).zip(pos.data()).all(|((o, f), p)| o - f == *p));
    assert!(right.iter().zip(fr.data()).all(|(o, f)| o != f));
    let w = random(4, &[2, 4, 2, 3]);
    let report = grad_check(
        |v| {
            let y = add_pos_and_concat(v.constant(fl.clone()), v.constant(fr.clone()), v)?;
            Ok::<_, denviscom::Error>(y.mul(v.constant(w.clone()))?.sum()?)
        },
        &pos,
        1e-5,
        1e-9,
    )
    .unwrap();
    assert!(report.passed);
    // d/dpos is the sum of both sides' weights
    for (i, a) in report.analytic.iter().enumerate() {
        assert!((a - (w.data()[i] + w.data()[24 + i])).abs() < 1e-12);
    }
    assert!(add_pos_and_concat(tape.constant(fl.clone()), tape.constant(fr), tape.constant(random(5, &[4, 3, 2]))).is_err());
}

#[test]
fn positional_table_tiles_every_window() {
    let (trunk, store) = Trunk::build(&ModelConfig::reduced(), 3).unwrap();
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let (h, w) = (28, 42);
    let map = trunk.pos.expand(&p, h, w).unwrap().value();
    let table = store.get(trunk.pos.table);
    let s = trunk.pos.side;
    let e = table.shape()[0];
    for c in [0, e / 2, e - 1] {
        for y in 0..h {
            for x in 0..w {
                let want = table.data()[(c * s + y % s) * s + x % s];
                assert_eq!(map.data()[(c * h + y) * w + x], want);
            }
        }
    }
}

#[test]
fn every_parameter_receives_gradient() {
    // stage-2 windows of one token would leave the softmax constant
    let cfg = ModelConfig {
        patch_side_stage2: 2,
        ..tiny()
    };
    let model = Model::new(&cfg, 2).unwrap();
    let pair = model.prepare(&random(5, &[3, 16, 16]).map(|v| v.abs()), &random(6, &[3, 16, 16]).map(|v| v.abs())).unwrap();
    for task in [Task::Flow, Task::Disparity] {
        let tape = Tape::new();
        let p = model.params.bind(&tape, true);
        let out = model.forward(&p, task, &pair).unwrap();
        let w = tape.constant(random(9, &out.shape()));
        let loss = out.mul(w).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        for (e, v) in model.params.entries().iter().zip(p.vars()) {
            let g = grads.get(*v).unwrap();
            let norm = g.data().iter().map(|x| x * x).sum::<f64>();
            assert!(norm > 0.0, "{} gets no gradient for {}", e.name, task.name());
        }
    }
}

fn weighted<'t>(y: Var<'t>, seed: u64) -> denviscom::Result<Var<'t>> {
    let w = y.constant(random(seed ^ 0xBEEF, &y.shape()));
    Ok(y.mul(w)?.sum()?)
}

fn objective<'t>(trunk: &Trunk, seed: u64, l: Var<'t>, r: Var<'t>, p: &Bound<'t>) -> denviscom::Result<Var<'t>> {
    let out = trunk.forward(p, l, r)?;
    Ok(weighted(out.left, seed)?.add(weighted(out.right, seed + 1)?)?)
}

#[test]
fn trunk_gradients_match_finite_differences() {
    let cfg = tiny();
    for seed in 1..=3 {
        let (trunk, store) = Trunk::build(&cfg, seed).unwrap();
        let a = random(seed, &[3, 16, 16]);
        let b = random(seed + 100, &[3, 16, 16]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels: Vec<usize> = (0..8).map(|_| rng.random_range(0..a.numel())).collect();
        let report = grad_check_indices(
            |v| objective(&trunk, seed, v, v.constant(b.clone()), &store.bind(v.tape(), false)),
            &a,
            &pixels,
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(report.passed, "left image seed {seed}: {:.3e}", report.max_rel_dev);
        for name in ["pos.table", "stage1.0.mixer.scan.ssm.a_log", "stage2.0.attn.cross.attn.q.weight"] {
            let id = store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
            let report = grad_check(
                |v| {
                    let p = store.bind_replacing(v.tape(), id, v);
                    objective(&trunk, seed, v.constant(a.clone()), v.constant(b.clone()), &p)
                },
                store.get(id),
                1e-5,
                1e-3,
            )
            .unwrap();
            assert!(report.passed, "{name} seed {seed}: {:.3e}", report.max_rel_dev);
        }
    }
}

#[test]
fn model_crops_to_input_size() {
    let model = Model::new(&tiny(), 1).unwrap();
    let a = random(1, &[3, 20, 13]).map(|v| v.abs());
    let b = random(2, &[3, 20, 13]).map(|v| v.abs());
    assert_eq!(model.infer(Task::Flow, &a, &b).unwrap().shape(), [2, 20, 13]);
    assert_eq!(model.infer(Task::Disparity, &a, &b).unwrap().shape(), [20, 13]);
    assert!(model.infer(Task::Flow, &a, &random(2, &[3, 20, 14])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn patch_round_trips(e in 1usize..4, wy in 1usize..3, wx in 1usize..3, small in 1usize..3, mult in 1usize..3, seed in any::<u64>()) {
        let side = small * mult;
        let (h, w) = (wy * side, wx * side);
        let tape = Tape::new();
        let x = tape.constant(random(seed, &[2, e, h, w]));
        let ps = patchify(x, side).unwrap();
        let grid = PatchGrid { embed: e, height: h, width: w, side };
        prop_assert_eq!(&*unpatchify(&ps, &grid).unwrap().value(), &*x.value());
        let (re, grid2) = repatch(&ps, &grid, small).unwrap();
        prop_assert_eq!(&*re.data().value(), &*patchify(x, small).unwrap().data().value());
        prop_assert_eq!(&*unpatchify(&re, &grid2).unwrap().value(), &*x.value());
    }
}
