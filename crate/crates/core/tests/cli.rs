use std::path::Path;
use std::process::{Command, Output};

use denviscom::config::ModelConfig;
use denviscom::formats::{read_flo, read_pfm, write_flo, write_pfm, write_ppm};
use denviscom::heads::Task;
use denviscom::train::toy_sample;
use denviscom_tensor::Tensor;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_denviscom")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let cfg = ModelConfig {
        embed: 8,
        encoder_channels: vec![4, 4, 8],
        patch_side_stage1: 2,
        patch_side_stage2: 1,
        depth_n: 1,
        heads_h: 1,
        state_n: 2,
        mlp_ratio: 2,
        ..ModelConfig::default()
    };
    let path = dir.join("tiny.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

#[test]
fn eval_of_identical_fields_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let flow = Tensor::from_fn(&[2, 4, 5], |i| i as f64 * 0.5);
    let f = dir.path().join("f.flo");
    write_flo(&flow, &f).unwrap();
    let o = run(&["eval", "--task", "flow", "--pred", p(&f), "--gt", p(&f)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("EPE      0.000000 px"), "{}", stdout(&o));
    let o = run(&["eval", "--task", "flow", "--pred", p(&f), "--gt", p(&f), "--json"]);
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["epe"], 0.0);
    assert_eq!(v["f1_all"], 0.0);
    assert_eq!(v["valid_pixels"], 20);

    let (a, b) = (dir.path().join("a.pfm"), dir.path().join("b.pfm"));
    write_pfm(&Tensor::from_fn(&[2, 2], |i| 10.0 * i as f64), &a).unwrap();
    write_pfm(&Tensor::from_fn(&[2, 2], |i| 10.0 * i as f64 + if i == 3 { 4.0 } else { 0.0 }), &b).unwrap();
    let o = run(&["eval", "--task", "disparity", "--pred", p(&a), "--gt", p(&b), "--json"]);
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["epe"], 1.0);
    assert_eq!(v["d1"], 0.25);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(run(&["eval", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--task", "sideways", "--steps", "1", "--lr", "1", "--out", "x"]).status.code(), Some(2));
    assert_eq!(run(&[]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.flo");
    let o = run(&["eval", "--task", "flow", "--pred", p(&missing), "--gt", p(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: "), "{}", stderr(&o));
}

#[test]
fn train_infer_transfer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let ckpt = dir.path().join("flow.ckpt");
    let o = run(&[
        "train", "--task", "flow", "--steps", "2", "--lr", "1e-3", "--batch", "1", "--config", p(&cfg), "--out",
        p(&ckpt), "--seed", "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("step 0 loss ") && out.contains("step 1 loss "), "{out}");
    assert!(ckpt.exists());

    let s = toy_sample(Task::Flow, 0).unwrap();
    let (i1, i2) = (dir.path().join("1.ppm"), dir.path().join("2.ppm"));
    write_ppm(&s.img1, &i1).unwrap();
    write_ppm(&s.img2, &i2).unwrap();
    let flo = dir.path().join("out.flo");
    let o = run(&["infer", "--task", "flow", "--ckpt", p(&ckpt), "--img1", p(&i1), "--img2", p(&i2), "--out", p(&flo)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_flo(&flo).unwrap().shape(), [2, 112, 112]);

    let bad_ext = dir.path().join("out.pfm");
    let o = run(&["infer", "--task", "flow", "--ckpt", p(&ckpt), "--img1", p(&i1), "--img2", p(&i2), "--out", p(&bad_ext)]);
    assert_eq!(o.status.code(), Some(1));

    let small = dir.path().join("small.ppm");
    write_ppm(&Tensor::zeros(&[3, 16, 16]), &small).unwrap();
    let o = run(&["infer", "--task", "flow", "--ckpt", p(&ckpt), "--img1", p(&i1), "--img2", p(&small), "--out", p(&flo)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("shape"), "{}", stderr(&o));

    let disp_ckpt = dir.path().join("disp.ckpt");
    let o = run(&["transfer", "--from", p(&ckpt), "--task", "disparity", "--out", p(&disp_ckpt), "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pfm = dir.path().join("out.pfm");
    let o = run(&["infer", "--task", "disparity", "--ckpt", p(&disp_ckpt), "--img1", p(&i1), "--img2", p(&i2), "--out", p(&pfm)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let disp = read_pfm(&pfm).unwrap();
    assert_eq!(disp.shape(), [112, 112]);
    assert!(disp.data().iter().all(|v| v.is_finite()));

    let wider = dir.path().join("wider.json");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("\"embed\":8", "\"embed\":16");
    std::fs::write(&wider, text).unwrap();
    let o = run(&["transfer", "--from", p(&ckpt), "--task", "disparity", "--out", p(&disp_ckpt), "--config", p(&wider)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("embed"), "{}", stderr(&o));
}

#[test]
fn train_json_emits_one_object_per_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let ckpt = dir.path().join("d.ckpt");
    let o = run(&[
        "train", "--task", "disparity", "--steps", "1", "--lr", "1e-3", "--batch", "1", "--config", p(&cfg), "--out",
        p(&ckpt), "--json", "--eval-every", "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines[0]["step"], 0);
    assert!(lines[0]["loss"].as_f64().unwrap().is_finite());
    assert!(lines.iter().any(|l| l.get("eval_step").is_some() && l["d1"].is_number()));
}
