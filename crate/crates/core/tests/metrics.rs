use denviscom::metrics::{compute_disparity_metrics, compute_flow_metrics, Thresholds};
use denviscom_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Reference metrics from plain per-pixel loops.
struct Reference {
    epe: f64,
    outlier: f64,
    buckets: [(f64, usize); 3],
}

fn flow_reference(p: &[f64], g: &[f64], mask: &[bool], th: f64) -> Reference {
    let n = mask.len();
    let (mut sum, mut bad, mut count) = (0.0, 0.0, 0.0);
    let mut buckets = [(0.0, 0usize); 3];
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let (du, dv) = (p[i] - g[i], p[n + i] - g[n + i]);
        let e = (du * du + dv * dv).sqrt();
        sum += e;
        count += 1.0;
        if e > th {
            bad += 1.0;
        }
        let mag = (g[i] * g[i] + g[n + i] * g[n + i]).sqrt();
        let b = if mag < 10.0 { 0 } else if mag < 40.0 { 1 } else { 2 };
        buckets[b].0 += e;
        buckets[b].1 += 1;
    }
    Reference {
        epe: sum / count,
        outlier: 100.0 * bad / count,
        buckets,
    }
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
    mask[rng.random_range(0..n)] = true;
    mask
}

#[test]
fn flow_metrics_match_reference_loops() {
    let th = Thresholds::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
        let scale = [1.0, 20.0, 80.0][rng.random_range(0..3)];
        let g = Tensor::from_fn(&[2, h, w], |_| scale * rng.random_range(-1.0..1.0));
        let p = Tensor::from_fn(&[2, h, w], |i| g.data()[i] + rng.random_range(-5.0..5.0));
        let mask = random_mask(&mut rng, h * w);
        let got = compute_flow_metrics(&p, &g, &mask, &th).unwrap();
        let want = flow_reference(p.data(), g.data(), &mask, th.flow_px);
        assert!((got.epe - want.epe).abs() < 1e-12);
        assert!((got.f1_all.unwrap() - want.outlier).abs() < 1e-12);
        assert_eq!(got.valid_pixels, mask.iter().filter(|&&m| m).count());
        for (b, (sum, count)) in [got.s0_10, got.s10_40, got.s40plus].into_iter().zip(want.buckets) {
            let b = b.unwrap();
            assert_eq!(b.pixels, count);
            match b.epe {
                Some(e) => assert!((e - sum / count as f64).abs() < 1e-12),
                None => assert_eq!(count, 0),
            }
        }
    }
}

#[test]
fn disparity_metrics_match_reference_loops() {
    let th = Thresholds::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
        let g = Tensor::from_fn(&[h, w], |_| rng.random_range(0.0..120.0));
        let p = Tensor::from_fn(&[h, w], |i| g.data()[i] + rng.random_range(-8.0..8.0));
        let mask = random_mask(&mut rng, h * w);
        let got = compute_disparity_metrics(&p, &g, &mask, &th).unwrap();
        let (mut sum, mut bad, mut count) = (0.0, 0.0, 0.0);
        for i in (0..h * w).filter(|&i| mask[i]) {
            let e = (p.data()[i] - g.data()[i]).abs();
            sum += e;
            count += 1.0;
            if e > 3.0 && e / g.data()[i] > 0.05 {
                bad += 1.0;
            }
        }
        assert!((got.epe - sum / count).abs() < 1e-12);
        assert!((got.d1.unwrap() - bad / count).abs() < 1e-12);
        assert!(got.f1_all.is_none() && got.s0_10.is_none());
    }
}

#[test]
fn metrics_reject_bad_inputs() {
    let th = Thresholds::default();
    let f = Tensor::zeros(&[2, 2, 2]);
    assert!(compute_flow_metrics(&f, &Tensor::zeros(&[2, 2, 3]), &[true; 4], &th).is_err());
    assert!(compute_flow_metrics(&f, &f, &[true; 3], &th).is_err());
    assert!(compute_flow_metrics(&f, &f, &[false; 4], &th).is_err());
    let d = Tensor::zeros(&[2, 2]);
    assert!(compute_disparity_metrics(&f, &f, &[true; 4], &th).is_err());
    assert!(compute_disparity_metrics(&d, &d, &[false; 4], &th).is_err());
}

#[test]
fn report_json_has_the_documented_keys() {
    let g = Tensor::zeros(&[2, 1, 2]);
    let r = compute_flow_metrics(&g, &g, &[true, true], &Thresholds::default()).unwrap();
    let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    for key in ["epe", "f1_all", "d1", "s0_10", "s10_40", "s40plus", "valid_pixels"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["epe"], 0.0);
    assert!(v["d1"].is_null());
    assert!(r.render().starts_with("EPE      0.000000 px\n"));
}
