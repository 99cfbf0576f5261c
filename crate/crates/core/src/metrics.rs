//! Flow and disparity error metrics.

use denviscom_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Thresholds behind the outlier rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Flow error above this many pixels counts toward F1-all.
    pub flow_px: f64,
    /// Disparity outliers exceed both this many pixels ...
    pub disp_px: f64,
    /// ... and this fraction of the ground truth.
    pub disp_rel: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            flow_px: 3.0,
            disp_px: 3.0,
            disp_rel: 0.05,
        }
    }
}

/// Upper bounds of the ground-truth magnitude buckets; the last is open.
pub const BUCKET_EDGES: [f64; 2] = [10.0, 40.0];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Bucket {
    pub epe: Option<f64>,
    pub pixels: usize,
}

/// Metrics over the valid pixels. Fields that do not apply to a task are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub epe: f64,
    /// Percent of valid flow pixels with error above the threshold.
    pub f1_all: Option<f64>,
    /// Fraction in `[0, 1]` of disparity outliers.
    pub d1: Option<f64>,
    pub s0_10: Option<Bucket>,
    pub s10_40: Option<Bucket>,
    pub s40plus: Option<Bucket>,
    pub valid_pixels: usize,
}

fn check(pred: &Tensor, gt: &Tensor, mask: &[bool], pixels: usize) -> Result<usize> {
    if pred.shape() != gt.shape() {
        return Err(Error::Contract(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape())));
    }
    if mask.len() != pixels {
        return Err(Error::Contract(format!("mask has {} entries for {pixels} pixels", mask.len())));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::Degenerate("no valid pixels".into()));
    }
    Ok(n)
}

/// `pred` and `gt` are `[2, H, W]`, `mask` is `[H, W]`.
pub fn compute_flow_metrics(pred: &Tensor, gt: &Tensor, mask: &[bool], th: &Thresholds) -> Result<MetricsReport> {
    if pred.rank() != 3 || pred.shape()[0] != 2 {
        return Err(Error::Contract(format!("flow must be [2, H, W], got {:?}", pred.shape())));
    }
    let px = pred.shape()[1] * pred.shape()[2];
    let n = check(pred, gt, mask, px)?;
    let (p, g) = (pred.data(), gt.data());
    let mut total = 0.0;
    let mut outliers = 0usize;
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    for i in (0..px).filter(|&i| mask[i]) {
        let err = (p[i] - g[i]).hypot(p[px + i] - g[px + i]);
        total += err;
        outliers += (err > th.flow_px) as usize;
        let mag = g[i].hypot(g[px + i]);
        let b = BUCKET_EDGES.iter().position(|&e| mag < e).unwrap_or(2);
        sums[b] += err;
        counts[b] += 1;
    }
    let bucket = |b: usize| {
        Some(Bucket {
            epe: (counts[b] > 0).then(|| sums[b] / counts[b] as f64),
            pixels: counts[b],
        })
    };
    Ok(MetricsReport {
        epe: total / n as f64,
        f1_all: Some(100.0 * outliers as f64 / n as f64),
        d1: None,
        s0_10: bucket(0),
        s10_40: bucket(1),
        s40plus: bucket(2),
        valid_pixels: n,
    })
}

/// `pred` and `gt` are `[H, W]`, as is `mask`.
pub fn compute_disparity_metrics(pred: &Tensor, gt: &Tensor, mask: &[bool], th: &Thresholds) -> Result<MetricsReport> {
    if pred.rank() != 2 {
        return Err(Error::Contract(format!("disparity must be [H, W], got {:?}", pred.shape())));
    }
    let n = check(pred, gt, mask, pred.numel())?;
    let mut total = 0.0;
    let mut outliers = 0usize;
    for ((p, g), _) in pred.data().iter().zip(gt.data()).zip(mask).filter(|(_, &m)| m) {
        let err = (p - g).abs();
        total += err;
        outliers += (err > th.disp_px && err > th.disp_rel * g.abs()) as usize;
    }
    Ok(MetricsReport {
        epe: total / n as f64,
        f1_all: None,
        d1: Some(outliers as f64 / n as f64),
        s0_10: None,
        s10_40: None,
        s40plus: None,
        valid_pixels: n,
    })
}

impl MetricsReport {
    /// Human-readable summary, one metric per line.
    pub fn render(&self) -> String {
        let mut out = format!("EPE      {:.6} px\n", self.epe);
        if let Some(f1) = self.f1_all {
            out += &format!("F1-all   {f1:.4} %\n");
        }
        if let Some(d1) = self.d1 {
            out += &format!("D1       {d1:.6} ({:.4} %)\n", 100.0 * d1);
        }
        for (name, b) in [("s0-10", self.s0_10), ("s10-40", self.s10_40), ("s40+", self.s40plus)] {
            if let Some(b) = b {
                let epe = b.epe.map_or("-".to_string(), |e| format!("{e:.6} px"));
                out += &format!("{name:<8} {epe} over {} px\n", b.pixels);
            }
        }
        out += &format!("valid    {} px\n", self.valid_pixels);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}
