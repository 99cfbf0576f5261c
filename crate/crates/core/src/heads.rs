//! Parameter-free matching heads, upsampling to full resolution, and the
//! training loss.

use std::rc::Rc;

use denviscom_tensor::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trunk::CropMeta;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Flow,
    Disparity,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Flow => "flow",
            Task::Disparity => "disparity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "flow" => Ok(Task::Flow),
            "disparity" => Ok(Task::Disparity),
            other => Err(Error::Input(format!("unknown task {other:?}"))),
        }
    }
}

fn check_pair(f1: &Var<'_>, f2: &Var<'_>) -> Result<[usize; 3]> {
    let (s1, s2) = (f1.shape(), f2.shape());
    if s1.len() != 3 || s1 != s2 {
        return Err(Error::Contract(format!("feature maps must share [D, H, W], got {s1:?} and {s2:?}")));
    }
    Ok([s1[0], s1[1], s1[2]])
}

/// `[HW, 2]` pixel coordinates `(x, y)` in row-major order.
pub fn grid_2d(h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[h * w, 2], |i| {
        let pix = i / 2;
        if i % 2 == 0 {
            (pix % w) as f64
        } else {
            (pix / w) as f64
        }
    })
}

/// Correspondence probabilities `[HW, HW]` of global 2-D matching.
pub fn flow_correspondence<'t>(f1: Var<'t>, f2: Var<'t>) -> Result<Var<'t>> {
    let [d, h, w] = check_pair(&f1, &f2)?;
    let a = f1.reshape(&[d, h * w])?.transpose_last2()?;
    let b = f2.reshape(&[d, h * w])?.transpose_last2()?;
    Ok(a.matmul_nt(b)?.scale(1.0 / (d as f64).sqrt())?.softmax_lastdim()?)
}

/// Low-resolution flow `[2, H, W]` from the soft-argmax of global matching.
pub fn flow_global_match<'t>(f1: Var<'t>, f2: Var<'t>) -> Result<Var<'t>> {
    let [_, h, w] = check_pair(&f1, &f2)?;
    let probs = flow_correspondence(f1, f2)?;
    let grid = f1.constant(grid_2d(h, w));
    let expected = probs.matmul(grid)?;
    Ok(expected.sub(grid)?.transpose_last2()?.reshape(&[2, h, w])?)
}

/// Row-major `[W, W]` mask allowing target columns `j <= i`.
pub fn disparity_mask(w: usize) -> Rc<[bool]> {
    (0..w * w).map(|k| k % w <= k / w).collect()
}

/// Per-row correspondence probabilities `[H, W, W]` of 1-D matching.
pub fn disparity_correspondence<'t>(f1: Var<'t>, f2: Var<'t>) -> Result<Var<'t>> {
    let [d, _, w] = check_pair(&f1, &f2)?;
    let a = f1.permute(&[1, 2, 0])?;
    let b = f2.permute(&[1, 2, 0])?;
    let corr = a.matmul_nt(b)?.scale(1.0 / (d as f64).sqrt())?;
    Ok(corr.masked_softmax_lastdim(disparity_mask(w))?)
}

/// Low-resolution non-negative disparity `[H, W]` of left image `f1`.
///
/// Computed as `sum_j P[i, j] (i - j)`, which equals `i - sum_j P[i, j] j`
/// but is a sum of non-negative terms, so rounding cannot push it below zero.
pub fn disparity_match_1d<'t>(f1: Var<'t>, f2: Var<'t>) -> Result<Var<'t>> {
    let [_, h, w] = check_pair(&f1, &f2)?;
    let probs = disparity_correspondence(f1, f2)?;
    let offsets = Tensor::from_fn(&[h, w, w], |k| {
        let (i, j) = ((k / w) % w, k % w);
        i.saturating_sub(j) as f64
    });
    let ones = f1.constant(Tensor::from_fn(&[w, 1], |_| 1.0));
    Ok(probs.mul(f1.constant(offsets))?.matmul(ones)?.reshape(&[h, w])?)
}

/// `[out, n]` bilinear weights with aligned corners, keeping the first `keep`
/// of `out` output positions.
fn interp_matrix(n: usize, out: usize, keep: usize) -> Tensor {
    let mut m = Tensor::zeros(&[keep, n]);
    for o in 0..keep {
        if n == 1 {
            m.data_mut()[o] = 1.0;
            continue;
        }
        let src = o as f64 * (n - 1) as f64 / (out - 1) as f64;
        let i0 = (src.floor() as usize).min(n - 2);
        let t = src - i0 as f64;
        m.data_mut()[o * n + i0] = 1.0 - t;
        m.data_mut()[o * n + i0 + 1] += t;
    }
    m
}

/// Bilinearly upsamples a `[C, h, w]` or `[h, w]` field by `factor`, scales
/// its values by `factor` and crops to the original image.
pub fn upsample_field<'t>(field: Var<'t>, factor: usize, crop: &CropMeta) -> Result<Var<'t>> {
    let s = field.shape();
    let (h, w) = match s.len() {
        2 => (s[0], s[1]),
        3 => (s[1], s[2]),
        _ => return Err(Error::Contract(format!("field must be [C, h, w] or [h, w], got {s:?}"))),
    };
    let (oh, ow) = (h * factor, w * factor);
    if crop.padded_height != oh || crop.padded_width != ow || crop.height > oh || crop.width > ow {
        return Err(Error::Contract(format!(
            "crop {crop:?} does not fit a {h}x{w} field upsampled by {factor}"
        )));
    }
    let uy = field.constant(interp_matrix(h, oh, crop.height));
    let ux = field.constant(interp_matrix(w, ow, crop.width));
    Ok(uy.matmul(field)?.matmul_nt(ux)?.scale(factor as f64)?)
}

/// Mean over valid pixels of the L1 error, summed over components.
///
/// `mask` is `[H, W]`; `pred` and `gt` are `[H, W]` or `[C, H, W]`.
pub fn task_loss<'t>(pred: Var<'t>, gt: &Tensor, mask: &[bool]) -> Result<Var<'t>> {
    let s = pred.shape();
    if s != gt.shape() {
        return Err(Error::Contract(format!("prediction {s:?} vs ground truth {:?}", gt.shape())));
    }
    let pixels: usize = s[s.len().saturating_sub(2)..].iter().product();
    if mask.len() != pixels {
        return Err(Error::Contract(format!("mask has {} entries for {pixels} pixels", mask.len())));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Degenerate("valid mask is empty".into()));
    }
    let weights = Tensor::from_fn(&s, |i| if mask[i % pixels] { 1.0 } else { 0.0 });
    let diff = pred.sub(pred.constant(gt.clone()))?.abs()?;
    Ok(diff.mul(pred.constant(weights))?.sum()?.scale(1.0 / count as f64)?)
}
