//! Synthetic image pairs with exact ground truth.

use denviscom_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub img1: Tensor,
    pub img2: Tensor,
    /// `[2, H, W]` flow or `[H, W]` disparity.
    pub gt: Tensor,
    /// `[H, W]` row-major.
    pub valid: Vec<bool>,
}

/// Blur radii of the texture octaves, finest first.
const OCTAVES: [usize; 3] = [1, 3, 7];

/// Box blur with wraparound along rows then columns.
fn box_blur_periodic(plane: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let norm = 1.0 / (2 * r + 1) as f64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        let mut acc: f64 = (0..=2 * r).map(|k| row[(k + w * (r + 1) - r) % w]).sum();
        for x in 0..w {
            tmp[y * w + x] = acc * norm;
            acc += row[(x + r + 1) % w] - row[(x + w * (r + 1) - r) % w];
        }
    }
    let mut out = vec![0.0; h * w];
    for x in 0..w {
        let mut acc: f64 = (0..=2 * r).map(|k| tmp[((k + h * (r + 1) - r) % h) * w + x]).sum();
        for y in 0..h {
            out[y * w + x] = acc * norm;
            acc += tmp[((y + r + 1) % h) * w + x] - tmp[((y + h * (r + 1) - r) % h) * w + x];
        }
    }
    out
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x = (*x - mean) / std);
}

/// Seeded smooth texture `[3, h, w]` in `[0, 1]`, periodic in both axes.
///
/// Each channel sums unit-variance octaves of twice box-blurred noise.
pub fn texture(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        let mut plane = vec![0.0; h * w];
        for &r in &OCTAVES {
            let noise: Vec<f64> = (0..h * w).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let mut oct = box_blur_periodic(&box_blur_periodic(&noise, h, w, r), h, w, r);
            standardize(&mut oct);
            plane.iter_mut().zip(&oct).for_each(|(p, o)| *p += o);
        }
        let (lo, hi) = plane.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        data.extend(plane.iter().map(|v| (v - lo) / (hi - lo).max(1e-12)));
    }
    Tensor::new(&[3, h, w], data).expect("texture shape")
}

fn check_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::Contract(format!("image size {h}x{w} must be positive")));
    }
    Ok(())
}

/// `img2` is `img1` translated by `(dx, dy)` with wraparound, so the flow is
/// `(dx, dy)` everywhere. Pixels whose displaced position leaves the frame
/// (and therefore wraps) are marked invalid.
pub fn gen_flow_pair(seed: u64, h: usize, w: usize, shift: (i64, i64)) -> Result<SyntheticSample> {
    check_size(h, w)?;
    let (dx, dy) = shift;
    if dx.unsigned_abs() as usize >= w || dy.unsigned_abs() as usize >= h {
        return Err(Error::Contract(format!("shift {shift:?} exceeds a {h}x{w} image")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img1 = texture(&mut rng, h, w);
    let (hi, wi) = (h as i64, w as i64);
    let img2 = Tensor::from_fn(&[3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        let sy = (y as i64 - dy).rem_euclid(hi) as usize;
        let sx = (x as i64 - dx).rem_euclid(wi) as usize;
        img1.data()[(c * h + sy) * w + sx]
    });
    let gt = Tensor::from_fn(&[2, h, w], |i| if i < h * w { dx as f64 } else { dy as f64 });
    let valid = (0..h * w)
        .map(|i| {
            let (ty, tx) = ((i / w) as i64 + dy, (i % w) as i64 + dx);
            (0..hi).contains(&ty) && (0..wi).contains(&tx)
        })
        .collect();
    Ok(SyntheticSample { img1, img2, gt, valid })
}

/// Axis-aligned region `[y0, y1) x [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxRegion {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl BoxRegion {
    /// The middle half of an `h x w` image.
    pub fn central(h: usize, w: usize) -> Self {
        Self {
            y0: h / 4,
            y1: h - h / 4,
            x0: w / 4,
            x1: w - w / 4,
        }
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }
}

/// Random-dot style stereo pair: the right image is the left one with the
/// box region moved `d` pixels to the left over a zero-disparity background.
///
/// Right-image pixels uncovered by the move get fresh texture. Left-image
/// background pixels hidden behind the moved box in the right view have no
/// match and are marked invalid.
pub fn gen_stereo_pair(seed: u64, h: usize, w: usize, d: usize, region: BoxRegion) -> Result<SyntheticSample> {
    check_size(h, w)?;
    if region.y0 >= region.y1 || region.x0 >= region.x1 || region.y1 > h || region.x1 > w {
        return Err(Error::Contract(format!("box {region:?} does not fit a {h}x{w} image")));
    }
    if d > region.x0 {
        return Err(Error::Contract(format!("disparity {d} moves the box {region:?} out of frame")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let left = texture(&mut rng, h, w);
    let fill = texture(&mut rng, h, w);
    let right = Tensor::from_fn(&[3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        let at = |img: &Tensor, xx: usize| img.data()[(c * h + y) * w + xx];
        if region.contains(y, x + d) {
            at(&left, x + d)
        } else if region.contains(y, x) {
            at(&fill, x)
        } else {
            at(&left, x)
        }
    });
    let gt = Tensor::from_fn(&[h, w], |i| if region.contains(i / w, i % w) { d as f64 } else { 0.0 });
    let valid = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            region.contains(y, x) || !region.contains(y, x + d)
        })
        .collect();
    Ok(SyntheticSample {
        img1: left,
        img2: right,
        gt,
        valid,
    })
}
