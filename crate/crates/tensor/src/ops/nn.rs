use std::rc::Rc;

use crate::error::{config, contract, shape_err, Result, TensorError};
use crate::ops::linalg::gemm;
use crate::tape::Var;
use crate::tensor::{softmax_row, Tensor};

fn softmax_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let n = y.last_dim();
    let mut gx = vec![0.0; y.numel()];
    for ((gx, y), g) in gx.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
        let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
        for i in 0..n {
            gx[i] = y[i] * (g[i] - dot);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), gx)
}

impl<'t> Var<'t> {
    /// Softmax over the last dimension with max subtraction.
    pub fn softmax_lastdim(self) -> Result<Var<'t>> {
        let y = self.value().softmax_lastdim()?;
        let y_saved = Rc::new(y.clone());
        self.tape()
            .record("softmax_lastdim", &[self], y, move |g| vec![Some(softmax_backward(&y_saved, g))])
    }

    /// Softmax where entries with `allowed[i % allowed.len()] == false` are
    /// treated as `-inf` and receive exactly zero probability.
    ///
    /// `allowed` must be a whole number of last-dimension slices and must
    /// tile the tensor.
    pub fn masked_softmax_lastdim(self, allowed: Rc<[bool]>) -> Result<Var<'t>> {
        let x = self.value();
        let n = x.last_dim();
        if allowed.is_empty() || allowed.len() % n != 0 || x.numel() % allowed.len() != 0 {
            return shape_err("masked_softmax_lastdim", x.shape(), &[allowed.len()]);
        }
        let mut data = x.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            if !allowed[i % allowed.len()] {
                *v = f64::NEG_INFINITY;
            }
        }
        for (row_idx, row) in data.chunks_mut(n).enumerate() {
            softmax_row(row).map_err(|_| TensorError::Degenerate {
                op: "masked_softmax_lastdim",
                msg: format!("slice {row_idx} is entirely masked"),
            })?;
        }
        let y = Tensor::from_parts(x.shape().to_vec(), data);
        let y_saved = Rc::new(y.clone());
        self.tape()
            .record("masked_softmax_lastdim", &[self], y, move |g| vec![Some(softmax_backward(&y_saved, g))])
    }

    /// Normalizes each last-dimension slice to zero mean and unit
    /// population variance, then applies `gamma * x_hat + beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        if eps <= 0.0 {
            return config("layer_norm", format!("eps must be positive, got {eps}"));
        }
        let (x, ga, be) = (self.value(), gamma.value(), beta.value());
        let c = x.last_dim();
        if ga.shape() != [c] || be.shape() != [c] {
            return shape_err("layer_norm", x.shape(), ga.shape());
        }
        let rows = x.numel() / c;
        let mut x_hat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in x_hat[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let y: Vec<f64> = x_hat
            .chunks(c)
            .flat_map(|row| row.iter().zip(ga.data()).zip(be.data()).map(|((h, g), b)| g * h + b))
            .collect();
        let y = Tensor::from_parts(x.shape().to_vec(), y);
        let shape = x.shape().to_vec();
        self.tape().record("layer_norm", &[self, gamma, beta], y, move |g| {
            let mut gx = vec![0.0; rows * c];
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            let mut dxh = vec![0.0; c];
            for r in 0..rows {
                let gr = &g.data()[r * c..(r + 1) * c];
                let xh = &x_hat[r * c..(r + 1) * c];
                for i in 0..c {
                    ggamma[i] += gr[i] * xh[i];
                    gbeta[i] += gr[i];
                    dxh[i] = gr[i] * ga.data()[i];
                }
                let m1 = dxh.iter().sum::<f64>() / c as f64;
                let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                for i in 0..c {
                    gx[r * c + i] = inv_std[r] * (dxh[i] - m1 - xh[i] * m2);
                }
            }
            vec![
                Some(Tensor::from_parts(shape.clone(), gx)),
                Some(Tensor::from_parts(vec![c], ggamma)),
                Some(Tensor::from_parts(vec![c], gbeta)),
            ]
        })
    }

    /// Per-channel correlation along the last axis of `[B, C, L]` with a
    /// `[C, K]` kernel, zero padding `(K - 1) / 2` on both ends.
    pub fn depthwise_conv1d(self, kernel: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, w, b) = (self.value(), kernel.value(), bias.value());
        if w.rank() != 2 {
            return shape_err("depthwise_conv1d", x.shape(), w.shape());
        }
        let (c, k) = (w.shape()[0], w.shape()[1]);
        if k % 2 == 0 {
            return config("depthwise_conv1d", format!("kernel length must be odd, got {k}"));
        }
        if x.rank() != 3 || x.shape()[1] != c {
            return shape_err("depthwise_conv1d", x.shape(), w.shape());
        }
        if b.shape() != [c] {
            return shape_err("depthwise_conv1d", w.shape(), b.shape());
        }
        let (bsz, l) = (x.shape()[0], x.shape()[2]);
        let pad = (k / 2) as isize;
        let mut y = vec![0.0; x.numel()];
        for bi in 0..bsz {
            for ci in 0..c {
                let xs = &x.data()[(bi * c + ci) * l..(bi * c + ci + 1) * l];
                let ys = &mut y[(bi * c + ci) * l..(bi * c + ci + 1) * l];
                let ws = &w.data()[ci * k..(ci + 1) * k];
                for (t, out) in ys.iter_mut().enumerate() {
                    let mut acc = b.data()[ci];
                    for (j, wv) in ws.iter().enumerate() {
                        let src = t as isize + j as isize - pad;
                        if src >= 0 && (src as usize) < l {
                            acc += wv * xs[src as usize];
                        }
                    }
                    *out = acc;
                }
            }
        }
        let y = Tensor::from_parts(x.shape().to_vec(), y);
        self.tape().record("depthwise_conv1d", &[self, kernel, bias], y, move |g| {
            let mut gx = vec![0.0; x.numel()];
            let mut gw = vec![0.0; c * k];
            let mut gb = vec![0.0; c];
            for bi in 0..bsz {
                for ci in 0..c {
                    let off = (bi * c + ci) * l;
                    let xs = &x.data()[off..off + l];
                    let gs = &g.data()[off..off + l];
                    let ws = &w.data()[ci * k..(ci + 1) * k];
                    for (t, &gv) in gs.iter().enumerate() {
                        gb[ci] += gv;
                        for j in 0..k {
                            let src = t as isize + j as isize - pad;
                            if src >= 0 && (src as usize) < l {
                                gx[off + src as usize] += ws[j] * gv;
                                gw[ci * k + j] += xs[src as usize] * gv;
                            }
                        }
                    }
                }
            }
            vec![
                Some(Tensor::from_parts(x.shape().to_vec(), gx)),
                Some(Tensor::from_parts(vec![c, k], gw)),
                Some(Tensor::from_parts(vec![c], gb)),
            ]
        })
    }

    /// 2-D convolution of a single `[C_in, H, W]` image with a
    /// `[C_out, C_in, kh, kw]` kernel, zero padding and a uniform stride.
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        if x.rank() != 3 || w.rank() != 4 || w.shape()[1] != x.shape()[0] {
            return shape_err("conv2d", x.shape(), w.shape());
        }
        if stride == 0 {
            return config("conv2d", "stride must be positive");
        }
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        if b.shape() != [cout] {
            return shape_err("conv2d", w.shape(), b.shape());
        }
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return contract("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{wd}"));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (wd + 2 * padding - kw) / stride + 1;
        let geom = ConvGeom { cin, h, w: wd, kh, kw, ho, wo, stride, padding };
        let cols = Rc::new(im2col(x.data(), &geom));
        let kdim = cin * kh * kw;
        let npix = ho * wo;
        let mut y = vec![0.0; cout * npix];
        for (co, row) in y.chunks_mut(npix).enumerate() {
            row.fill(b.data()[co]);
        }
        gemm(cout, kdim, npix, w.data(), false, &cols, false, &mut y, true);
        let y = Tensor::from_parts(vec![cout, ho, wo], y);
        let need_x = self.requires_grad();
        self.tape().record("conv2d", &[self, weight, bias], y, move |g| {
            let gd = g.data();
            let mut gw = vec![0.0; cout * kdim];
            gemm(cout, npix, kdim, gd, false, &cols, true, &mut gw, false);
            let gb: Vec<f64> = gd.chunks(npix).map(|r| r.iter().sum()).collect();
            let gx = need_x.then(|| {
                let mut gcols = vec![0.0; kdim * npix];
                gemm(kdim, cout, npix, w.data(), true, gd, false, &mut gcols, false);
                Tensor::from_parts(vec![cin, h, geom.w], col2im(&gcols, &geom))
            });
            vec![
                gx,
                Some(Tensor::from_parts(vec![cout, cin, kh, kw], gw)),
                Some(Tensor::from_parts(vec![cout], gb)),
            ]
        })
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let npix = g.ho * g.wo;
    let mut cols = vec![0.0; g.cin * g.kh * g.kw * npix];
    for c in 0..g.cin {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * npix;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..];
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let npix = g.ho * g.wo;
    let mut x = vec![0.0; g.cin * g.h * g.w];
    for c in 0..g.cin {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * npix;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + j) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            x[base + ix as usize] += cols[row + oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}
