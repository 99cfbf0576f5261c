use std::rc::Rc;

use crate::error::{contract, shape_err, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Source index for each output element of `permute(shape, perm)`.
pub fn permute_indices(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n: usize = shape.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; out_shape.len()];
    for _ in 0..n {
        idx.push(counter.iter().zip(perm).map(|(&c, &p)| c * src_strides[p]).sum());
        for d in (0..out_shape.len()).rev() {
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    idx
}

impl<'t> Var<'t> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let y = x.reshape(shape)?;
        let in_shape = x.shape().to_vec();
        self.tape().record("reshape", &[self], y, move |g| {
            vec![Some(g.reshape(&in_shape).expect("reshape backward"))]
        })
    }

    /// `out[i] = x[indices[i]]`; the backward pass scatter-adds.
    ///
    /// Covers permutations, broadcasts and patch rearrangements.
    pub fn gather(self, indices: Rc<[usize]>, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let n: usize = shape.iter().product();
        if n != indices.len() {
            return shape_err("gather", shape, &[indices.len()]);
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.numel()) {
            return contract("gather", format!("index {bad} out of range for {:?}", x.shape()));
        }
        let data = indices.iter().map(|&i| x.data()[i]).collect();
        let y = Tensor::from_parts(shape.to_vec(), data);
        let in_shape = x.shape().to_vec();
        self.tape().record("gather", &[self], y, move |g| {
            let mut gx = Tensor::zeros(&in_shape);
            let gd = gx.data_mut();
            for (&i, &v) in indices.iter().zip(g.data()) {
                gd[i] += v;
            }
            vec![Some(gx)]
        })
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return contract("permute", format!("{perm:?} is not a permutation of rank {}", shape.len()));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        self.gather(permute_indices(&shape, perm).into(), &out_shape)
    }

    pub fn transpose_last2(self) -> Result<Var<'t>> {
        let r = self.shape().len();
        if r < 2 {
            return contract("transpose_last2", "rank below 2");
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(&perm)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return contract("narrow", format!("range {start}+{len} on axis {axis} of {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let (src_block, dst_block) = (shape[axis] * inner, len * inner);
        let mut data = Vec::with_capacity(outer * dst_block);
        for o in 0..outer {
            let base = o * src_block + start * inner;
            data.extend_from_slice(&x.data()[base..base + dst_block]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let y = Tensor::from_parts(out_shape, data);
        self.tape().record("narrow", &[self], y, move |g| {
            let mut gx = Tensor::zeros(&shape);
            let gd = gx.data_mut();
            for o in 0..outer {
                let base = o * src_block + start * inner;
                gd[base..base + dst_block].copy_from_slice(&g.data()[o * dst_block..(o + 1) * dst_block]);
            }
            vec![Some(gx)]
        })
    }

    /// Splits `axis` into equal halves.
    pub fn halves(self, axis: usize) -> Result<(Var<'t>, Var<'t>)> {
        let n = self.shape().get(axis).copied().unwrap_or(0);
        if n % 2 != 0 || n == 0 {
            return contract("halves", format!("axis {axis} of size {n} is not even"));
        }
        Ok((self.narrow(axis, 0, n / 2)?, self.narrow(axis, n / 2, n / 2)?))
    }
}

/// Concatenates along `axis`; all other dimensions must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let Some(first) = parts.first() else {
        return contract("concat", "no inputs");
    };
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return contract("concat", format!("axis {axis} out of range for rank {}", base.len()));
    }
    for v in &values[1..] {
        let s = v.shape();
        if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(d, (a, b))| d != axis && a != b) {
            return shape_err("concat", &base, s);
        }
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = sizes.iter().sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &s) in values.iter().zip(&sizes) {
            data.extend_from_slice(&v.data()[o * s * inner..(o + 1) * s * inner]);
        }
    }
    let mut shape = base.clone();
    shape[axis] = total;
    let y = Tensor::from_parts(shape, data);
    let in_shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    first.tape().record("concat", parts, y, move |g| {
        let mut outs: Vec<Vec<f64>> = sizes.iter().map(|s| Vec::with_capacity(outer * s * inner)).collect();
        let mut offset = 0;
        for _ in 0..outer {
            for (buf, &s) in outs.iter_mut().zip(&sizes) {
                buf.extend_from_slice(&g.data()[offset..offset + s * inner]);
                offset += s * inner;
            }
        }
        outs.into_iter()
            .zip(&in_shapes)
            .map(|(d, s)| Some(Tensor::from_parts(s.clone(), d)))
            .collect()
    })
}
