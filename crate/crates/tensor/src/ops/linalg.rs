use std::rc::Rc;

use crate::error::{shape_err, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

/// `c (+)= op(a) · op(b)` with `op(a)` of shape `m×k` and `op(b)` of shape `k×n`.
///
/// `a_t` means `a` is stored as `k×m`; `b_t` means `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover every element addressed by the given
    // dimensions and strides (checked above in debug builds).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Broadcast plan for the leading (batch) dimensions of a batched matmul.
struct BatchPlan {
    out_batch: Vec<usize>,
    a_offsets: Vec<usize>,
    b_offsets: Vec<usize>,
}

fn batch_plan(a_lead: &[usize], b_lead: &[usize]) -> Option<BatchPlan> {
    let rank = a_lead.len().max(b_lead.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a_lead), pad(b_lead));
    let mut out_batch = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        match (x, y) {
            _ if x == y => out_batch.push(x),
            (1, _) => out_batch.push(y),
            (_, 1) => out_batch.push(x),
            _ => return None,
        }
    }
    let total: usize = out_batch.iter().product();
    let mut a_offsets = Vec::with_capacity(total);
    let mut b_offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let (mut oa, mut ob) = (0, 0);
        for d in 0..rank {
            oa = oa * pa[d] + if pa[d] == 1 { 0 } else { idx[d] };
            ob = ob * pb[d] + if pb[d] == 1 { 0 } else { idx[d] };
        }
        a_offsets.push(oa);
        b_offsets.push(ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_batch[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Some(BatchPlan {
        out_batch,
        a_offsets,
        b_offsets,
    })
}

/// Batched `a · op(b)` on plain tensors; `b_t` treats `b` as `[.., N, K]`.
fn batched_matmul(a: &Tensor, b: &Tensor, b_t: bool, op: &'static str) -> Result<(Tensor, BatchPlan, [usize; 3])> {
    if a.rank() < 2 || b.rank() < 2 {
        return shape_err(op, a.shape(), b.shape());
    }
    let (ar, br) = (a.rank(), b.rank());
    let (m, k) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let (kb, n) = if b_t {
        (b.shape()[br - 1], b.shape()[br - 2])
    } else {
        (b.shape()[br - 2], b.shape()[br - 1])
    };
    if k != kb {
        return shape_err(op, a.shape(), b.shape());
    }
    let Some(plan) = batch_plan(&a.shape()[..ar - 2], &b.shape()[..br - 2]) else {
        return shape_err(op, a.shape(), b.shape());
    };
    let mut out = vec![0.0; plan.a_offsets.len() * m * n];
    for (i, (oa, ob)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
        gemm(
            m,
            k,
            n,
            &a.data()[oa * m * k..],
            false,
            &b.data()[ob * k * n..],
            b_t,
            &mut out[i * m * n..],
            false,
        );
    }
    let mut shape = plan.out_batch.clone();
    shape.extend_from_slice(&[m, n]);
    Ok((Tensor::from_parts(shape, out), plan, [m, k, n]))
}

impl<'t> Var<'t> {
    /// Batched matrix product `[.., M, K] · [.., K, N]`.
    ///
    /// Leading dimensions must agree or be 1 (or absent) on one side.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false, "matmul")
    }

    /// Batched `a · bᵀ` with `b` of shape `[.., N, K]`.
    pub fn matmul_nt(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, true, "matmul_nt")
    }

    fn matmul_impl(self, other: Var<'t>, b_t: bool, op: &'static str) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (y, plan, [m, k, n]) = batched_matmul(&a, &b, b_t, op)?;
        let need_a = self.requires_grad();
        let need_b = other.requires_grad();
        self.tape().record(op, &[self, other], y, move |g| {
            let gd = g.data();
            let ga = need_a.then(|| {
                let mut ga = vec![0.0; a.numel()];
                for (i, (&oa, &ob)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
                    // dA = G · op(B)ᵀ
                    gemm(
                        m,
                        n,
                        k,
                        &gd[i * m * n..],
                        false,
                        &b.data()[ob * k * n..],
                        !b_t,
                        &mut ga[oa * m * k..],
                        true,
                    );
                }
                Tensor::from_parts(a.shape().to_vec(), ga)
            });
            let gb = need_b.then(|| {
                let mut gb = vec![0.0; b.numel()];
                for (i, (&oa, &ob)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
                    if b_t {
                        // dB (N×K) = Gᵀ · A
                        gemm(n, m, k, &gd[i * m * n..], true, &a.data()[oa * m * k..], false, &mut gb[ob * k * n..], true);
                    } else {
                        // dB (K×N) = Aᵀ · G
                        gemm(k, m, n, &a.data()[oa * m * k..], true, &gd[i * m * n..], false, &mut gb[ob * k * n..], true);
                    }
                }
                Tensor::from_parts(b.shape().to_vec(), gb)
            });
            vec![ga, gb]
        })
    }

    /// Affine map over the last dimension: `x · Wᵀ + b` with `W` of shape `[out, in]`.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        if w.rank() != 2 || x.last_dim() != w.shape()[1] || x.rank() == 0 {
            return shape_err("linear", x.shape(), w.shape());
        }
        let (out_f, in_f) = (w.shape()[0], w.shape()[1]);
        let rows = x.numel() / in_f;
        let mut y = vec![0.0; rows * out_f];
        gemm(rows, in_f, out_f, x.data(), false, w.data(), true, &mut y, false);
        let b = match bias {
            Some(bv) => {
                let b = bv.value();
                if b.shape() != [out_f] {
                    return shape_err("linear", w.shape(), b.shape());
                }
                for row in y.chunks_mut(out_f) {
                    for (v, bb) in row.iter_mut().zip(b.data()) {
                        *v += bb;
                    }
                }
                Some(bv)
            }
            None => None,
        };
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = out_f;
        let y = Tensor::from_parts(shape, y);
        let need_x = self.requires_grad();
        let need_w = weight.requires_grad();
        let x_saved = need_w.then(|| Rc::clone(&x));
        let w_saved = need_x.then(|| Rc::clone(&w));
        let x_shape = x.shape().to_vec();
        let mut inputs = vec![self, weight];
        inputs.extend(b);
        let has_bias = b.is_some();
        self.tape().record("linear", &inputs, y, move |g| {
            let gd = g.data();
            let gx = w_saved.as_ref().map(|w| {
                let mut gx = vec![0.0; rows * in_f];
                gemm(rows, out_f, in_f, gd, false, w.data(), false, &mut gx, false);
                Tensor::from_parts(x_shape.clone(), gx)
            });
            let gw = x_saved.as_ref().map(|x| {
                let mut gw = vec![0.0; out_f * in_f];
                gemm(out_f, rows, in_f, gd, true, x.data(), false, &mut gw, false);
                Tensor::from_parts(vec![out_f, in_f], gw)
            });
            let mut out = vec![gx, gw];
            if has_bias {
                let mut gb = vec![0.0; out_f];
                for row in gd.chunks(out_f) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                out.push(Some(Tensor::from_parts(vec![out_f], gb)));
            }
            out
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    #[test]
    fn matmul_examples() {
        let tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let m = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(i2.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let v = tape.constant(Tensor::new(&[2, 1], vec![5.0, 6.0]).unwrap());
        assert_eq!(m.matmul(v).unwrap().value().data(), &[17.0, 39.0]);
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(a).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn batch_broadcast_from_one() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[3, 2, 2], |i| i as f64));
        let b = tape.constant(Tensor::eye(2).reshape(&[1, 2, 2]).unwrap());
        let y = a.matmul(b).unwrap();
        assert_eq!(y.shape(), vec![3, 2, 2]);
        assert_eq!(*y.value(), *a.value());
        let bad = tape.constant(Tensor::zeros(&[2, 2, 2]));
        assert!(a.matmul(bad).is_err());
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64 - 1.5));
        let b = tape.constant(Tensor::from_fn(&[4, 3], |i| (i as f64).sin()));
        let y = a.matmul_nt(b).unwrap();
        let bt = b.transpose_last2().unwrap();
        let z = a.matmul(bt).unwrap();
        assert!(y.value().max_abs_diff(&z.value()).unwrap() < 1e-14);
    }

    #[test]
    fn linear_identity() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64 * 0.3));
        let w = tape.constant(Tensor::eye(4));
        let b = tape.constant(Tensor::zeros(&[4]));
        assert_eq!(*x.linear(w, Some(b)).unwrap().value(), *x.value());
    }
}
