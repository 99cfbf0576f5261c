//! State-space machinery: zero-order-hold discretization, the discrete
//! recurrence, its equivalent causal convolution kernel, and the
//! input-dependent (selective) scan used inside the scan branch.
//!
//! The state matrix is diagonal per channel, so every state dimension
//! evolves independently and the recurrence is an elementwise product.

use std::rc::Rc;

use denviscom_tensor::{softplus_inv, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Init, ParamGroup, ParamId, ParamStore, TRUNK_INIT_STD};

/// Below this `|delta * a|` the ZOH input gain uses its series limit.
pub const ZOH_LIMIT: f64 = 1e-8;

/// Continuous single-channel parameters: diagonal `a`, input `b`,
/// output `c` (each of length N) and timescale `delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub delta: f64,
}

/// Discretized single-channel system `h_t = a_bar h_{t-1} + b_bar x_t, y_t = c h_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSsm {
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
    pub c: Vec<f64>,
}

impl SsmParams {
    pub fn discretize(&self) -> Result<DiscreteSsm> {
        if self.c.len() != self.a.len() {
            return Err(Error::Contract(format!(
                "c has {} entries, a has {}",
                self.c.len(),
                self.a.len()
            )));
        }
        let (a_bar, b_bar) = zoh_discretize(&self.a, &self.b, self.delta)?;
        Ok(DiscreteSsm {
            a_bar,
            b_bar,
            c: self.c.clone(),
        })
    }
}

/// `expm1(z) / z`, continuous at zero.
fn expm1_ratio(z: f64) -> f64 {
    if z.abs() < ZOH_LIMIT {
        1.0 + 0.5 * z
    } else {
        z.exp_m1() / z
    }
}

/// Derivative of [`expm1_ratio`].
fn expm1_ratio_deriv(z: f64) -> f64 {
    if z.abs() < 1e-3 {
        0.5 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z * (1.0 / 30.0 + z / 144.0)))
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// Scalar ZOH coefficients `(a_bar, gain)` with `b_bar = gain * b`.
///
/// `a_bar = exp(delta a)` and `gain = (delta a)^-1 (exp(delta a) - 1) delta`;
/// for `|delta a| < ZOH_LIMIT` the gain uses the limit `delta (1 + delta a / 2)`,
/// which is exactly `delta` when `a == 0`.
pub fn zoh_coefficients(a: f64, delta: f64) -> (f64, f64) {
    let z = delta * a;
    (z.exp(), delta * expm1_ratio(z))
}

pub fn zoh_discretize(a: &[f64], b: &[f64], delta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::Contract(format!("delta must be positive and finite, got {delta}")));
    }
    if a.len() != b.len() {
        return Err(Error::Contract(format!("a has {} entries, b has {}", a.len(), b.len())));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&a, &b)| {
            let (a_bar, gain) = zoh_coefficients(a, delta);
            (a_bar, gain * b)
        })
        .unzip())
}

/// Runs the discrete recurrence from `h_0 = 0` over `x`.
pub fn scan_recurrence(ssm: &DiscreteSsm, x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Contract("sequence must have at least one step".into()));
    }
    let mut h = vec![0.0; ssm.a_bar.len()];
    let mut y = Vec::with_capacity(x.len());
    for (t, &xt) in x.iter().enumerate() {
        let mut acc = 0.0;
        for ((h, (&a, &b)), &c) in h.iter_mut().zip(ssm.a_bar.iter().zip(&ssm.b_bar)).zip(&ssm.c) {
            *h = a * *h + b * xt;
            acc += c * *h;
        }
        if !acc.is_finite() || h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step: t });
        }
        y.push(acc);
    }
    Ok(y)
}

/// Convolution kernel `(c b_bar, c a_bar b_bar, ..., c a_bar^{m-1} b_bar)`.
pub fn lti_kernel(ssm: &DiscreteSsm, m: usize) -> Result<Vec<f64>> {
    if m < 1 {
        return Err(Error::Contract("kernel length must be at least 1".into()));
    }
    let mut power: Vec<f64> = ssm.b_bar.clone();
    let mut kernel = Vec::with_capacity(m);
    for _ in 0..m {
        kernel.push(power.iter().zip(&ssm.c).map(|(p, c)| p * c).sum());
        for (p, a) in power.iter_mut().zip(&ssm.a_bar) {
            *p *= a;
        }
    }
    Ok(kernel)
}

/// Causal convolution `y_t = sum_{k <= t} kernel[k] x_{t-k}`.
///
/// Taps beyond the sequence length are ignored, so a kernel longer than
/// `x` is effectively truncated to `x.len()`.
pub fn lti_convolve(x: &[f64], kernel: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|t| {
            kernel
                .iter()
                .take(t + 1)
                .enumerate()
                .map(|(k, kv)| kv * x[t - k])
                .sum()
        })
        .collect()
}

/// Time-varying diagonal scan over `[B, C, L]` inputs, recorded on the tape.
///
/// * `x`, `delta`: `[B, C, L]` (delta must be positive)
/// * `a`: `[C, N]` continuous diagonal state entries
/// * `b`, `c`: `[B, L, N]` per-position input and output projections
///
/// `h_t = exp(delta_t a) h_{t-1} + gain(delta_t, a) b_t x_t`, `y_t = c_t . h_t`,
/// with the ZOH gain of [`zoh_coefficients`].
pub fn selective_scan<'t>(x: Var<'t>, delta: Var<'t>, a: Var<'t>, b: Var<'t>, c: Var<'t>) -> Result<Var<'t>> {
    let (xv, dv, av, bv, cv) = (x.value(), delta.value(), a.value(), b.value(), c.value());
    let xs = xv.shape();
    if xs.len() != 3 || dv.shape() != xs || av.rank() != 2 || av.shape()[0] != xs[1] {
        return Err(Error::Contract(format!(
            "selective_scan: x {:?}, delta {:?}, a {:?}",
            xs,
            dv.shape(),
            av.shape()
        )));
    }
    let (nb, nc, nl, ns) = (xs[0], xs[1], xs[2], av.shape()[1]);
    if bv.shape() != [nb, nl, ns] || cv.shape() != [nb, nl, ns] {
        return Err(Error::Contract(format!(
            "selective_scan: b {:?} / c {:?} must be [{nb}, {nl}, {ns}]",
            bv.shape(),
            cv.shape()
        )));
    }
    if let Some(i) = dv.data().iter().position(|&d| !(d > 0.0)) {
        return Err(Error::Contract(format!("selective_scan: delta[{i}] is not positive")));
    }

    // states[((b * C + c) * L + t) * N + n] = h_t[n]
    let mut states = vec![0.0; nb * nc * nl * ns];
    let mut y = vec![0.0; nb * nc * nl];
    let mut h = vec![0.0; ns];
    for bi in 0..nb {
        for ci in 0..nc {
            h.fill(0.0);
            let a_row = &av.data()[ci * ns..(ci + 1) * ns];
            let base = (bi * nc + ci) * nl;
            for t in 0..nl {
                let (xt, dt) = (xv.data()[base + t], dv.data()[base + t]);
                let bt = &bv.data()[(bi * nl + t) * ns..(bi * nl + t + 1) * ns];
                let ct = &cv.data()[(bi * nl + t) * ns..(bi * nl + t + 1) * ns];
                let mut acc = 0.0;
                for n in 0..ns {
                    let (a_bar, gain) = zoh_coefficients(a_row[n], dt);
                    h[n] = a_bar * h[n] + gain * bt[n] * xt;
                    acc += ct[n] * h[n];
                }
                if !acc.is_finite() {
                    return Err(Error::NonFiniteState { step: t });
                }
                states[(base + t) * ns..(base + t + 1) * ns].copy_from_slice(&h);
                y[base + t] = acc;
            }
        }
    }
    let y = Tensor::new(&[nb, nc, nl], y)?;
    let states = Rc::new(states);
    let out = x.tape().record("selective_scan", &[x, delta, a, b, c], y, move |g| {
        let mut gx = vec![0.0; nb * nc * nl];
        let mut gd = vec![0.0; nb * nc * nl];
        let mut ga = vec![0.0; nc * ns];
        let mut gb = vec![0.0; nb * nl * ns];
        let mut gc = vec![0.0; nb * nl * ns];
        let mut carry = vec![0.0; ns];
        for bi in 0..nb {
            for ci in 0..nc {
                carry.fill(0.0);
                let a_row = &av.data()[ci * ns..(ci + 1) * ns];
                let base = (bi * nc + ci) * nl;
                for t in (0..nl).rev() {
                    let (xt, dt, gy) = (xv.data()[base + t], dv.data()[base + t], g.data()[base + t]);
                    let boff = (bi * nl + t) * ns;
                    let h_t = &states[(base + t) * ns..(base + t + 1) * ns];
                    for n in 0..ns {
                        let an = a_row[n];
                        let z = dt * an;
                        let a_bar = z.exp();
                        let gain = dt * expm1_ratio(z);
                        let h_prev = if t > 0 { states[(base + t - 1) * ns + n] } else { 0.0 };
                        let bn = bv.data()[boff + n];
                        let dh = cv.data()[boff + n] * gy + carry[n];
                        gc[boff + n] += gy * h_t[n];
                        gx[base + t] += dh * gain * bn;
                        let d_bbar = dh * xt;
                        gb[boff + n] += d_bbar * gain;
                        let d_gain = d_bbar * bn;
                        let d_abar = dh * h_prev;
                        gd[base + t] += d_abar * an * a_bar + d_gain * a_bar;
                        ga[ci * ns + n] += d_abar * dt * a_bar + d_gain * dt * dt * expm1_ratio_deriv(z);
                        carry[n] = a_bar * dh;
                    }
                }
            }
        }
        vec![
            Some(Tensor::new(&[nb, nc, nl], gx).expect("shape")),
            Some(Tensor::new(&[nb, nc, nl], gd).expect("shape")),
            Some(Tensor::new(&[nc, ns], ga).expect("shape")),
            Some(Tensor::new(&[nb, nl, ns], gb).expect("shape")),
            Some(Tensor::new(&[nb, nl, ns], gc).expect("shape")),
        ]
    })?;
    Ok(out)
}

/// Whether the scan parameters depend on the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    /// `delta_t`, `b_t`, `c_t` are linear functions of `x_t`.
    #[default]
    Selective,
    /// Only the projection biases are used, giving a time-invariant system.
    Lti,
}

/// Learned selective-scan layer over `[B, C, L]` sequences.
#[derive(Debug, Clone, Copy)]
pub struct SelectiveScan {
    pub a_log: ParamId,
    pub w_delta: ParamId,
    pub b_delta: ParamId,
    pub w_b: ParamId,
    pub b_b: ParamId,
    pub w_c: ParamId,
    pub b_c: ParamId,
    pub channels: usize,
    pub state: usize,
    pub mode: ScanMode,
}

impl SelectiveScan {
    pub const DELTA_MIN: f64 = 1e-3;
    pub const DELTA_MAX: f64 = 1e-1;

    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, channels: usize, state: usize, mode: ScanMode) -> Self {
        let g = ParamGroup::TrunkBlocks;
        // A = -exp(a_log) starts at -(1..=N) in every channel.
        let a_log = Tensor::from_fn(&[channels, state], |i| ((i % state) as f64 + 1.0).ln());
        let (lo, hi) = (Self::DELTA_MIN.ln(), Self::DELTA_MAX.ln());
        let b_delta = init.uniform(&[channels], lo, hi).map(|u| softplus_inv(u.exp()));
        let in_std = 1.0 / (channels as f64).sqrt();
        Self {
            a_log: store.add(format!("{name}.a_log"), g, a_log),
            w_delta: store.add(format!("{name}.w_delta"), g, init.normal(&[channels, channels], TRUNK_INIT_STD)),
            b_delta: store.add(format!("{name}.b_delta"), g, b_delta),
            w_b: store.add(format!("{name}.w_b"), g, init.normal(&[state, channels], in_std)),
            b_b: store.add(format!("{name}.b_b"), g, init.normal(&[state], 0.5)),
            w_c: store.add(format!("{name}.w_c"), g, init.normal(&[state, channels], in_std)),
            b_c: store.add(format!("{name}.b_c"), g, init.normal(&[state], 0.5)),
            channels,
            state,
            mode,
        }
    }

    /// Continuous state entries `A = -exp(a_log)`.
    pub fn state_matrix<'t>(&self, p: &Bound<'t>) -> Result<Var<'t>> {
        Ok(p.get(self.a_log).exp()?.scale(-1.0)?)
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[1] != self.channels {
            return Err(Error::Contract(format!(
                "selective scan expects [B, {}, L], got {shape:?}",
                self.channels
            )));
        }
        let (nb, nc, nl, ns) = (shape[0], shape[1], shape[2], self.state);
        let a = self.state_matrix(p)?;
        let (delta, b, c) = match self.mode {
            ScanMode::Selective => {
                let xt = x.transpose_last2()?;
                let delta = xt
                    .linear(p.get(self.w_delta), Some(p.get(self.b_delta)))?
                    .softplus()?
                    .transpose_last2()?;
                let b = xt.linear(p.get(self.w_b), Some(p.get(self.b_b)))?;
                let c = xt.linear(p.get(self.w_c), Some(p.get(self.b_c)))?;
                (delta, b, c)
            }
            ScanMode::Lti => {
                let delta_idx: Rc<[usize]> = (0..nb * nc * nl).map(|i| (i / nl) % nc).collect();
                let proj_idx: Rc<[usize]> = (0..nb * nl * ns).map(|i| i % ns).collect();
                let delta = p.get(self.b_delta).softplus()?.gather(delta_idx, &[nb, nc, nl])?;
                let b = p.get(self.b_b).gather(Rc::clone(&proj_idx), &[nb, nl, ns])?;
                let c = p.get(self.b_c).gather(proj_idx, &[nb, nl, ns])?;
                (delta, b, c)
            }
        };
        selective_scan(x, delta, a, b, c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zoh_scalar_examples() {
        let (a_bar, b_bar) = zoh_discretize(&[0.0], &[2.0], 0.5).unwrap();
        assert_eq!((a_bar[0], b_bar[0]), (1.0, 1.0));
        let (a_bar, b_bar) = zoh_discretize(&[-1.0], &[1.0], 2f64.ln()).unwrap();
        assert!((a_bar[0] - 0.5).abs() < 1e-15);
        assert!((b_bar[0] - 0.5).abs() < 1e-15);
        assert!(zoh_discretize(&[-1.0], &[1.0], 0.0).is_err());
        assert!(zoh_discretize(&[-1.0], &[1.0], -0.1).is_err());
    }

    #[test]
    fn stable_a_gives_unit_interval_a_bar() {
        for &a in &[-1e-12, -0.3, -5.0, -50.0] {
            let (a_bar, _) = zoh_coefficients(a, 0.7);
            assert!(a_bar > 0.0 && a_bar <= 1.0);
        }
    }

    #[test]
    fn recurrence_examples() {
        let ssm = DiscreteSsm {
            a_bar: vec![0.5],
            b_bar: vec![0.5],
            c: vec![2.0],
        };
        assert_eq!(scan_recurrence(&ssm, &[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.5, 0.25]);
        assert_eq!(scan_recurrence(&ssm, &[0.0; 4]).unwrap(), vec![0.0; 4]);
        assert!(scan_recurrence(&ssm, &[]).is_err());
        assert_eq!(lti_kernel(&ssm, 3).unwrap(), vec![1.0, 0.5, 0.25]);
    }

    #[test]
    fn recurrence_reports_blowup_step() {
        let ssm = DiscreteSsm {
            a_bar: vec![1e300],
            b_bar: vec![1.0],
            c: vec![1.0],
        };
        assert!(matches!(
            scan_recurrence(&ssm, &[1.0, 0.0, 0.0]),
            Err(Error::NonFiniteState { step: 2 })
        ));
    }

    #[test]
    fn kernel_examples() {
        let zero_c = DiscreteSsm {
            a_bar: vec![0.3, 0.9],
            b_bar: vec![1.0, 2.0],
            c: vec![0.0, 0.0],
        };
        assert_eq!(lti_kernel(&zero_c, 5).unwrap(), vec![0.0; 5]);
        let unit = DiscreteSsm {
            a_bar: vec![1.0],
            b_bar: vec![1.0],
            c: vec![1.0],
        };
        assert_eq!(lti_kernel(&unit, 4).unwrap(), vec![1.0; 4]);
        assert!(lti_kernel(&unit, 0).is_err());
    }

    #[test]
    fn convolve_examples() {
        let x = [0.3, -1.0, 2.5, 4.0];
        assert_eq!(lti_convolve(&x, &[1.0, 0.0, 0.0, 0.0]), x.to_vec());
        let k = [0.5, 0.25, -0.125];
        assert_eq!(lti_convolve(&[1.0, 0.0, 0.0], &k), k.to_vec());
        // kernel longer than the sequence is truncated
        assert_eq!(lti_convolve(&[1.0, 2.0], &[1.0, 1.0, 1.0, 1.0]), vec![1.0, 3.0]);
    }

    #[test]
    fn expm1_ratio_derivative_branches_agree() {
        for &z in &[-2e-3, -9.9e-4, -1.01e-3, 5e-4, 1.2e-3] {
            let h = 1e-6;
            let fd = (expm1_ratio(z + h) - expm1_ratio(z - h)) / (2.0 * h);
            assert!((expm1_ratio_deriv(z) - fd).abs() < 1e-8, "z = {z}");
        }
    }
}
