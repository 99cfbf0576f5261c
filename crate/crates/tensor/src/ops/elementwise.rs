use std::rc::Rc;

use crate::error::{shape_err, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl<'t> Var<'t> {
    fn unary(
        self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let y = x.map(f);
        let y_saved = Rc::new(y.clone());
        self.tape().record(op, &[self], y, move |g| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y_saved.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    pub fn silu(self) -> Result<Var<'t>> {
        self.unary("silu", silu, |x, _| {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        })
    }

    pub fn gelu(self) -> Result<Var<'t>> {
        self.unary("gelu", gelu, |x, _| {
            let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
        })
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn abs(self) -> Result<Var<'t>> {
        self.unary("abs", f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        self.unary("scale", move |x| s * x, move |_, _| s)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", move |x| x + c, |_, _| 1.0)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let y = a.zip_map(&b, "add", |a, b| a + b)?;
        self.tape()
            .record("add", &[self, other], y, |g| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let y = a.zip_map(&b, "sub", |a, b| a - b)?;
        self.tape()
            .record("sub", &[self, other], y, |g| vec![Some(g.clone()), Some(g.map(|v| -v))])
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let y = a.zip_map(&b, "mul", |a, b| a * b)?;
        let a_needed = other.requires_grad().then(|| Rc::clone(&a));
        let b_needed = self.requires_grad().then(|| Rc::clone(&b));
        self.tape().record("mul", &[self, other], y, move |g| {
            let ga = b_needed.as_ref().map(|b| g.zip_map(b, "mul", |g, b| g * b).expect("shape"));
            let gb = a_needed.as_ref().map(|a| g.zip_map(a, "mul", |g, a| g * a).expect("shape"));
            vec![ga, gb]
        })
    }

    /// Adds a vector along the last dimension (`bias.shape() == [last_dim]`).
    pub fn add_lastdim(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        let n = x.last_dim();
        if b.shape() != [n] {
            return shape_err("add_lastdim", x.shape(), b.shape());
        }
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        self.tape().record("add_lastdim", &[self, bias], y, move |g| {
            let mut gb = vec![0.0; n];
            for row in g.data().chunks(n) {
                for (acc, v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            vec![Some(g.clone()), Some(Tensor::from_parts(vec![n], gb))]
        })
    }

    /// Sum over all elements, producing a 0-dimensional tensor.
    pub fn sum(self) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let y = Tensor::scalar(x.sum());
        self.tape().record("sum", &[self], y, move |g| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().numel() as f64;
        self.sum()?.scale(1.0 / n)
    }
}
