use std::fmt;

use crate::error::{contract, shape_err, Result, TensorError};

/// Dense row-major array of `f64` values.
///
/// A zero-dimensional tensor (empty shape) holds a single scalar.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return contract("Tensor::new", format!("zero-sized dimension in {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err("Tensor::new", shape, &[data.len()]);
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a tensor whose shape is known to match `data`; used by ops.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return contract("item", format!("tensor of shape {:?} is not a scalar", self.shape));
        }
        Ok(self.data[0])
    }

    /// Size of the trailing dimension (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return shape_err("reshape", &self.shape, shape);
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(op, &self.shape, &other.shape);
        }
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    /// Returns the first flat index holding NaN or an infinity.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        match self.first_non_finite() {
            Some(index) => Err(TensorError::NonFinite { op, index }),
            None => Ok(self),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return shape_err("max_abs_diff", &self.shape, &other.shape);
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Numerically stable softmax along the last dimension.
    ///
    /// Entries equal to `-inf` receive exactly zero probability; a slice in
    /// which every entry is `-inf` is rejected.
    pub fn softmax_lastdim(&self) -> Result<Self> {
        let n = self.last_dim();
        let mut out = self.data.clone();
        for (row_idx, row) in out.chunks_mut(n).enumerate() {
            softmax_row(row).map_err(|_| TensorError::Degenerate {
                op: "softmax_lastdim",
                msg: format!("slice {row_idx} is entirely masked"),
            })?;
        }
        Self::from_parts(self.shape.clone(), out).ensure_finite("softmax_lastdim")
    }
}

/// In-place softmax of one slice; errors when no entry is finite.
pub(crate) fn softmax_row(row: &mut [f64]) -> std::result::Result<(), ()> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return Err(());
    }
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = if *v == f64::NEG_INFINITY { 0.0 } else { (*v - max).exp() };
        total += *v;
    }
    let inv = 1.0 / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
    Ok(())
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.6}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ... ({} values)", self.data.len())?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        assert!(matches!(
            Tensor::new(&[2, 2], vec![1.0; 3]),
            Err(TensorError::Shape { .. })
        ));
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::new(&[3], vec![0.0; 3]).unwrap().softmax_lastdim().unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = Tensor::new(&[2], vec![0.0, 3f64.ln()]).unwrap().softmax_lastdim().unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
        let s = Tensor::new(&[2], vec![1000.0, 1000.0]).unwrap().softmax_lastdim().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_masked_entries_are_exactly_zero() {
        let s = Tensor::new(&[3], vec![1.0, f64::NEG_INFINITY, 2.0])
            .unwrap()
            .softmax_lastdim()
            .unwrap();
        assert_eq!(s.data()[1], 0.0);
        assert!((s.sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_all_masked_is_degenerate() {
        let t = Tensor::new(&[2, 2], vec![0.0, 1.0, f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap();
        assert!(matches!(t.softmax_lastdim(), Err(TensorError::Degenerate { .. })));
    }
}
