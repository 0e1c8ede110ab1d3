//! Dense row-major matrices with an optional gradient slot.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense real matrix. Row-major storage, optional same-shape gradient
/// accumulator. All public constructors reject non-finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2<S: Scalar> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor2<S> {
    pub fn new(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "Tensor2::new",
                message: format!(
                    "data length {} does not match {}x{}",
                    data.len(),
                    rows,
                    cols
                ),
            });
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite entry {bad} in {rows}x{cols} tensor"
            )));
        }
        Ok(Self {
            rows,
            cols,
            data,
            grad: None,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
            grad: None,
        }
    }

    pub fn filled(rows: usize, cols: usize, value: S) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
            grad: None,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self {
            rows,
            cols,
            data,
            grad: None,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { S::one() } else { S::zero() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> S {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: S) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    /// The gradient accumulator, when one has been attached.
    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    /// Gradient as a plain tensor of the same shape.
    pub fn grad_tensor(&self) -> Option<Tensor2<S>> {
        self.grad.as_ref().map(|g| Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: g.clone(),
            grad: None,
        })
    }

    /// Attach a zeroed gradient slot if absent, then expose it mutably.
    pub fn grad_mut(&mut self) -> &mut [S] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![S::zero(); n])
    }

    pub fn has_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `other`'s values into this tensor's gradient slot.
    pub fn accumulate_grad(&mut self, other: &Tensor2<S>) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dims("accumulate_grad", self.shape(), other.shape()));
        }
        let g = self.grad_mut();
        for (gi, oi) in g.iter_mut().zip(other.data.iter()) {
            *gi += *oi;
        }
        Ok(())
    }

    /// Row `i` as a slice.
    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// New tensor made of the given rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor2<S> {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor2 {
            rows: idx.len(),
            cols: self.cols,
            data,
            grad: None,
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor2<S> {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn transpose(&self) -> Tensor2<S> {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Tensor2<S>) -> Result<Tensor2<S>> {
        if self.cols != other.rows {
            return Err(Error::dims("matmul", self.shape(), other.shape()));
        }
        let mut out = Tensor2::zeros(self.rows, other.cols);
        matmul_into(
            &self.data,
            &other.data,
            &mut out.data,
            self.rows,
            self.cols,
            other.cols,
        );
        Ok(out)
    }

    pub fn add(&self, other: &Tensor2<S>) -> Result<Tensor2<S>> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor2<S>) -> Result<Tensor2<S>> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor2<S>) -> Result<Tensor2<S>> {
        self.zip(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, c: S) -> Tensor2<S> {
        self.map(|v| v * c)
    }

    fn zip(
        &self,
        other: &Tensor2<S>,
        op: &'static str,
        f: impl Fn(S, S) -> S,
    ) -> Result<Tensor2<S>> {
        if self.shape() != other.shape() {
            return Err(Error::dims(op, self.shape(), other.shape()));
        }
        Ok(Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
            grad: None,
        })
    }

    /// Squared Frobenius norm: sum of squared entries.
    pub fn frobenius_sq(&self) -> S {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// Frobenius inner product with another tensor of the same shape.
    pub fn frobenius_dot(&self, other: &Tensor2<S>) -> Result<S> {
        if self.shape() != other.shape() {
            return Err(Error::dims("frobenius_dot", self.shape(), other.shape()));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc.max(v.abs()))
    }

    /// Largest absolute element-wise difference against `other`.
    pub fn max_abs_diff(&self, other: &Tensor2<S>) -> Result<S> {
        if self.shape() != other.shape() {
            return Err(Error::dims("max_abs_diff", self.shape(), other.shape()));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(S::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }

    /// Exact bit equality of the value payloads (ignores gradient slots).
    pub fn bits_eq(&self, other: &Tensor2<S>) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a == b || (a.is_nan() && b.is_nan()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &S> {
        self.data.iter()
    }
}

/// Shared inner kernel: `out += a(m x k) * b(k x n)` with `out` zeroed by caller.
pub(crate) fn matmul_into<S: Scalar>(
    a: &[S],
    b: &[S],
    out: &mut [S],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = Tensor2<f64>;

    #[test]
    fn new_validates_length_and_finiteness() {
        assert!(T::new(2, 2, vec![1.0, 2.0, 3.0]).is_err());
        assert!(T::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(T::new(1, 2, vec![1.0, f64::INFINITY]).is_err());
        assert!(T::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).is_ok());
    }

    #[test]
    fn identity_matmul_is_identity() {
        let m = T::new(3, 2, vec![1.0, -2.0, 0.5, 4.0, 9.0, -7.0]).unwrap();
        let id = T::identity(3);
        assert!(id.matmul(&m).unwrap().bits_eq(&m));
    }

    #[test]
    fn matmul_direct_substitution() {
        // [[1,2],[3,4]] * [[0],[1]] = [[2],[4]]
        let a = T::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = T::new(2, 1, vec![0.0, 1.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = T::zeros(2, 3);
        let b = T::zeros(4, 2);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("4x2"), "{err}");
    }

    #[test]
    fn frobenius_three_four_five() {
        let m = T::new(1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(m.frobenius_sq(), 25.0);
        assert_eq!(T::zeros(4, 5).frobenius_sq(), 0.0);
    }

    #[test]
    fn transpose_round_trip() {
        let m = T::from_fn(3, 5, |i, j| (i * 5 + j) as f64);
        assert!(m.transpose().transpose().bits_eq(&m));
    }

    #[test]
    fn large_magnitude_inputs_stay_finite() {
        // inputs up to 1e6 keep every plain operation finite
        let a = T::from_fn(8, 8, |i, j| if (i + j) % 2 == 0 { 1e6 } else { -1e6 });
        let b = a.transpose();
        let prod = a.matmul(&b).unwrap();
        assert!(prod.iter().all(|v| v.is_finite()));
        assert!(a.frobenius_sq().is_finite());
        assert!(a.hadamard(&b).unwrap().iter().all(|v| v.is_finite()));
        assert!(a.add(&b).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn grad_slot_shape_tracks_data() {
        let mut m = T::zeros(2, 3);
        assert!(m.grad().is_none());
        m.grad_mut()[4] = 1.5;
        assert_eq!(m.grad().unwrap().len(), 6);
        m.clear_grad();
        assert!(m.grad().is_none());
    }
}
