//! Dense row-major tensors of 64-bit floats.
//!
//! Plain values with no attached computation record. Recorded, differentiable
//! computation lives in [`crate::autodiff`]; model parameters, datasets and
//! gradients are stored as `Tensor`s between steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense multi-dimensional array, 64-bit floats in row-major order.
///
/// A rank-0 tensor (empty shape) holds exactly one element and is the scalar
/// convention used by reductions and losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} wants {} elements, got {}", shape, expect, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// The single element of a rank-0 or one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += a * x`, elementwise. Shapes must match.
    pub fn axpy(&mut self, a: f64, x: &Tensor) {
        assert_eq!(self.shape, x.shape, "axpy shape mismatch");
        for (s, v) in self.data.iter_mut().zip(&x.data) {
            *s += a * v;
        }
    }

    pub fn scale_in_place(&mut self, a: f64) {
        for s in self.data.iter_mut() {
            *s *= a;
        }
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "dot shape mismatch");
        let mut acc = 0.0;
        for (a, b) in self.data.iter().zip(&other.data) {
            acc += a * b;
        }
        acc
    }

    pub fn squared_norm(&self) -> f64 {
        let mut acc = 0.0;
        for v in &self.data {
            acc += v * v;
        }
        acc
    }

    /// Elementwise clamp into `[lo, hi]`.
    pub fn clamp_in_place(&mut self, lo: f64, hi: f64) {
        for v in self.data.iter_mut() {
            *v = v.clamp(lo, hi);
        }
    }

    /// Rows `start..start+len` of a tensor whose first axis is the sample
    /// axis; the remaining axes are copied whole.
    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor {
        assert!(!self.shape.is_empty());
        let row = self.data.len() / self.shape[0];
        assert!(start + len <= self.shape[0]);
        let mut shape = self.shape.clone();
        shape[0] = len;
        Tensor {
            shape,
            data: self.data[start * row..(start + len) * row].to_vec(),
        }
    }

    /// Gathers the given rows (first axis) into a new tensor, in order.
    pub fn gather_rows(&self, rows: &[usize]) -> Tensor {
        assert!(!self.shape.is_empty());
        let row = if self.shape[0] == 0 {
            0
        } else {
            self.data.len() / self.shape[0]
        };
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        let mut data = Vec::with_capacity(rows.len() * row);
        for &r in rows {
            assert!(r < self.shape[0], "row {} out of range {}", r, self.shape[0]);
            data.extend_from_slice(&self.data[r * row..(r + 1) * row]);
        }
        Tensor { shape, data }
    }

    /// Stacks tensors along a new or existing first axis; all inputs must
    /// share the trailing shape.
    pub fn concat_rows(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let tail = &parts[0].shape[1..];
        let mut n = 0;
        for p in parts {
            assert_eq!(&p.shape[1..], tail, "concat_rows trailing shape mismatch");
            n += p.shape[0];
        }
        let mut shape = parts[0].shape.clone();
        shape[0] = n;
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Tensor { shape, data }
    }
}

/// An ordered set of named tensors. Order is fixed at construction and is the
/// canonical iteration order everywhere (updates, aggregation, serialization),
/// which keeps runs bit-reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct NamedTensors(pub Vec<(String, Tensor)>);

impl NamedTensors {
    pub fn new() -> Self {
        NamedTensors(Vec::new())
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.0.push((name.into(), t));
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.0.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Zeros with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        NamedTensors(
            self.0
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        )
    }

    /// Checks that `other` has the same names and shapes, in the same order.
    pub fn check_compatible(&self, other: &NamedTensors, op: &'static str) -> Result<()> {
        if self.0.len() != other.0.len() {
            return Err(Error::shape(
                op,
                format!("{} tensors vs {}", self.0.len(), other.0.len()),
            ));
        }
        for ((na, ta), (nb, tb)) in self.0.iter().zip(&other.0) {
            if na != nb {
                return Err(Error::shape(op, format!("name `{}` vs `{}`", na, nb)));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::shape(
                    op,
                    format!("`{}`: {:?} vs {:?}", na, ta.shape(), tb.shape()),
                ));
            }
        }
        Ok(())
    }

    /// `self += a * x` across all tensors.
    pub fn axpy(&mut self, a: f64, x: &NamedTensors) {
        assert_eq!(self.0.len(), x.0.len());
        for ((_, t), (_, u)) in self.0.iter_mut().zip(&x.0) {
            t.axpy(a, u);
        }
    }

    pub fn scale_in_place(&mut self, a: f64) {
        for (_, t) in self.0.iter_mut() {
            t.scale_in_place(a);
        }
    }

    /// Elementwise difference `self - other` as a new set.
    pub fn sub(&self, other: &NamedTensors) -> NamedTensors {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn scalar_is_rank_zero() {
        let s = Tensor::scalar(4.5);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.item(), 4.5);
    }

    #[test]
    fn gather_and_slice_rows() {
        let t = Tensor::from_vec(vec![3, 2], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let g = t.gather_rows(&[2, 0]);
        assert_eq!(g.data(), &[4., 5., 0., 1.]);
        let s = t.slice_rows(1, 2);
        assert_eq!(s.data(), &[2., 3., 4., 5.]);
    }

    #[test]
    fn named_compat() {
        let mut a = NamedTensors::new();
        a.push("w", Tensor::zeros(&[2, 2]));
        let mut b = NamedTensors::new();
        b.push("w", Tensor::zeros(&[2, 2]));
        assert!(a.check_compatible(&b, "test").is_ok());
        let mut c = NamedTensors::new();
        c.push("w", Tensor::zeros(&[2, 3]));
        assert!(a.check_compatible(&c, "test").is_err());
    }
}
