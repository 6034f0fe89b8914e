//! Dense row-major tensors over `f32` or `f64`.
//!
//! Values are immutable once built; clones share storage via `Arc`. Training
//! runs in `f32`, numerical test oracles in `f64`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Scalar element type for tensors. Implemented for `f32` and `f64`.
pub trait Element:
    num_traits::Float + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    fn of(x: f64) -> Self;
    fn to64(self) -> f64;
}

impl Element for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn to64(self) -> f64 {
        self
    }
}

/// Dense tensor: a shape plus row-major values.
#[derive(Clone, Debug)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
}

impl<E: Element> PartialEq for Tensor<E> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && *self.data == *other.data
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    let mut n: usize = 1;
    for &d in shape {
        if d == 0 {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::Shape(format!("shape {shape:?} overflows")))?;
    }
    Ok(n)
}

impl<E: Element> Tensor<E> {
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![E::zero(); n]),
        }
    }

    pub fn filled(shape: &[usize], v: E) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; n]),
        }
    }

    pub fn scalar(v: E) -> Self {
        Self {
            shape: vec![1],
            data: Arc::new(vec![v]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on tensor with {} values", self.numel());
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Mutable access; copies storage if shared.
    pub fn data_mut(&mut self) -> &mut [E] {
        let v: &mut Vec<E> = Arc::make_mut(&mut self.data);
        v.as_mut_slice()
    }

    /// Same data, new shape (element count must match).
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} values) to {shape:?} ({n} values)",
                self.shape,
                self.numel()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(E, E) -> E) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite values in {what}")))
        }
    }

    /// Accumulate `other` into `self` elementwise.
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        let dst = self.data_mut();
        for (d, s) in dst.iter_mut().zip(other.data.iter()) {
            *d = *d + *s;
        }
    }

    pub fn fill(&mut self, v: E) {
        for d in self.data_mut() {
            *d = v;
        }
    }

    /// Cast elementwise to another element type.
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| F::of(x.to64())).collect()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn element_count_must_match_shape() {
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(matches!(
            Tensor::<f64>::from_vec(&[2, 0], vec![]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn finite_check_flags_nan() {
        let t = Tensor::from_vec(&[2], vec![1.0f64, f64::NAN]).unwrap();
        assert!(t.check_finite("t").is_err());
    }

    #[test]
    fn reshape_shares_data() {
        let t = Tensor::from_vec(&[2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        let r = t.reshaped(&[6]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[4]).is_err());
    }
}
