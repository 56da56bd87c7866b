//! Dense n-dimensional tensors and the reverse-mode differentiation tape.
//!
//! A [`Tensor`] is an immutable row-major buffer plus a shape. Gradient
//! tracking lives entirely in [`Tape`]: forward operations are recorded as
//! tape nodes identified by [`Val`] handles, and [`Tape::backward`] replays
//! the recording in reverse with a fixed accumulation order, so results are
//! reproducible bit-for-bit for a fixed seed.

mod gradcheck;
pub(crate) mod kernels;
mod scalar;
mod tape;

pub use gradcheck::grad_check;
pub use scalar::{Dtype, Scalar};
pub use tape::{BinFn, Grads, Tape, UnaryFn, Val};

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Immutable dense tensor: positive extents, row-major flat buffer.
///
/// Cloning is cheap (the buffer is shared behind an [`Arc`]); tensors with no
/// tape attachment are plain values and safe to share across threads.
#[derive(Clone)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor<{}>{:?}", S::DTYPE, self.shape)?;
        if self.len() <= 16 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::shape("empty shape list"));
    }
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::shape(format!("zero extent in shape {shape:?}")));
    }
    Ok(())
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    /// Build a tensor from a shape and a matching flat buffer.
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        check_shape(&shape)?;
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, buffer has {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![S::zero(); numel(shape)]),
        })
    }

    pub fn full(shape: &[usize], value: S) -> Result<Self> {
        check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel(shape)]),
        })
    }

    /// Normal samples drawn from `rng` in flat index order.
    pub fn randn(shape: &[usize], mean: f64, std: f64, rng: &mut impl Rng) -> Result<Self> {
        check_shape(shape)?;
        let n = numel(shape);
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            data.push(S::from_f64(mean + std * z));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    /// Reproducible normal fill: same `(seed, shape)` gives the same buffer.
    pub fn randn_seeded(shape: &[usize], mean: f64, std: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::randn(shape, mean, std, &mut rng)
    }

    /// Identity matrix of extent `n`.
    pub fn eye(n: usize) -> Result<Self> {
        check_shape(&[n])?;
        let mut data = vec![S::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = S::one();
        }
        Ok(Tensor {
            shape: vec![n, n],
            data: Arc::new(data),
        })
    }

    /// One-element tensor holding `v`.
    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![v]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // extents are positive by construction
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Single element of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.len() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape)?;
        if numel(&shape) != self.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|x| x.as_f64()).collect()),
        }
    }

    pub fn from_f64_tensor(t: &Tensor<f64>) -> Self {
        Tensor {
            shape: t.shape.clone(),
            data: Arc::new(t.data.iter().map(|&x| S::from_f64(x)).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute elementwise difference; error on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0f64, f64::max))
    }

    /// Exact buffer and shape equality (bitwise for the payload).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_fill() {
        let t = Tensor::<f64>::zeros(&[2, 2]).unwrap();
        assert_eq!(t.data(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_fill() {
        let t = Tensor::<f64>::full(&[3], 1.5).unwrap();
        assert_eq!(t.data(), &[1.5, 1.5, 1.5]);
    }

    #[test]
    fn seeded_normal_is_reproducible() {
        let a = Tensor::<f64>::randn_seeded(&[4], 0.0, 1.0, 7).unwrap();
        let b = Tensor::<f64>::randn_seeded(&[4], 0.0, 1.0, 7).unwrap();
        assert!(a.bit_eq(&b));
        let c = Tensor::<f64>::randn_seeded(&[4], 0.0, 1.0, 8).unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(Tensor::<f32>::zeros(&[]).is_err());
        assert!(Tensor::<f32>::zeros(&[2, 0]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn reshape_roundtrip() {
        let t = Tensor::<f64>::from_vec(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let flat = t.reshaped(vec![1, 4]).unwrap();
        assert_eq!(flat.data(), &[1.0, 2.0, 3.0, 4.0]);
        let back = flat.reshaped(vec![1, 2, 2]).unwrap();
        assert!(back.bit_eq(&t));
    }
}
