//! Minimal reverse-mode autodiff over dense `f64` tensors.
//!
//! A [`Graph`] is a define-by-run tape: every op validates its input shapes,
//! computes its value eagerly and records what it needs for the backward
//! pass. Parameters live in a [`ParamStore`] and are copied onto the tape by
//! name, so gradients come back keyed by the same names.

mod conv;
mod graph;
mod optim;
mod store;

pub use graph::{BnBatchStats, Gradients, Graph, Mode, OpKind, Var};
pub use optim::{sgd_step, Sgd};
pub use store::{BnState, ParamStore};

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// BatchNorm momentum used for running-statistics updates.
pub const BN_MOMENTUM: f64 = 0.1;
/// BatchNorm epsilon.
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Shape {
                op: "tensor",
                detail: format!("zero-sized dimension in {shape:?}"),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// He-normal init: N(0, 2 / fan_in) where fan_in is the product of all
    /// but the first dimension.
    pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
        let std = (2.0 / fan_in as f64).sqrt();
        Self::randn(shape, std, rng)
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Leading-corner slice: keeps the first `shape[d]` entries of every
    /// dimension `d`.
    pub fn prefix(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.len() != self.shape.len() || shape.iter().zip(&self.shape).any(|(a, b)| a > b) {
            return Err(TensorError::Shape {
                op: "prefix",
                detail: format!("{shape:?} is not a prefix of {:?}", self.shape),
            });
        }
        let mut out = Tensor::zeros(shape);
        for_each_prefix_index(shape, &self.shape, |dst, src| out.data[dst] = self.data[src]);
        Ok(out)
    }

    /// Adds `src` into the leading corner of `self`.
    pub fn add_prefix(&mut self, src: &Tensor) -> Result<()> {
        if src.shape.len() != self.shape.len()
            || src.shape.iter().zip(&self.shape).any(|(a, b)| a > b)
        {
            return Err(TensorError::Shape {
                op: "add_prefix",
                detail: format!("{:?} does not fit in {:?}", src.shape, self.shape),
            });
        }
        let shape = src.shape.clone();
        for_each_prefix_index(&shape, &self.shape.clone(), |s, d| self.data[d] += src.data[s]);
        Ok(())
    }
}

/// Calls `f(small_index, big_index)` for every element of the leading
/// `small` corner inside a `big` tensor.
pub(crate) fn for_each_prefix_index(small: &[usize], big: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = small.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let mut big_strides = vec![1usize; rank];
    for d in (0..rank - 1).rev() {
        big_strides[d] = big_strides[d + 1] * big[d + 1];
    }
    let total: usize = small.iter().product();
    let inner = small[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut s = 0;
    while s < total {
        let base: usize = idx.iter().zip(&big_strides).map(|(i, st)| i * st).sum();
        for j in 0..inner {
            f(s + j, base + j);
        }
        s += inner;
        // odometer over all but the last dimension
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            if idx[d] < small[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lengths() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn prefix_and_add_prefix() {
        let t = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let p = t.prefix(&[2, 2]).unwrap();
        assert_eq!(p.data(), &[1., 2., 4., 5.]);
        let mut z = Tensor::zeros(&[2, 3]);
        z.add_prefix(&p).unwrap();
        assert_eq!(z.data(), &[1., 2., 0., 4., 5., 0.]);
        assert!(t.prefix(&[3, 1]).is_err());
    }
}
