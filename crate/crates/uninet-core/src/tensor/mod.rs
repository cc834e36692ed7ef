//! Dense f64 tensors and a reverse-mode tape for the small networks in this
//! crate. Everything runs on CPU; parallelism happens one level up (across
//! samples), so all kernels here are single-threaded and deterministic.

mod gemm;
pub mod gradcheck;
mod tape;
mod tape_nn;
#[cfg(test)]
mod tests;

pub use gemm::gemm;
pub use tape::{sigmoid_scalar, softmax_slice, Grads, Tape, VarId};
pub use tape_nn::PinholeProj;

use std::sync::Arc;

/// A dense row-major f64 tensor. Cloning is cheap (shared storage);
/// mutation copies on write.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {:?} does not match data length {}", shape, data.len());
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![0.0; n]) }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![value; n]) }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: Arc::new(vec![v]) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        let v: &mut Vec<f64> = Arc::make_mut(&mut self.data);
        v.as_mut_slice()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.data.len(), "reshape {:?} -> {:?}", self.shape, shape);
        Tensor { shape, data: Arc::clone(&self.data) }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise a + s*b into a fresh tensor.
    pub fn axpy(&self, s: f64, b: &Tensor) -> Tensor {
        assert_eq!(self.shape, b.shape);
        let data = self
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(&x, &y)| x + s * y)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// Accumulate s*b into self in place.
    pub fn add_scaled(&mut self, s: f64, b: &Tensor) {
        assert_eq!(self.shape, b.shape);
        let dst = self.data_mut();
        for (d, &v) in dst.iter_mut().zip(b.data.iter()) {
            *d += s * v;
        }
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}
