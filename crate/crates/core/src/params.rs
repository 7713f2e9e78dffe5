//! Uniform access to the trainable tensors of a parameter record.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A fixed, ordered collection of tensors.
///
/// `tensors`, `tensors_mut` and `names` must enumerate in the same order.
pub trait Parameters<S: Scalar> {
    fn tensors(&self) -> Vec<&Tensor<S>>;

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>>;

    fn names(&self) -> Vec<String> {
        (0..self.tensors().len())
            .map(|i| format!("param{i}"))
            .collect()
    }

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

impl<S: Scalar> Parameters<S> for Vec<Tensor<S>> {
    fn tensors(&self) -> Vec<&Tensor<S>> {
        self.iter().collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.iter_mut().collect()
    }
}
