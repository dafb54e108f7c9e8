use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor with an optional gradient slot.
///
/// Invariants: `product(shape) == data.len()`, and `grad`, when present,
/// has the same length as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// 2-D constructor; `data` is row-major.
    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Self::from_vec(vec![rows, cols], data)
    }

    /// Marks the tensor as a differentiated leaf when placed on a tape.
    pub fn tracked(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Mutable view of the elements; the slice keeps the length fixed.
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    /// Resets the gradient slot to zeros (allocating it if absent).
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = S::zero()),
            None => self.grad = Some(vec![S::zero(); self.data.len()]),
        }
    }

    /// Adds `delta` into the gradient slot. Callers zero grads between steps.
    pub fn accumulate_grad(&mut self, delta: &[S]) {
        assert_eq!(delta.len(), self.data.len(), "gradient length mismatch");
        let g = self
            .grad
            .get_or_insert_with(|| vec![S::zero(); self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += *di;
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    // 2-D helpers; callers guarantee the tensor is a matrix.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[S] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        let err = Tensor::<f64>::from_vec(vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert!(err.to_string().contains("6 elements"));
    }

    #[test]
    fn from_vec_rejects_zero_extent() {
        assert!(Tensor::<f64>::from_vec(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn grad_accumulates_additively() {
        let mut t = Tensor::from_vec(vec![2], vec![1.0f64, 2.0]).unwrap();
        t.zero_grad();
        t.accumulate_grad(&[1.0, 0.5]);
        t.accumulate_grad(&[2.0, 0.25]);
        assert_eq!(t.grad().unwrap(), &[3.0, 0.75]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
    }
}
