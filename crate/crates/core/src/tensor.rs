//! Dense row-major `f32` tensors.

use crate::error::{Error, Result};

/// Dense n-dimensional array with an optional gradient buffer.
///
/// `shape.iter().product() == data.len()` always holds; a gradient, when
/// present, has the same length as the data.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) && !data.is_empty() {
            return Err(Error::invalid(format!("zero-sized dimension in {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} holds {} values but {} were given",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self::full(&[], value)
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Replaces the gradient buffer. The length must match the data.
    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape("set_grad", &[self.data.len()], &[grad.len()]));
        }
        self.grad = Some(grad);
        Ok(())
    }

    /// Resets the gradient to zeros (allocating it if missing).
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::shape("reshape", shape, &self.shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            grad: None,
            requires_grad: self.requires_grad,
        })
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn scalar_has_one_element() {
        let t = Tensor::scalar(3.0);
        assert_eq!(t.numel(), 1);
        assert!(t.shape().is_empty());
    }

    #[test]
    fn grad_must_match_shape() {
        let mut t = Tensor::zeros(&[4]);
        assert!(t.set_grad(vec![1.0; 3]).is_err());
        t.set_grad(vec![1.0; 4]).unwrap();
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0; 4]);
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = t.reshape(&[4]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(&[3]).is_err());
    }
}
