//! Dense n-dimensional value container.

use super::{shape_str, NumericError, Result, Scalar};

/// A dense tensor: flat row-major values plus an explicit shape.
///
/// Tensors are plain value holders. Participation in a compute graph happens
/// by inserting them into a tape as leaves; after a backward pass the leaf
/// gradient can be copied back via [`TensorBase::set_grad`].
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBase<S> {
    shape: Vec<usize>,
    values: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> TensorBase<S> {
    /// Builds a tensor, validating that the shape is non-degenerate, matches
    /// the value count, and that every value is finite.
    pub fn new(values: Vec<S>, shape: Vec<usize>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(NumericError::Dimension(format!(
                "shape {} has an empty or zero-sized dimension",
                shape_str(&shape)
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(NumericError::Dimension(format!(
                "shape {} implies {} values, got {}",
                shape_str(&shape),
                numel,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NumericError::Contract(
                "tensor values must be finite".to_string(),
            ));
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Self::new(vec![S::zero(); numel], shape)
    }

    pub fn filled(value: S, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Self::new(vec![value; numel], shape)
    }

    /// A scalar tensor of shape `[1]`.
    pub fn scalar(value: S) -> Self {
        Self::new(vec![value], vec![1]).expect("scalar is always valid")
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    /// Stores a gradient buffer; its length must match the value buffer.
    pub fn set_grad(&mut self, grad: Vec<S>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(NumericError::Dimension(format!(
                "gradient has {} values, tensor has {}",
                grad.len(),
                self.values.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// A copy that carries no gradient and requests none.
    pub fn detached(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            values: self.values.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Number of rows when viewed as a matrix of rows of the last dimension.
    pub fn leading(&self) -> usize {
        self.numel() / self.shape[self.shape.len() - 1]
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[S] {
        let cols = self.last_dim();
        &self.values[i * cols..(i + 1) * cols]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dimension() {
        let err = TensorBase::<f64>::new(vec![], vec![0, 2]).unwrap_err();
        assert!(err.to_string().contains("dimension"));
    }

    #[test]
    fn rejects_length_mismatch() {
        let err = TensorBase::<f64>::new(vec![1.0, 2.0], vec![3]).unwrap_err();
        assert!(err.to_string().contains("implies 3 values"));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(TensorBase::<f64>::new(vec![f64::NAN], vec![1]).is_err());
        assert!(TensorBase::<f64>::new(vec![f64::INFINITY], vec![1]).is_err());
    }

    #[test]
    fn grad_length_checked() {
        let mut t = TensorBase::<f64>::zeros(vec![2, 2]).unwrap();
        assert!(t.set_grad(vec![0.0; 3]).is_err());
        assert!(t.set_grad(vec![0.0; 4]).is_ok());
        assert_eq!(t.grad().unwrap().len(), 4);
    }

    #[test]
    fn detached_drops_grad_state() {
        let mut t = TensorBase::<f64>::zeros(vec![2]).unwrap().with_requires_grad(true);
        t.set_grad(vec![1.0, 2.0]).unwrap();
        let d = t.detached();
        assert!(!d.requires_grad());
        assert!(d.grad().is_none());
        assert_eq!(d.values(), t.values());
    }

    #[test]
    fn works_at_f32() {
        let t = TensorBase::<f32>::filled(1.5, vec![2, 3]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(t.leading(), 2);
        assert_eq!(t.last_dim(), 3);
    }
}
