use super::NumericsError;
use crate::Scalar;

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self, NumericsError> {
        let expected = shape.iter().product::<usize>();
        if expected != values.len() {
            return Err(NumericsError::ShapeMismatch {
                shape,
                expected,
                actual: values.len(),
            });
        }
        Ok(Self {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![T::zero(); n],
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            values: vec![value],
            grad: None,
        }
    }

    pub fn vector(values: Vec<T>) -> Self {
        Self {
            shape: vec![values.len()],
            values,
            grad: None,
        }
    }

    /// Builds a 2-D tensor, panicking on a size mismatch.
    pub fn matrix(rows: usize, cols: usize, values: Vec<T>) -> Self {
        assert_eq!(rows * cols, values.len(), "matrix {rows}x{cols}");
        Self {
            shape: vec![rows, cols],
            values,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    /// Leading dimension; 1 for a scalar.
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.values[r * self.cols() + c]
    }

    pub fn item(&self) -> T {
        self.values[0]
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<(), NumericsError> {
        if grad.len() != self.values.len() {
            return Err(NumericsError::LengthMismatch(grad.len(), self.values.len()));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }
}
