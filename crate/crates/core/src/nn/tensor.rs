use ndarray::{ArrayView1, ArrayView2, ArrayViewMut2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major value container with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(
                "tensor shape",
                "positive extents",
                format!("{shape:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::dim("tensor values", n, values.len()));
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

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first access.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let n = self.values.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn values_and_grad_mut(&mut self) -> (&mut [T], &mut [T]) {
        let n = self.values.len();
        let grad = self.grad.get_or_insert_with(|| vec![T::zero(); n]);
        (&mut self.values, grad)
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::dim("gradient length", self.values.len(), grad.len()));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Copy without the gradient buffer.
    pub fn detached(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            values: self.values.clone(),
            grad: None,
        }
    }

    pub fn view1(&self) -> ArrayView1<'_, T> {
        ArrayView1::from(&self.values[..])
    }

    /// Matrix view; panics unless the tensor is rank 2.
    pub fn view2(&self) -> ArrayView2<'_, T> {
        assert_eq!(
            self.shape.len(),
            2,
            "view2 on rank-{} tensor",
            self.shape.len()
        );
        ArrayView2::from_shape((self.shape[0], self.shape[1]), &self.values).expect("shape checked")
    }

    pub fn view2_mut(&mut self) -> ArrayViewMut2<'_, T> {
        assert_eq!(
            self.shape.len(),
            2,
            "view2_mut on rank-{} tensor",
            self.shape.len()
        );
        ArrayViewMut2::from_shape((self.shape[0], self.shape[1]), &mut self.values)
            .expect("shape checked")
    }

    pub fn map_inplace(&mut self, f: impl Fn(T) -> T) {
        self.values.iter_mut().for_each(|v| *v = f(*v));
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| U::of(v.as_f64())).collect(),
            grad: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_length() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![0, 3], vec![]).is_err());
        let t = Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.view2().dim(), (2, 3));
    }

    #[test]
    fn grad_is_lazily_zeroed_and_sized() {
        let mut t = Tensor::<f32>::zeros(vec![4]);
        assert!(t.grad().is_none());
        assert_eq!(t.grad_mut().len(), 4);
        assert!(t.set_grad(vec![0.0; 3]).is_err());
    }
}
