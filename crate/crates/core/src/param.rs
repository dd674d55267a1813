use crate::tensor::{Real, Tensor};

/// A learned tensor together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<S: Real> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

impl<S: Real> Param<S> {
    pub fn new(name: impl Into<String>, value: Tensor<S>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { name: name.into(), value, grad }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(shape))
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(S::ZERO);
    }

    /// Adds `g` into the gradient buffer. Shapes are checked by the caller's op.
    pub fn accumulate(&mut self, g: &Tensor<S>) {
        debug_assert_eq!(g.shape(), self.value.shape(), "{}", self.name);
        for (a, &b) in self.grad.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
    }
}
