use crate::tensor::Tensor;

/// A trainable tensor with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub id: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(id: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter { id: id.into(), value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn accumulate(&mut self, g: &Tensor) {
        self.grad.add_assign(g);
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

pub fn zero_grads<'a>(params: impl IntoIterator<Item = &'a mut Parameter>) {
    for p in params {
        p.zero_grad();
    }
}
