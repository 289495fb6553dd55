use super::{expect_inputs, same_dtype, with_real, ForwardCtx, Layer};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, UnaryOp};

pub fn relu_forward(x: &Tensor) -> Result<Tensor> {
    x.unary(UnaryOp::Relu)
}

/// `dY` where `x > 0`, else 0. The gradient at exactly 0 is 0.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    same_dtype(x, dy)?;
    if x.numel() != dy.numel() {
        return Err(Error::shape(format!("relu gradient {:?} for input {:?}", dy.shape(), x.shape())));
    }
    with_real!(x.dtype(), "relu", T => {
        let dx: Vec<T> = x
            .data::<T>()?
            .iter()
            .zip(dy.data::<T>()?)
            .map(|(&xv, &g)| if xv > T::zero() { g } else { T::zero() })
            .collect();
        Tensor::from_vec(x.shape(), dx)
    })
}

#[derive(Default)]
pub struct Relu;

impl Layer for Relu {
    fn kind(&self) -> &'static str {
        "relu"
    }

    fn forward(&mut self, inputs: &[&Tensor], _ctx: &mut ForwardCtx<'_>) -> Result<Vec<Tensor>> {
        expect_inputs(inputs, 1)?;
        Ok(vec![relu_forward(inputs[0])?])
    }

    fn backward(
        &mut self,
        inputs: &[&Tensor],
        _outputs: &[&Tensor],
        top: &[Option<&Tensor>],
        need: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        match (top[0], need[0]) {
            (Some(dy), true) => Ok(vec![Some(relu_backward(inputs[0], dy)?)]),
            _ => Ok(vec![None]),
        }
    }
}
