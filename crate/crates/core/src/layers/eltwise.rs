use super::{with_real, ForwardCtx, Layer};
use crate::error::{Error, Result};
use crate::tensor::{same_shape, Tensor};

/// Sum of two or more identically shaped blobs.
pub fn eltwise_add(inputs: &[&Tensor]) -> Result<Tensor> {
    let (first, rest) = inputs.split_first().ok_or_else(|| Error::Definition("eltwise_add needs inputs".into()))?;
    if rest.is_empty() {
        return Err(Error::Definition("eltwise_add needs at least two inputs".into()));
    }
    for t in rest {
        if !same_shape(first.shape(), t.shape()) {
            return Err(Error::shape(format!("eltwise_add {:?} vs {:?}", first.shape(), t.shape())));
        }
    }
    with_real!(first.dtype(), "eltwise_add", T => {
        let mut acc = first.data::<T>()?.to_vec();
        for t in rest {
            for (a, &b) in acc.iter_mut().zip(t.data::<T>()?) {
                *a += b;
            }
        }
        Tensor::from_vec(first.shape(), acc)
    })
}

#[derive(Default)]
pub struct EltwiseAdd;

impl Layer for EltwiseAdd {
    fn kind(&self) -> &'static str {
        "eltwise_add"
    }

    fn forward(&mut self, inputs: &[&Tensor], _ctx: &mut ForwardCtx<'_>) -> Result<Vec<Tensor>> {
        Ok(vec![eltwise_add(inputs)?])
    }

    fn backward(
        &mut self,
        inputs: &[&Tensor],
        _outputs: &[&Tensor],
        top: &[Option<&Tensor>],
        need: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok((0..inputs.len())
            .map(|i| match (top[0], need[i]) {
                (Some(dy), true) => Some(dy.reshape(inputs[i].shape())),
                _ => None,
            })
            .map(Option::transpose)
            .collect::<Result<_>>()?)
    }
}
