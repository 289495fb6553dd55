//! Inverted dropout: train-phase outputs are rescaled by `1 / (1 - ratio)`
//! so test-phase forward is the identity.

use rand::Rng;
use serde::Deserialize;

use super::{expect_inputs, with_real, ForwardCtx, Layer, Phase};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Deserialize)]
pub struct DropoutParams {
    #[serde(default = "half", alias = "dropout_ratio")]
    pub ratio: f64,
}

fn half() -> f64 {
    0.5
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("dropout ratio {ratio} outside [0, 1)")));
    }
    Ok(())
}

/// Apply a fixed keep-mask: `y = x * mask / (1 - ratio)`.
pub fn apply_mask(x: &Tensor, mask: &[bool], ratio: f64) -> Result<Tensor> {
    check_ratio(ratio)?;
    if mask.len() != x.numel() {
        return Err(Error::shape(format!("mask of {} for {} elements", mask.len(), x.numel())));
    }
    with_real!(x.dtype(), "dropout", T => {
        let scale = T::lit(1.0 / (1.0 - ratio));
        let y: Vec<T> = x.data::<T>()?.iter().zip(mask).map(|(&v, &m)| if m { v * scale } else { T::zero() }).collect();
        Tensor::from_vec(x.shape(), y)
    })
}

/// Train phase draws a Bernoulli(1 - ratio) keep-mask from `rng`; test phase
/// returns `x` unchanged with an all-true mask.
pub fn dropout<R: Rng>(x: &Tensor, ratio: f64, phase: Phase, rng: &mut R) -> Result<(Tensor, Vec<bool>)> {
    check_ratio(ratio)?;
    if phase == Phase::Test || ratio == 0.0 {
        return Ok((x.clone(), vec![true; x.numel()]));
    }
    let mask: Vec<bool> = (0..x.numel()).map(|_| rng.random::<f64>() >= ratio).collect();
    Ok((apply_mask(x, &mask, ratio)?, mask))
}

/// `dX = dY * mask / (1 - ratio)`.
pub fn dropout_backward(dy: &Tensor, mask: &[bool], ratio: f64) -> Result<Tensor> {
    apply_mask(dy, mask, ratio)
}

pub struct Dropout {
    ratio: f64,
    mask: Option<Vec<bool>>,
}

impl Dropout {
    pub fn new(p: DropoutParams) -> Result<Dropout> {
        check_ratio(p.ratio)?;
        Ok(Dropout { ratio: p.ratio, mask: None })
    }
}

impl Layer for Dropout {
    fn kind(&self) -> &'static str {
        "dropout"
    }

    fn forward(&mut self, inputs: &[&Tensor], ctx: &mut ForwardCtx<'_>) -> Result<Vec<Tensor>> {
        expect_inputs(inputs, 1)?;
        let (y, mask) = dropout(inputs[0], self.ratio, ctx.phase, ctx.rng)?;
        self.mask = Some(mask);
        Ok(vec![y])
    }

    fn backward(
        &mut self,
        _inputs: &[&Tensor],
        _outputs: &[&Tensor],
        top: &[Option<&Tensor>],
        need: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (Some(dy), true) = (top[0], need[0]) else { return Ok(vec![None]) };
        let mask = self.mask.as_ref().ok_or(Error::BackwardWithoutForward)?;
        Ok(vec![Some(dropout_backward(dy, mask, self.ratio)?)])
    }

    fn release(&mut self) {
        self.mask = None;
    }
}
