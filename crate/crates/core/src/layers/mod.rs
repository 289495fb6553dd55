//! Layer kernels and the [`Layer`] trait the graph executes.
//!
//! Spatial blobs are `(height, width, channel, sample)`; flat blobs are
//! `(feature, sample)`. Kernels are generic over [`Real`] so the same code
//! runs in f32 for training and f64 for gradient checking.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod data;
pub mod dropout;
pub mod eltwise;
pub mod im2col;
pub mod init;
pub mod linear;
pub mod loss;
pub mod pool;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use activation::Relu;
pub use batchnorm::BatchNorm;
pub use conv::{Conv2d, ConvConfig};
pub use data::{BlobData, Dataset};
pub use dropout::Dropout;
pub use eltwise::EltwiseAdd;
pub use linear::Linear;
pub use loss::{Accuracy, SoftmaxCrossEntropy};
pub use pool::{PoolConfig, PoolKind, Pooling2d};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Test,
}

/// A named tensor owned by a layer. Learnable parameters carry a gradient of
/// the same shape; non-learnable state (running statistics) does not train.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub learnable: bool,
}

impl Param {
    pub fn learnable(name: &str, value: Tensor) -> Result<Param> {
        let grad = Tensor::zeros(value.shape(), value.dtype())?;
        Ok(Param { name: name.into(), value, grad, learnable: true })
    }

    pub fn state(name: &str, value: Tensor) -> Result<Param> {
        let grad = Tensor::zeros(value.shape(), value.dtype())?;
        Ok(Param { name: name.into(), value, grad, learnable: false })
    }
}

pub struct ForwardCtx<'a> {
    pub phase: Phase,
    pub rng: &'a mut ChaCha8Rng,
}

pub trait Layer: Send {
    fn kind(&self) -> &'static str;

    fn forward(&mut self, inputs: &[&Tensor], ctx: &mut ForwardCtx<'_>) -> Result<Vec<Tensor>>;

    /// Given the forward inputs/outputs and the gradients arriving at each
    /// output (`None` when nothing downstream needs it), store parameter
    /// gradients and return the gradient for each input flagged in `need`.
    fn backward(
        &mut self,
        inputs: &[&Tensor],
        outputs: &[&Tensor],
        top: &[Option<&Tensor>],
        need: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;

    fn params(&self) -> &[Param] {
        &[]
    }

    fn params_mut(&mut self) -> &mut [Param] {
        &mut []
    }

    /// Loss layers get their outputs seeded with gradient 1.
    fn is_loss(&self) -> bool {
        false
    }

    fn as_data_layer(&mut self) -> Option<&mut BlobData> {
        None
    }

    /// Drop cached forward state.
    fn release(&mut self) {}
}

/// Run `$body` with `$T` bound to the Rust type of a floating dtype.
macro_rules! with_real {
    ($dtype:expr, $op:expr, $T:ident => $body:expr) => {
        match $dtype {
            $crate::tensor::DType::F32 => {
                #[allow(unused_imports)]
                use {$crate::tensor::Real as _, num_traits::{Float as _, One as _, Zero as _}};
                type $T = f32;
                $body
            }
            $crate::tensor::DType::F64 => {
                #[allow(unused_imports)]
                use {$crate::tensor::Real as _, num_traits::{Float as _, One as _, Zero as _}};
                type $T = f64;
                $body
            }
            d => Err($crate::error::Error::UnsupportedDType { op: $op, dtype: d }),
        }
    };
}
pub(crate) use with_real;

/// Extents padded to four dimensions.
pub(crate) fn dims4(t: &Tensor) -> [usize; 4] {
    [t.extent(0), t.extent(1), t.extent(2), t.extent(3)]
}

pub(crate) fn expect_inputs(inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::Definition(format!("expected {n} inputs, got {}", inputs.len())));
    }
    Ok(())
}

pub(crate) fn same_dtype(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dtype() != b.dtype() {
        return Err(Error::DTypeMismatch { expected: a.dtype(), found: b.dtype() });
    }
    Ok(())
}
