//! Layer type name to constructor map. Built-in types are pre-registered;
//! callers may add their own.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;

use super::LayerSpec;
use crate::error::{Error, Result};
use crate::layers::batchnorm::BatchNormParams;
use crate::layers::data::BlobDataParams;
use crate::layers::dropout::DropoutParams;
use crate::layers::linear::LinearParams;
use crate::layers::{
    Accuracy, BatchNorm, BlobData, Conv2d, ConvConfig, Dropout, EltwiseAdd, Layer, Linear, PoolConfig, Pooling2d, Relu,
    SoftmaxCrossEntropy,
};
use crate::tensor::DType;

pub struct BuildCtx<'a> {
    pub dtype: DType,
    pub rng: &'a mut ChaCha8Rng,
    pub data_root: Option<PathBuf>,
}

pub type Builder = Arc<dyn Fn(&LayerSpec, &mut BuildCtx<'_>) -> Result<Box<dyn Layer>> + Send + Sync>;

#[derive(Clone)]
pub struct Registry {
    builders: HashMap<String, Builder>,
}

/// Deserialize a layer's `params` object.
pub fn params<P: DeserializeOwned>(spec: &LayerSpec) -> Result<P> {
    serde_json::from_value(spec.params.clone())
        .map_err(|e| Error::Definition(format!("layer `{}` params: {e}", spec.name)))
}

impl Default for Registry {
    fn default() -> Registry {
        let mut r = Registry { builders: HashMap::new() };
        r.register("blob_data", |s, c| Ok(Box::new(BlobData::new(params::<BlobDataParams>(s)?, c.data_root.clone())?)));
        r.register("convolution_2d", |s, c| Ok(Box::new(Conv2d::new(params::<ConvConfig>(s)?, c.dtype, c.rng)?)));
        r.register("pooling_2d", |s, _| Ok(Box::new(Pooling2d::new(params::<PoolConfig>(s)?)?)));
        r.register("relu", |_, _| Ok(Box::new(Relu)));
        r.register("linear", |s, c| Ok(Box::new(Linear::new(&params::<LinearParams>(s)?, c.dtype, c.rng)?)));
        r.register("softmax_cross_entropy", |_, _| Ok(Box::<SoftmaxCrossEntropy>::default()));
        r.register("accuracy", |_, _| Ok(Box::new(Accuracy)));
        r.register("dropout", |s, _| Ok(Box::new(Dropout::new(params::<DropoutParams>(s)?)?)));
        r.register("batch_normalization", |s, c| Ok(Box::new(BatchNorm::new(params::<BatchNormParams>(s)?, c.dtype)?)));
        r.register("eltwise_add", |_, _| Ok(Box::new(EltwiseAdd)));
        r
    }
}

impl Registry {
    pub fn register<F>(&mut self, kind: &str, build: F)
    where
        F: Fn(&LayerSpec, &mut BuildCtx<'_>) -> Result<Box<dyn Layer>> + Send + Sync + 'static,
    {
        self.builders.insert(kind.to_string(), Arc::new(build));
    }

    pub fn contains(&self, kind: &str) -> bool {
        self.builders.contains_key(kind)
    }

    pub fn build(&self, spec: &LayerSpec, ctx: &mut BuildCtx<'_>) -> Result<Box<dyn Layer>> {
        let b = self.builders.get(&spec.kind).ok_or_else(|| Error::UnknownLayer(spec.kind.clone()))?;
        b(spec, ctx).map_err(|e| e.in_layer(&spec.name))
    }
}
