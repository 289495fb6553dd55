//! Dataset-backed input layer. The `batch` input is an i32 list of 0-origin
//! sample indices; outputs are `data_shape + [batch]` and `[1, batch]`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use super::{expect_inputs, ForwardCtx, Layer};
use crate::error::{Error, Result};
use crate::tensor::{npy, DType, Tensor};

/// Samples stacked along the last axis plus one i32 label per sample.
#[derive(Debug)]
pub struct Dataset {
    data: Tensor,
    label: Tensor,
    sample_shape: Vec<usize>,
    count: usize,
}

impl Dataset {
    pub fn new(data: Tensor, label: Tensor) -> Result<Dataset> {
        if !matches!(data.dtype(), DType::U8 | DType::F32 | DType::F64) {
            return Err(Error::Dataset(format!("sample dtype {} not supported", data.dtype().name())));
        }
        let label = label.cast(DType::I32)?;
        let count = label.numel();
        if count == 0 || data.numel() % count != 0 {
            return Err(Error::Dataset(format!("{} labels for data of shape {:?}", count, data.shape())));
        }
        let mut sample_shape = data.shape().to_vec();
        // drop the sample axis (and any trailing singletons beyond it)
        while sample_shape.len() > 1 && sample_shape.iter().product::<usize>() != data.numel() / count {
            sample_shape.pop();
        }
        if sample_shape.iter().product::<usize>() * count != data.numel() {
            return Err(Error::Dataset(format!("cannot split {:?} into {count} samples", data.shape())));
        }
        Ok(Dataset { data, label, sample_shape, count })
    }

    /// Load `{prefix}_data.npy` and `{prefix}_label.npy`.
    pub fn load(prefix: impl AsRef<Path>) -> Result<Dataset> {
        let (d, l) = Self::paths(prefix);
        let open = |p: &Path| npy::load(p).map_err(|e| Error::Dataset(format!("{}: {e}", p.display())));
        Dataset::new(open(&d)?, open(&l)?)
    }

    pub fn paths(prefix: impl AsRef<Path>) -> (PathBuf, PathBuf) {
        let p = prefix.as_ref().as_os_str().to_string_lossy().into_owned();
        (PathBuf::from(format!("{p}_data.npy")), PathBuf::from(format!("{p}_label.npy")))
    }

    pub fn save(&self, prefix: impl AsRef<Path>) -> Result<()> {
        let (d, l) = Self::paths(prefix);
        npy::save(&self.data, d)?;
        npy::save(&self.label.reshape(&[1, self.count])?, l)
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn labels(&self) -> &Tensor {
        &self.label
    }

    /// Gather raw samples in source dtype: `(sample_shape + [k], [1, k])`.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let per: usize = self.sample_shape.iter().product();
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.count) {
            return Err(Error::Dataset(format!("sample index {bad} outside a set of {}", self.count)));
        }
        let mut shape = self.sample_shape.clone();
        shape.push(indices.len());
        macro_rules! take {
            ($T:ty) => {{
                let src = self.data.data::<$T>()?;
                let mut out = Vec::with_capacity(per * indices.len());
                for &i in indices {
                    out.extend_from_slice(&src[i * per..(i + 1) * per]);
                }
                Tensor::from_vec(&shape, out)?
            }};
        }
        let data = match self.data.dtype() {
            DType::U8 => take!(u8),
            DType::F32 => take!(f32),
            DType::F64 => take!(f64),
            d => return Err(Error::UnsupportedDType { op: "blob_data", dtype: d }),
        };
        let lab = self.label.data::<i32>()?;
        let label = Tensor::from_vec(&[1, indices.len()], indices.iter().map(|&i| lab[i]).collect())?;
        Ok((data, label))
    }
}

#[derive(Clone, Debug, Deserialize)]
pub struct BlobDataParams {
    pub data_shape: Vec<usize>,
    pub file_prefix: String,
    #[serde(default = "single")]
    pub data_klass: String,
}

fn single() -> String {
    "single".into()
}

pub struct BlobData {
    p: BlobDataParams,
    dtype: DType,
    root: Option<PathBuf>,
    dataset: Option<Arc<Dataset>>,
}

impl BlobData {
    /// `root` is the directory `file_prefix` is resolved against; the dataset
    /// is loaded on first use unless one is attached beforehand.
    pub fn new(p: BlobDataParams, root: Option<PathBuf>) -> Result<BlobData> {
        let dtype = match p.data_klass.as_str() {
            "single" => DType::F32,
            "double" => DType::F64,
            other => return Err(Error::Definition(format!("unknown data_klass {other:?}"))),
        };
        if p.data_shape.is_empty() || p.data_shape.contains(&0) {
            return Err(Error::Definition(format!("invalid data_shape {:?}", p.data_shape)));
        }
        Ok(BlobData { p, dtype, root, dataset: None })
    }

    pub fn file_prefix(&self) -> &str {
        &self.p.file_prefix
    }

    pub fn attach(&mut self, dataset: Arc<Dataset>) {
        self.dataset = Some(dataset);
    }

    pub fn dataset(&mut self) -> Result<Arc<Dataset>> {
        if let Some(d) = &self.dataset {
            return Ok(d.clone());
        }
        let prefix = match &self.root {
            Some(r) => r.join(&self.p.file_prefix),
            None => PathBuf::from(&self.p.file_prefix),
        };
        let d = Arc::new(Dataset::load(prefix)?);
        self.dataset = Some(d.clone());
        Ok(d)
    }

    /// Fetch samples as `(data_shape + [k] in the layer's dtype, [1, k] i32)`.
    pub fn fetch(&mut self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let ds = self.dataset()?;
        if ds.sample_shape().iter().product::<usize>() != self.p.data_shape.iter().product::<usize>() {
            return Err(Error::Dataset(format!(
                "dataset samples {:?} do not match data_shape {:?}",
                ds.sample_shape(),
                self.p.data_shape
            )));
        }
        let (raw, label) = ds.gather(indices)?;
        let mut shape = self.p.data_shape.clone();
        shape.push(indices.len());
        let data = if raw.dtype() == DType::U8 {
            let src = raw.data::<u8>()?;
            match self.dtype {
                DType::F32 => Tensor::from_vec(&shape, src.iter().map(|&b| b as f32 / 255.0).collect())?,
                _ => Tensor::from_vec(&shape, src.iter().map(|&b| b as f64 / 255.0).collect())?,
            }
        } else {
            raw.cast(self.dtype)?.reshape(&shape)?
        };
        Ok((data, label))
    }
}

/// Decode a batch tensor into 0-origin sample indices.
pub fn batch_indices(batch: &Tensor) -> Result<Vec<usize>> {
    batch
        .to_f64_vec()?
        .into_iter()
        .map(|v| {
            if v < 0.0 || v.fract() != 0.0 {
                Err(Error::InvalidArgument(format!("batch index {v} is not a non-negative integer")))
            } else {
                Ok(v as usize)
            }
        })
        .collect()
}

/// Build a batch tensor from 0-origin sample indices.
pub fn batch_tensor(indices: &[usize]) -> Result<Tensor> {
    Tensor::from_vec(&[indices.len(), 1], indices.iter().map(|&i| i as i32).collect())
}

impl Layer for BlobData {
    fn kind(&self) -> &'static str {
        "blob_data"
    }

    fn forward(&mut self, inputs: &[&Tensor], _ctx: &mut ForwardCtx<'_>) -> Result<Vec<Tensor>> {
        expect_inputs(inputs, 1)?;
        let idx = batch_indices(inputs[0])?;
        if idx.is_empty() {
            return Err(Error::Empty);
        }
        let (d, l) = self.fetch(&idx)?;
        Ok(vec![d, l])
    }

    fn backward(
        &mut self,
        _inputs: &[&Tensor],
        _outputs: &[&Tensor],
        _top: &[Option<&Tensor>],
        _need: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![None])
    }

    fn as_data_layer(&mut self) -> Option<&mut BlobData> {
        Some(self)
    }
}
