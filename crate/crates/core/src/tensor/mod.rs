//! Column-major N-D tensors with MATLAB-style 1-origin indexing.
//!
//! A [`Tensor`] is a flat, contiguous buffer plus a shape. Element
//! `(i1, ..., ik)` (1-origin) lives at offset `sum((i_d - 1) * stride_d)` with
//! `stride_1 = 1` and `stride_d = stride_{d-1} * extent_{d-1}`. Trailing
//! singleton dimensions are insignificant when comparing shapes.
//!
//! Every operation allocates a fresh output; [`Tensor::set`] is the only
//! mutator.

mod element;
mod index;
pub(crate) mod linalg;
pub mod npy;
mod ops;
mod scope;

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

pub use element::{Element, Real};
pub use index::Idx;
pub use ops::{BinaryOp, IndexResult, UnaryOp};
pub use scope::{install_accelerator, to_backend, with_scope, Accelerator, Backend};

use crate::error::{Error, Result};

/// Element type of a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
    I32,
    U8,
    /// One byte per element, holding only 0 or 1.
    Logical,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
            DType::U8 | DType::Logical => 1,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, DType::F32 | DType::F64)
    }

    /// Stable one-byte tag used by the binary formats.
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
            DType::I32 => 3,
            DType::U8 => 4,
            DType::Logical => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        Some(match code {
            1 => DType::F32,
            2 => DType::F64,
            3 => DType::I32,
            4 => DType::U8,
            5 => DType::Logical,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "single",
            DType::F64 => "double",
            DType::I32 => "int32",
            DType::U8 => "uint8",
            DType::Logical => "logical",
        }
    }
}

/// Owned element buffer, tagged by dtype.
#[derive(Clone, Debug, PartialEq)]
pub enum Storage {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    U8(Vec<u8>),
    Logical(Vec<u8>),
}

macro_rules! for_storage {
    ($s:expr, $v:ident => $body:expr) => {
        match $s {
            Storage::F32($v) => $body,
            Storage::F64($v) => $body,
            Storage::I32($v) => $body,
            Storage::U8($v) => $body,
            Storage::Logical($v) => $body,
        }
    };
}
pub(crate) use for_storage;

impl Storage {
    pub fn dtype(&self) -> DType {
        match self {
            Storage::F32(_) => DType::F32,
            Storage::F64(_) => DType::F64,
            Storage::I32(_) => DType::I32,
            Storage::U8(_) => DType::U8,
            Storage::Logical(_) => DType::Logical,
        }
    }

    pub fn len(&self) -> usize {
        for_storage!(self, v => v.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn filled(dtype: DType, len: usize, fill: f64) -> Storage {
        match dtype {
            DType::F32 => Storage::F32(vec![f32::from_f64(fill); len]),
            DType::F64 => Storage::F64(vec![fill; len]),
            DType::I32 => Storage::I32(vec![i32::from_f64(fill); len]),
            DType::U8 => Storage::U8(vec![u8::from_f64(fill); len]),
            DType::Logical => Storage::Logical(vec![u8::from(fill != 0.0); len]),
        }
    }

    fn empty(dtype: DType) -> Storage {
        Storage::filled(dtype, 0, 0.0)
    }

    /// Element `i` widened to f64.
    pub(crate) fn get_f64(&self, i: usize) -> f64 {
        for_storage!(self, v => v[i].to_f64())
    }
}

/// Validity flag shared with the active [`with_scope`] registry.
#[derive(Debug)]
pub(crate) struct Liveness(Arc<AtomicBool>);

impl Liveness {
    fn new() -> Self {
        let flag = Arc::new(AtomicBool::new(true));
        scope::register(&flag);
        Liveness(flag)
    }

    fn is_live(&self) -> bool {
        self.0.load(Ordering::Acquire)
    }

    fn kill(&self) {
        self.0.store(false, Ordering::Release);
    }
}

pub struct Tensor {
    shape: Vec<usize>,
    data: Storage,
    backend: Backend,
    live: Liveness,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            backend: self.backend,
            live: Liveness::new(),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &self.dtype())
            .field("released", &!self.live.is_live())
            .finish()
    }
}

/// Shapes equal up to trailing singleton dimensions.
pub fn same_shape(a: &[usize], b: &[usize]) -> bool {
    let n = a.len().max(b.len());
    (0..n).all(|d| a.get(d).copied().unwrap_or(1) == b.get(d).copied().unwrap_or(1))
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&e| e == 0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(())
}

impl Tensor {
    pub(crate) fn from_storage(shape: Vec<usize>, data: Storage) -> Result<Tensor> {
        validate_shape(&shape)?;
        let n = numel_of(&shape);
        if n != data.len() {
            return Err(Error::LengthMismatch {
                expected: n * data.dtype().width(),
                actual: data.len() * data.dtype().width(),
            });
        }
        Ok(Tensor { shape, data, backend: Backend::Reference, live: Liveness::new() })
    }

    /// A tensor of the given shape with every element equal to `fill`.
    pub fn new(shape: &[usize], dtype: DType, fill: f64) -> Result<Tensor> {
        validate_shape(shape)?;
        Tensor::from_storage(shape.to_vec(), Storage::filled(dtype, numel_of(shape), fill))
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Result<Tensor> {
        Tensor::new(shape, dtype, 0.0)
    }

    pub fn ones(shape: &[usize], dtype: DType) -> Result<Tensor> {
        Tensor::new(shape, dtype, 1.0)
    }

    /// `[1, 1]` tensor holding `value`.
    pub fn scalar(value: f64, dtype: DType) -> Tensor {
        Tensor::new(&[1, 1], dtype, value).expect("scalar shape is valid")
    }

    /// Wrap a column-major buffer.
    pub fn from_vec<T: Element>(shape: &[usize], data: Vec<T>) -> Result<Tensor> {
        Tensor::from_storage(shape.to_vec(), T::wrap(data))
    }

    /// Logical tensor from booleans.
    pub fn from_bools(shape: &[usize], data: &[bool]) -> Result<Tensor> {
        Tensor::from_storage(shape.to_vec(), Storage::Logical(data.iter().map(|&b| u8::from(b)).collect()))
    }

    /// Copy little-endian raw bytes laid out in fortran order.
    pub fn from_bytes(shape: &[usize], dtype: DType, raw: &[u8]) -> Result<Tensor> {
        validate_shape(shape)?;
        let expected = numel_of(shape) * dtype.width();
        if raw.len() != expected {
            return Err(Error::LengthMismatch { expected, actual: raw.len() });
        }
        let data = match dtype {
            DType::F32 => Storage::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::F64 => Storage::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::I32 => Storage::I32(raw.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::U8 => Storage::U8(raw.to_vec()),
            DType::Logical => {
                if raw.iter().any(|&b| b > 1) {
                    return Err(Error::InvalidArgument("logical buffer holds values other than 0/1".into()));
                }
                Storage::Logical(raw.to_vec())
            }
        };
        Tensor::from_storage(shape.to_vec(), data)
    }

    /// Little-endian raw element bytes in fortran order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check()?;
        let mut out = Vec::with_capacity(self.numel() * self.dtype().width());
        match &self.data {
            Storage::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Storage::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Storage::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Storage::U8(v) | Storage::Logical(v) => out.extend_from_slice(v),
        }
        Ok(out)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    /// Extent along 0-origin `axis`; 1 past the last dimension.
    pub fn extent(&self, axis: usize) -> usize {
        self.shape.get(axis).copied().unwrap_or(1)
    }

    /// MATLAB `size(t, dim)`: 1-origin, and 1 for `dim > ndim`.
    pub fn size(&self, dim: usize) -> Result<usize> {
        if dim == 0 {
            return Err(Error::InvalidArgument("size dimension is 1-origin".into()));
        }
        Ok(self.extent(dim - 1))
    }

    pub fn is_released(&self) -> bool {
        !self.live.is_live()
    }

    pub(crate) fn check(&self) -> Result<()> {
        if self.live.is_live() {
            Ok(())
        } else {
            Err(Error::Released)
        }
    }

    /// Invalidate the tensor and free its buffer. Later access fails with
    /// [`Error::Released`]. Releasing twice is a no-op.
    pub fn release(&mut self) {
        self.live.kill();
        self.data = Storage::empty(self.dtype());
    }

    pub fn storage(&self) -> Result<&Storage> {
        self.check()?;
        Ok(&self.data)
    }

    /// Typed view of the buffer.
    pub fn data<T: Element>(&self) -> Result<&[T]> {
        self.check()?;
        T::view(&self.data).ok_or(Error::DTypeMismatch { expected: T::DTYPE, found: self.dtype() })
    }

    /// Typed mutable view. Mutating through it is equivalent to `set`.
    pub fn data_mut<T: Element>(&mut self) -> Result<&mut [T]> {
        self.check()?;
        let found = self.dtype();
        T::view_mut(&mut self.data).ok_or(Error::DTypeMismatch { expected: T::DTYPE, found })
    }

    pub fn into_vec<T: Element>(self) -> Result<Vec<T>> {
        self.check()?;
        let found = self.dtype();
        T::unwrap(self.data).ok_or(Error::DTypeMismatch { expected: T::DTYPE, found })
    }

    /// All elements widened to f64, column-major.
    pub fn to_f64_vec(&self) -> Result<Vec<f64>> {
        self.check()?;
        Ok(for_storage!(&self.data, v => v.iter().map(|x| x.to_f64()).collect()))
    }

    /// Element-wise conversion; float→integer rounds and saturates.
    pub fn cast(&self, dtype: DType) -> Result<Tensor> {
        self.check()?;
        if dtype == self.dtype() {
            return Ok(self.clone());
        }
        let data = match dtype {
            DType::F32 => Storage::F32(for_storage!(&self.data, v => v.iter().map(|x| f32::from_f64(x.to_f64())).collect())),
            DType::F64 => Storage::F64(for_storage!(&self.data, v => v.iter().map(|x| x.to_f64()).collect())),
            DType::I32 => Storage::I32(for_storage!(&self.data, v => v.iter().map(|x| i32::from_f64(x.to_f64())).collect())),
            DType::U8 => Storage::U8(for_storage!(&self.data, v => v.iter().map(|x| u8::from_f64(x.to_f64())).collect())),
            DType::Logical => Storage::Logical(for_storage!(&self.data, v => v.iter().map(|x| u8::from(x.to_f64() != 0.0)).collect())),
        };
        Tensor::from_storage(self.shape.clone(), data)
    }

    pub fn sum_all(&self) -> Result<f64> {
        self.check()?;
        Ok(for_storage!(&self.data, v => v.iter().map(|x| x.to_f64()).sum()))
    }

    /// Bitwise equality of shape (modulo trailing singletons), dtype and buffer.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        same_shape(&self.shape, &other.shape)
            && match (self.to_bytes(), other.to_bytes()) {
                (Ok(a), Ok(b)) => self.dtype() == other.dtype() && a == b,
                _ => false,
            }
    }
}

impl PartialEq for Tensor {
    /// Value equality, shapes compared modulo trailing singletons.
    fn eq(&self, other: &Tensor) -> bool {
        if !same_shape(&self.shape, &other.shape) || self.numel() != other.numel() {
            return false;
        }
        if self.check().is_err() || other.check().is_err() {
            return false;
        }
        (0..self.numel()).all(|i| self.data.get_f64(i) == other.data.get_f64(i))
    }
}
