use super::{Real, Storage, Tensor};
use crate::error::{Error, Result};

fn gemm_typed<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    T::gemm(m, k, n, T::one(), a, false, b, false, T::zero(), &mut c);
    c
}

impl Tensor {
    /// Matrix product of `[m, k]` and `[k, n]` floating tensors.
    pub fn mtimes(&self, other: &Tensor) -> Result<Tensor> {
        self.check()?;
        other.check()?;
        if self.ndim() > 2 || other.ndim() > 2 {
            return Err(Error::shape(format!("mtimes needs matrices, got {:?} and {:?}", self.shape, other.shape)));
        }
        let (m, k) = (self.extent(0), self.extent(1));
        let (k2, n) = (other.extent(0), other.extent(1));
        if k != k2 {
            return Err(Error::shape(format!("inner dimensions differ: {:?} x {:?}", self.shape, other.shape)));
        }
        let data = match (&self.data, &other.data) {
            (Storage::F32(a), Storage::F32(b)) => Storage::F32(gemm_typed(a, b, m, k, n)),
            (Storage::F64(a), Storage::F64(b)) => Storage::F64(gemm_typed(a, b, m, k, n)),
            (a, b) if a.dtype() != b.dtype() => {
                return Err(Error::DTypeMismatch { expected: a.dtype(), found: b.dtype() });
            }
            (a, _) => return Err(Error::UnsupportedDType { op: "mtimes", dtype: a.dtype() }),
        };
        Tensor::from_storage(vec![m, n], data)
    }
}
