use super::{for_storage, numel_of, same_shape, DType, Element, Storage, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Plus,
    Minus,
    Times,
    Divide,
    Max,
    Min,
    Gt,
    Ge,
    Lt,
    Le,
    Eq,
    Ne,
}

impl BinaryOp {
    fn is_compare(self) -> bool {
        matches!(self, BinaryOp::Gt | BinaryOp::Ge | BinaryOp::Lt | BinaryOp::Le | BinaryOp::Eq | BinaryOp::Ne)
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Plus => a + b,
            BinaryOp::Minus => a - b,
            BinaryOp::Times => a * b,
            BinaryOp::Divide => a / b,
            BinaryOp::Max => a.max(b),
            BinaryOp::Min => a.min(b),
            BinaryOp::Gt => f64::from(u8::from(a > b)),
            BinaryOp::Ge => f64::from(u8::from(a >= b)),
            BinaryOp::Lt => f64::from(u8::from(a < b)),
            BinaryOp::Le => f64::from(u8::from(a <= b)),
            BinaryOp::Eq => f64::from(u8::from(a == b)),
            BinaryOp::Ne => f64::from(u8::from(a != b)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Log,
    Exp,
    Neg,
    Abs,
    /// `max(x, 0)`
    Relu,
}

/// Result of [`Tensor::argmax`]: maxima and their 1-origin positions.
#[derive(Debug)]
pub struct IndexResult {
    pub values: Tensor,
    /// i32, 1-origin along the reduced dimension.
    pub indices: Tensor,
}

fn map_binary<T: Element>(a: &[T], b: &[T], op: BinaryOp) -> Vec<T> {
    let f = |x: T, y: T| T::from_f64(op.apply(x.to_f64(), y.to_f64()));
    match (a.len(), b.len()) {
        (_, 1) => a.iter().map(|&x| f(x, b[0])).collect(),
        (1, _) => b.iter().map(|&y| f(a[0], y)).collect(),
        _ => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn compare<T: Element>(a: &[T], b: &[T], op: BinaryOp) -> Vec<u8> {
    let f = |x: T, y: T| op.apply(x.to_f64(), y.to_f64()) as u8;
    match (a.len(), b.len()) {
        (_, 1) => a.iter().map(|&x| f(x, b[0])).collect(),
        (1, _) => b.iter().map(|&y| f(a[0], y)).collect(),
        _ => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
    }
}

impl Tensor {
    /// Same column-major sequence under a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        self.check()?;
        if numel_of(shape) != self.numel() {
            return Err(Error::shape(format!("cannot reshape {:?} into {:?}", self.shape, shape)));
        }
        Tensor::from_storage(shape.to_vec(), self.data.clone())
    }

    /// Physically reorder dimensions; `order` is a 1-origin permutation.
    pub fn permute(&self, order: &[usize]) -> Result<Tensor> {
        self.check()?;
        let k = order.len();
        let mut seen = vec![false; k];
        for &o in order {
            if o == 0 || o > k || seen[o - 1] {
                return Err(Error::InvalidPermutation(order.to_vec()));
            }
            seen[o - 1] = true;
        }
        if k < self.ndim() && self.shape[k..].iter().any(|&e| e != 1) {
            return Err(Error::InvalidPermutation(order.to_vec()));
        }
        let src_shape: Vec<usize> = (0..k).map(|d| self.extent(d)).collect();
        let mut src_strides = vec![1usize; k];
        for d in 1..k {
            src_strides[d] = src_strides[d - 1] * src_shape[d - 1];
        }
        let out_shape: Vec<usize> = order.iter().map(|&o| src_shape[o - 1]).collect();
        let out_strides: Vec<usize> = order.iter().map(|&o| src_strides[o - 1]).collect();
        let n = self.numel();
        let mut offsets = Vec::with_capacity(n);
        let mut counter = vec![0usize; k];
        let mut offset = 0usize;
        for _ in 0..n {
            offsets.push(offset);
            for d in 0..k {
                counter[d] += 1;
                offset += out_strides[d];
                if counter[d] < out_shape[d] {
                    break;
                }
                offset -= out_strides[d] * out_shape[d];
                counter[d] = 0;
            }
        }
        let data = match &self.data {
            Storage::F32(v) => Storage::F32(offsets.iter().map(|&o| v[o]).collect()),
            Storage::F64(v) => Storage::F64(offsets.iter().map(|&o| v[o]).collect()),
            Storage::I32(v) => Storage::I32(offsets.iter().map(|&o| v[o]).collect()),
            Storage::U8(v) => Storage::U8(offsets.iter().map(|&o| v[o]).collect()),
            Storage::Logical(v) => Storage::Logical(offsets.iter().map(|&o| v[o]).collect()),
        };
        Tensor::from_storage(out_shape, data)
    }

    /// `permute([2, 1])` of a matrix or vector.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.ndim() > 2 {
            return Err(Error::shape(format!("transpose needs ndim <= 2, got {:?}", self.shape)));
        }
        self.permute(&[2, 1])
    }

    /// Tile `reps[d]` copies along each dimension.
    pub fn repmat(&self, reps: &[usize]) -> Result<Tensor> {
        self.check()?;
        if reps.is_empty() || reps.iter().any(|&r| r == 0) {
            return Err(Error::InvalidArgument(format!("repmat counts must be positive, got {reps:?}")));
        }
        let k = reps.len().max(self.ndim());
        let src: Vec<usize> = (0..k).map(|d| self.extent(d)).collect();
        let out: Vec<usize> = (0..k).map(|d| src[d] * reps.get(d).copied().unwrap_or(1)).collect();
        let n = numel_of(&out);
        let mut offsets = Vec::with_capacity(n);
        let mut counter = vec![0usize; k];
        for _ in 0..n {
            let mut o = 0;
            let mut stride = 1;
            for d in 0..k {
                o += (counter[d] % src[d]) * stride;
                stride *= src[d];
            }
            offsets.push(o);
            for d in 0..k {
                counter[d] += 1;
                if counter[d] < out[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        let data = match &self.data {
            Storage::F32(v) => Storage::F32(offsets.iter().map(|&o| v[o]).collect()),
            Storage::F64(v) => Storage::F64(offsets.iter().map(|&o| v[o]).collect()),
            Storage::I32(v) => Storage::I32(offsets.iter().map(|&o| v[o]).collect()),
            Storage::U8(v) => Storage::U8(offsets.iter().map(|&o| v[o]).collect()),
            Storage::Logical(v) => Storage::Logical(offsets.iter().map(|&o| v[o]).collect()),
        };
        Tensor::from_storage(out, data)
    }

    /// Element-wise binary op. Shapes must agree modulo trailing singletons,
    /// or one side must hold a single element. A scalar operand of another
    /// dtype is converted to the tensor operand's dtype.
    pub fn binary(&self, op: BinaryOp, other: &Tensor) -> Result<Tensor> {
        self.check()?;
        other.check()?;
        let (a_scalar, b_scalar) = (self.numel() == 1, other.numel() == 1);
        if !a_scalar && !b_scalar && !same_shape(&self.shape, &other.shape) {
            return Err(Error::shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let out_shape = if b_scalar { self.shape.clone() } else { other.shape.clone() };
        let dtype = if b_scalar && !a_scalar { self.dtype() } else if a_scalar && !b_scalar { other.dtype() } else { self.dtype() };
        let a = self.cast(dtype)?;
        let b = other.cast(dtype)?;
        let data = if op.is_compare() {
            Storage::Logical(for_storage!(&a.data, x => {
                let y = Element::view(&b.data).expect("cast to common dtype");
                compare(x, y, op)
            }))
        } else {
            match (&a.data, &b.data) {
                (Storage::F32(x), Storage::F32(y)) => Storage::F32(map_binary(x, y, op)),
                (Storage::F64(x), Storage::F64(y)) => Storage::F64(map_binary(x, y, op)),
                (Storage::I32(x), Storage::I32(y)) => Storage::I32(map_binary(x, y, op)),
                (Storage::U8(x), Storage::U8(y)) => Storage::U8(map_binary(x, y, op)),
                (Storage::Logical(x), Storage::Logical(y)) => Storage::F64(
                    map_binary(x, y, op).into_iter().map(f64::from).collect(),
                ),
                _ => unreachable!("operands cast to a common dtype"),
            }
        };
        Tensor::from_storage(out_shape, data)
    }

    pub fn plus(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Plus, other)
    }

    pub fn minus(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Minus, other)
    }

    pub fn times(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Times, other)
    }

    pub fn divide(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Divide, other)
    }

    /// Element-wise unary op. `log` of non-positive input yields NaN/-inf.
    pub fn unary(&self, op: UnaryOp) -> Result<Tensor> {
        self.check()?;
        let dtype = self.dtype();
        if matches!(op, UnaryOp::Log | UnaryOp::Exp) && !dtype.is_float() {
            return Err(Error::UnsupportedDType { op: "log/exp", dtype });
        }
        if dtype == DType::Logical {
            return Err(Error::UnsupportedDType { op: "unary", dtype });
        }
        let data = match &self.data {
            Storage::F32(v) => Storage::F32(v.iter().map(|&x| unary_f(op, x)).collect()),
            Storage::F64(v) => Storage::F64(v.iter().map(|&x| unary_f(op, x)).collect()),
            other => for_storage!(other, v => {
                let mapped: Vec<f64> = v.iter().map(|x| unary_f(op, x.to_f64())).collect();
                self.data.refill_like(&mapped)
            }),
        };
        Tensor::from_storage(self.shape.clone(), data)
    }

    pub fn log(&self) -> Result<Tensor> {
        self.unary(UnaryOp::Log)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary(UnaryOp::Exp)
    }

    /// Maximum along 1-origin `dim` (default 1). Ties resolve to the smallest index.
    pub fn argmax(&self, dim: Option<usize>) -> Result<IndexResult> {
        self.check()?;
        if self.dtype() == DType::Logical {
            return Err(Error::UnsupportedDType { op: "argmax", dtype: DType::Logical });
        }
        if self.numel() == 0 {
            return Err(Error::Empty);
        }
        let dim = dim.unwrap_or(1);
        if dim == 0 {
            return Err(Error::InvalidArgument("argmax dimension is 1-origin".into()));
        }
        let axis = dim - 1;
        let inner: usize = (0..axis).map(|d| self.extent(d)).product();
        let len = self.extent(axis);
        let outer = self.numel() / (inner * len);
        let mut out_shape: Vec<usize> = (0..self.ndim().max(dim)).map(|d| self.extent(d)).collect();
        out_shape[axis] = 1;
        let mut best_idx = Vec::with_capacity(inner * outer);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * inner * len + i;
                let mut best = 0;
                let mut best_v = self.data.get_f64(base);
                for j in 1..len {
                    let v = self.data.get_f64(base + j * inner);
                    if v > best_v || (best_v.is_nan() && !v.is_nan()) {
                        best = j;
                        best_v = v;
                    }
                }
                best_idx.push(base + best * inner);
            }
        }
        let indices: Vec<i32> = best_idx.iter().map(|&flat| ((flat / inner) % len + 1) as i32).collect();
        let values = for_storage!(&self.data, v => {
            let picked: Vec<f64> = best_idx.iter().map(|&f| v[f].to_f64()).collect();
            self.data.refill_like(&picked)
        });
        Ok(IndexResult {
            values: Tensor::from_storage(out_shape.clone(), values)?,
            indices: Tensor::from_storage(out_shape, Storage::I32(indices))?,
        })
    }
}

fn unary_f<T: num_traits::Float>(op: UnaryOp, x: T) -> T {
    match op {
        UnaryOp::Log => x.ln(),
        UnaryOp::Exp => x.exp(),
        UnaryOp::Neg => -x,
        UnaryOp::Abs => x.abs(),
        UnaryOp::Relu => {
            if x > T::zero() {
                x
            } else {
                T::zero()
            }
        }
    }
}

impl Storage {
    /// New storage of this dtype holding `values`.
    fn refill_like(&self, values: &[f64]) -> Storage {
        match self.dtype() {
            DType::F32 => Storage::F32(values.iter().map(|&v| v as f32).collect()),
            DType::F64 => Storage::F64(values.to_vec()),
            DType::I32 => Storage::I32(values.iter().map(|&v| i32::from_f64(v)).collect()),
            DType::U8 => Storage::U8(values.iter().map(|&v| u8::from_f64(v)).collect()),
            DType::Logical => Storage::Logical(values.iter().map(|&v| u8::from(v != 0.0)).collect()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn reshape_refills_column_major() {
        let r = t(&[4], &[1., 2., 3., 4.]).reshape(&[2, 2]).unwrap();
        assert_eq!(r.at(&[1, 2]).unwrap(), 3.0);
        assert_eq!(r.at(&[2, 1]).unwrap(), 2.0);
        assert!(r.reshape(&[3]).is_err());
    }

    #[test]
    fn permute_and_transpose() {
        let img = Tensor::zeros(&[4, 28, 28], DType::U8).unwrap();
        assert_eq!(img.permute(&[3, 2, 1]).unwrap().shape(), &[28, 28, 4]);
        assert!(img.permute(&[1, 1, 2]).is_err());
        assert!(img.permute(&[1, 2]).is_err());
        assert!(img.transpose().is_err());

        // [[1,2],[3,4]] -> [[1,3],[2,4]]
        let m = t(&[2, 2], &[1., 3., 2., 4.]);
        assert_eq!(m.transpose().unwrap().data::<f32>().unwrap(), &[1., 2., 3., 4.]);
        let row = t(&[1, 3], &[1., 2., 3.]);
        assert_eq!(row.transpose().unwrap().shape(), &[3, 1]);
        let v = t(&[3], &[1., 2., 3.]);
        assert_eq!(v.transpose().unwrap().shape(), &[1, 3]);
    }

    #[test]
    fn repmat_cases() {
        let col = t(&[2, 1], &[1., 2.]);
        let r = col.repmat(&[1, 3]).unwrap();
        assert_eq!(r.shape(), &[2, 3]);
        assert_eq!(r.data::<f32>().unwrap(), &[1., 2., 1., 2., 1., 2.]);

        let bias = Tensor::zeros(&[10, 1], DType::F32).unwrap();
        assert_eq!(bias.repmat(&[1, 64]).unwrap().shape(), &[10, 64]);

        let five = t(&[1, 1], &[5.]);
        assert_eq!(five.repmat(&[2, 2]).unwrap().data::<f32>().unwrap(), &[5.; 4]);
        assert!(five.repmat(&[0, 1]).is_err());
    }

    #[test]
    fn binary_cases() {
        assert_eq!(t(&[1, 2], &[1., 2.]).plus(&t(&[1, 2], &[3., 4.])).unwrap().data::<f32>().unwrap(), &[4., 6.]);
        let two = Tensor::scalar(2.0, DType::F64);
        assert_eq!(t(&[3], &[1., 2., 3.]).times(&two).unwrap().data::<f32>().unwrap(), &[2., 4., 6.]);
        let gt = t(&[2], &[1., 5.]).binary(BinaryOp::Gt, &t(&[2], &[3., 3.])).unwrap();
        assert_eq!(gt.dtype(), DType::Logical);
        assert_eq!(gt.data::<u8>().unwrap(), &[0, 1]);
        assert!(t(&[2], &[1., 2.]).plus(&t(&[3], &[1., 2., 3.])).is_err());
    }

    #[test]
    fn unary_cases() {
        let l = t(&[2], &[1.0, std::f32::consts::E]).log().unwrap();
        let v = l.data::<f32>().unwrap();
        assert!(v[0].abs() < 1e-6 && (v[1] - 1.0).abs() < 1e-6);
        assert_eq!(t(&[2], &[-1., 2.]).unary(UnaryOp::Relu).unwrap().data::<f32>().unwrap(), &[0., 2.]);
        assert_eq!(t(&[1], &[0.]).exp().unwrap().data::<f32>().unwrap(), &[1.]);
        let bad = t(&[2], &[0., -1.]).log().unwrap();
        assert!(bad.data::<f32>().unwrap().iter().all(|x| !x.is_finite()));
        let i = Tensor::from_vec(&[2], vec![-3i32, 4]).unwrap();
        assert_eq!(i.unary(UnaryOp::Abs).unwrap().data::<i32>().unwrap(), &[3, 4]);
        assert!(i.log().is_err());
    }

    #[test]
    fn argmax_cases() {
        let r = t(&[3, 1], &[0.1, 0.9, 0.2]).argmax(None).unwrap();
        assert_eq!(r.indices.data::<i32>().unwrap(), &[2]);
        assert!((r.values.data::<f32>().unwrap()[0] - 0.9).abs() < 1e-7);

        let mut pred = vec![0.0f32; 10];
        pred[3] = 5.0;
        let r = t(&[10, 1], &pred).argmax(None).unwrap();
        assert_eq!(r.indices.data::<i32>().unwrap()[0] - 1, 3);

        let r = t(&[2], &[5., 5.]).argmax(None).unwrap();
        assert_eq!(r.indices.data::<i32>().unwrap(), &[1]);

        // along dim 2 of [[1,3],[4,2]]
        let r = t(&[2, 2], &[1., 4., 3., 2.]).argmax(Some(2)).unwrap();
        assert_eq!(r.indices.shape(), &[2, 1]);
        assert_eq!(r.indices.data::<i32>().unwrap(), &[2, 1]);
    }

    proptest! {
        #[test]
        fn permute_inverse_is_identity(shape in proptest::collection::vec(1usize..4, 1..5), rot in 0usize..4) {
            let k = shape.len();
            let n: usize = shape.iter().product();
            let x = Tensor::from_vec(&shape, (0..n).map(|i| i as f32).collect()).unwrap();
            let order: Vec<usize> = (0..k).map(|d| (d + rot) % k + 1).collect();
            let mut inverse = vec![0; k];
            for (i, &o) in order.iter().enumerate() {
                inverse[o - 1] = i + 1;
            }
            let back = x.permute(&order).unwrap().permute(&inverse).unwrap();
            prop_assert!(back.bit_eq(&x));
            let r = x.reshape(&[n]).unwrap().reshape(&shape).unwrap();
            prop_assert!(r.bit_eq(&x));
            let ones = vec![1; k];
            prop_assert!(x.repmat(&ones).unwrap().bit_eq(&x));
        }
    }
}
