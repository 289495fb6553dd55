use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use super::{DType, Storage};

/// A Rust scalar type that can back a tensor buffer.
pub trait Element: Copy + Send + Sync + PartialOrd + Debug + Default + 'static {
    const DTYPE: DType;

    fn view(s: &Storage) -> Option<&[Self]>;
    fn view_mut(s: &mut Storage) -> Option<&mut [Self]>;
    fn unwrap(s: Storage) -> Option<Vec<Self>>;
    fn wrap(v: Vec<Self>) -> Storage;

    fn to_f64(self) -> f64;
    /// Rounds and saturates for integer types.
    fn from_f64(v: f64) -> Self;
}

macro_rules! impl_element {
    ($t:ty, $variant:ident, $from:expr) => {
        impl Element for $t {
            const DTYPE: DType = DType::$variant;

            fn view(s: &Storage) -> Option<&[Self]> {
                match s {
                    Storage::$variant(v) => Some(v),
                    _ => None,
                }
            }

            fn view_mut(s: &mut Storage) -> Option<&mut [Self]> {
                match s {
                    Storage::$variant(v) => Some(v),
                    _ => None,
                }
            }

            fn unwrap(s: Storage) -> Option<Vec<Self>> {
                match s {
                    Storage::$variant(v) => Some(v),
                    _ => None,
                }
            }

            fn wrap(v: Vec<Self>) -> Storage {
                Storage::$variant(v)
            }

            fn to_f64(self) -> f64 {
                self as f64
            }

            fn from_f64(v: f64) -> Self {
                let f: fn(f64) -> $t = $from;
                f(v)
            }
        }
    };
}

impl_element!(f32, F32, |v| v as f32);
impl_element!(f64, F64, |v| v);
impl_element!(i32, I32, |v| v.round() as i32);

// u8 views also cover logical buffers; both are one byte per element.
impl Element for u8 {
    const DTYPE: DType = DType::U8;

    fn view(s: &Storage) -> Option<&[Self]> {
        match s {
            Storage::U8(v) | Storage::Logical(v) => Some(v),
            _ => None,
        }
    }

    fn view_mut(s: &mut Storage) -> Option<&mut [Self]> {
        match s {
            Storage::U8(v) | Storage::Logical(v) => Some(v),
            _ => None,
        }
    }

    fn unwrap(s: Storage) -> Option<Vec<Self>> {
        match s {
            Storage::U8(v) | Storage::Logical(v) => Some(v),
            _ => None,
        }
    }

    fn wrap(v: Vec<Self>) -> Storage {
        Storage::U8(v)
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn from_f64(v: f64) -> Self {
        v.round() as u8
    }
}

/// Floating element types usable by layers and GEMM.
pub trait Real: Element + Float + Sum + AddAssign + SubAssign + MulAssign {
    /// Column-major `C = alpha * op(A) * op(B) + beta * C` where `op(A)` is
    /// `m x k` and `op(B)` is `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v)
    }
}

/// Row and column strides of a column-major matrix that is logically
/// `rows x cols`, optionally stored transposed.
fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    if trans {
        (cols as isize, 1)
    } else {
        let _ = cols;
        (1, rows as isize)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert_eq!(a.len(), m * k, "gemm: A length");
                assert_eq!(b.len(), k * n, "gemm: B length");
                assert_eq!(c.len(), m * n, "gemm: C length");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, trans_a);
                let (rsb, csb) = strides(k, n, trans_b);
                // SAFETY: the three slices were checked above to hold exactly
                // m*k, k*n and m*n elements, and the strides address a dense
                // column-major (or transposed) layout within those bounds.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        1,
                        m as isize,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);
