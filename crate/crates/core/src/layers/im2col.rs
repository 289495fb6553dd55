//! Lowering of convolution input patches into a matrix, and its adjoint.
//!
//! The lowered matrix is `(out_h * out_w * n, ksize^2 * c)`, column-major.
//! Row `r` enumerates `(out_y, out_x, sample)` with `out_y` fastest; column
//! `q` enumerates `(ky, kx, channel)` with `ky` fastest. Taps that fall in
//! the zero padding read as 0.

use super::{dims4, with_real};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Spatial window shared by convolution and pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    /// `floor((extent + 2 pad - ksize) / stride) + 1`, which must be at least 1.
    pub fn out_extent(&self, extent: usize) -> Result<usize> {
        if self.ksize == 0 || self.stride == 0 {
            return Err(Error::InvalidArgument(format!("ksize and stride must be positive: {self:?}")));
        }
        let padded = extent + 2 * self.pad;
        if padded < self.ksize {
            return Err(Error::shape(format!("window {self:?} does not fit extent {extent}")));
        }
        Ok((padded - self.ksize) / self.stride + 1)
    }
}

/// Input and output extents of one lowering.
#[derive(Clone, Copy, Debug)]
pub struct Geometry {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub n: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub win: Window,
}

impl Geometry {
    pub fn new(dims: [usize; 4], win: Window) -> Result<Geometry> {
        let [h, w, c, n] = dims;
        Ok(Geometry { h, w, c, n, out_h: win.out_extent(h)?, out_w: win.out_extent(w)?, win })
    }

    pub fn rows(&self) -> usize {
        self.out_h * self.out_w * self.n
    }

    pub fn cols(&self) -> usize {
        self.win.ksize * self.win.ksize * self.c
    }

    /// Calls `f(col_offset, input_offset)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let Geometry { h, w, c, n, out_h, out_w, win } = *self;
        let rows = self.rows();
        let k = win.ksize;
        for ch in 0..c {
            for kx in 0..k {
                for ky in 0..k {
                    let q = ky + k * kx + k * k * ch;
                    let col_base = q * rows;
                    for s in 0..n {
                        let img = h * w * (ch + c * s);
                        for ox in 0..out_w {
                            let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let row_base = col_base + out_h * (ox + out_w * s);
                            let in_base = img + h * ix as usize;
                            for oy in 0..out_h {
                                let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                f(row_base + oy, in_base + iy as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn im2col_raw<T: Real>(x: &[T], g: &Geometry) -> Vec<T> {
    let mut col = vec![T::zero(); g.rows() * g.cols()];
    g.for_each_tap(|dst, src| col[dst] = x[src]);
    col
}

/// Scatter-add a lowered matrix back onto the input grid.
pub fn col2im_raw<T: Real>(col: &[T], g: &Geometry) -> Vec<T> {
    let mut x = vec![T::zero(); g.h * g.w * g.c * g.n];
    g.for_each_tap(|src, dst| x[dst] += col[src]);
    x
}

/// Lower `x` (`[h, w, c, n]`) into `[out_h * out_w * n, ksize^2 * c]`.
pub fn im2col(x: &Tensor, win: Window) -> Result<Tensor> {
    let g = Geometry::new(dims4(x), win)?;
    with_real!(x.dtype(), "im2col", T => {
        Tensor::from_vec(&[g.rows(), g.cols()], im2col_raw::<T>(x.data()?, &g))
    })
}

/// Adjoint of [`im2col`] for an input of extents `dims`.
pub fn col2im(col: &Tensor, dims: [usize; 4], win: Window) -> Result<Tensor> {
    let g = Geometry::new(dims, win)?;
    if col.shape() != [g.rows(), g.cols()] {
        return Err(Error::shape(format!("lowered matrix {:?}, expected [{}, {}]", col.shape(), g.rows(), g.cols())));
    }
    with_real!(col.dtype(), "col2im", T => {
        Tensor::from_vec(&dims, col2im_raw::<T>(col.data()?, &g))
    })
}
