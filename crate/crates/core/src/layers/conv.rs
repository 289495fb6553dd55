//! 2-D convolution as im2col lowering followed by one GEMM.

use rand::Rng;
use serde::Deserialize;

use super::im2col::{col2im_raw, im2col_raw, Geometry, Window};
use super::{dims4, expect_inputs, init, same_dtype, with_real, ForwardCtx, Layer, Param};
use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
pub struct ConvConfig {
    pub out_size: usize,
    pub in_size: usize,
    pub ksize: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub pad: usize,
}

fn one() -> usize {
    1
}

impl ConvConfig {
    pub fn window(&self) -> Window {
        Window { ksize: self.ksize, stride: self.stride, pad: self.pad }
    }

    /// Rows of the weight matrix: `ksize^2 * in_size`.
    pub fn patch_len(&self) -> usize {
        self.ksize * self.ksize * self.in_size
    }

    fn geometry(&self, x: &Tensor) -> Result<Geometry> {
        let dims = dims4(x);
        if dims[2] != self.in_size {
            return Err(Error::shape(format!("input has {} channels, layer expects {}", dims[2], self.in_size)));
        }
        Geometry::new(dims, self.window())
    }
}

/// `[P, out]` GEMM result (rows ordered `(oy, ox, n)`) to an output blob
/// `[oh, ow, out, n]`, adding the per-channel bias.
fn unflatten_output<T: Real>(y: &[T], bias: &[T], g: &Geometry, out: usize) -> Vec<T> {
    let plane = g.out_h * g.out_w;
    let rows = g.rows();
    let mut blob = vec![T::zero(); rows * out];
    for s in 0..g.n {
        for o in 0..out {
            let src = &y[o * rows + s * plane..][..plane];
            let dst = &mut blob[(o + out * s) * plane..][..plane];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v + bias[o];
            }
        }
    }
    blob
}

/// Inverse of [`unflatten_output`] without the bias.
fn flatten_output<T: Real>(dy: &[T], g: &Geometry, out: usize) -> Vec<T> {
    let plane = g.out_h * g.out_w;
    let rows = g.rows();
    let mut flat = vec![T::zero(); rows * out];
    for s in 0..g.n {
        for o in 0..out {
            flat[o * rows + s * plane..][..plane].copy_from_slice(&dy[(o + out * s) * plane..][..plane]);
        }
    }
    flat
}

fn forward_raw<T: Real>(col: &[T], w: &[T], b: &[T], g: &Geometry, out: usize) -> Vec<T> {
    let mut y = vec![T::zero(); g.rows() * out];
    T::gemm(g.rows(), g.cols(), out, T::one(), col, false, w, false, T::zero(), &mut y);
    unflatten_output(&y, b, g, out)
}

struct RawGrads<T> {
    dx: Option<Vec<T>>,
    dw: Vec<T>,
    db: Vec<T>,
}

fn backward_raw<T: Real>(col: &[T], w: &[T], dy: &[T], g: &Geometry, out: usize, need_dx: bool) -> RawGrads<T> {
    let rows = g.rows();
    let k = g.cols();
    let dyf = flatten_output(dy, g, out);
    let mut dw = vec![T::zero(); k * out];
    T::gemm(k, rows, out, T::one(), col, true, &dyf, false, T::zero(), &mut dw);
    let db = (0..out).map(|o| dyf[o * rows..(o + 1) * rows].iter().copied().sum()).collect();
    let dx = need_dx.then(|| {
        let mut dcol = vec![T::zero(); rows * k];
        T::gemm(rows, out, k, T::one(), &dyf, false, w, true, T::zero(), &mut dcol);
        col2im_raw(&dcol, g)
    });
    RawGrads { dx, dw, db }
}

fn check_params(cfg: &ConvConfig, w: &Tensor, b: &Tensor) -> Result<()> {
    if w.shape() != [cfg.patch_len(), cfg.out_size] {
        return Err(Error::shape(format!("conv weight {:?}, expected [{}, {}]", w.shape(), cfg.patch_len(), cfg.out_size)));
    }
    if b.numel() != cfg.out_size {
        return Err(Error::shape(format!("conv bias has {} elements, expected {}", b.numel(), cfg.out_size)));
    }
    same_dtype(w, b)
}

/// Output blob `[out_h, out_w, out_size, n]` for input `[h, w, in_size, n]`.
pub fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor, cfg: &ConvConfig) -> Result<Tensor> {
    check_params(cfg, w, b)?;
    same_dtype(x, w)?;
    let g = cfg.geometry(x)?;
    with_real!(x.dtype(), "convolution_2d", T => {
        let col = im2col_raw::<T>(x.data()?, &g);
        let y = forward_raw(&col, w.data()?, b.data()?, &g, cfg.out_size);
        Tensor::from_vec(&[g.out_h, g.out_w, cfg.out_size, g.n], y)
    })
}

/// `(dX, dW, db)` for upstream gradient `dy`.
pub fn conv_backward(x: &Tensor, w: &Tensor, cfg: &ConvConfig, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    same_dtype(x, w)?;
    same_dtype(x, dy)?;
    let g = cfg.geometry(x)?;
    if dims4(dy) != [g.out_h, g.out_w, cfg.out_size, g.n] {
        return Err(Error::shape(format!("conv output gradient {:?}", dy.shape())));
    }
    with_real!(x.dtype(), "convolution_2d", T => {
        let col = im2col_raw::<T>(x.data()?, &g);
        let r = backward_raw(&col, w.data()?, dy.data()?, &g, cfg.out_size, true);
        Ok((
            Tensor::from_vec(&[g.h, g.w, g.c, g.n], r.dx.expect("requested"))?,
            Tensor::from_vec(&[cfg.patch_len(), cfg.out_size], r.dw)?,
            Tensor::from_vec(&[cfg.out_size, 1], r.db)?,
        ))
    })
}

pub struct Conv2d {
    cfg: ConvConfig,
    params: Vec<Param>,
    /// Lowered input from the last forward.
    col: Option<Tensor>,
}

impl Conv2d {
    pub fn new<R: Rng>(cfg: ConvConfig, dtype: DType, rng: &mut R) -> Result<Conv2d> {
        if cfg.out_size == 0 || cfg.in_size == 0 {
            return Err(Error::InvalidArgument(format!("conv sizes must be positive: {cfg:?}")));
        }
        cfg.window().out_extent(cfg.ksize)?;
        let w = init::he_normal(&[cfg.patch_len(), cfg.out_size], cfg.patch_len(), dtype, rng)?;
        let b = Tensor::zeros(&[cfg.out_size, 1], dtype)?;
        Ok(Conv2d { cfg, params: vec![Param::learnable("W", w)?, Param::learnable("b", b)?], col: None })
    }

    pub fn config(&self) -> &ConvConfig {
        &self.cfg
    }
}

impl Layer for Conv2d {
    fn kind(&self) -> &'static str {
        "convolution_2d"
    }

    fn forward(&mut self, inputs: &[&Tensor], _ctx: &mut ForwardCtx<'_>) -> Result<Vec<Tensor>> {
        expect_inputs(inputs, 1)?;
        let x = inputs[0];
        let (w, b) = (&self.params[0].value, &self.params[1].value);
        same_dtype(x, w)?;
        let g = self.cfg.geometry(x)?;
        let out = self.cfg.out_size;
        let (col, y) = with_real!(x.dtype(), "convolution_2d", T => {
            let col = im2col_raw::<T>(x.data()?, &g);
            let y = forward_raw(&col, w.data()?, b.data()?, &g, out);
            Ok((Tensor::from_vec(&[g.rows(), g.cols()], col)?, Tensor::from_vec(&[g.out_h, g.out_w, out, g.n], y)?))
        })?;
        self.col = Some(col);
        Ok(vec![y])
    }

    fn backward(
        &mut self,
        inputs: &[&Tensor],
        _outputs: &[&Tensor],
        top: &[Option<&Tensor>],
        need: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let Some(dy) = top[0] else { return Ok(vec![None]) };
        let g = self.cfg.geometry(x)?;
        if dims4(dy) != [g.out_h, g.out_w, self.cfg.out_size, g.n] {
            return Err(Error::shape(format!("conv output gradient {:?}", dy.shape())));
        }
        let col = self.col.as_ref().ok_or(Error::BackwardWithoutForward)?;
        let out = self.cfg.out_size;
        let patch = self.cfg.patch_len();
        let (dx, dw, db) = with_real!(x.dtype(), "convolution_2d", T => {
            let r = backward_raw::<T>(col.data()?, self.params[0].value.data()?, dy.data()?, &g, out, need[0]);
            let dx = r.dx.map(|v| Tensor::from_vec(&[g.h, g.w, g.c, g.n], v)).transpose()?;
            Ok((dx, Tensor::from_vec(&[patch, out], r.dw)?, Tensor::from_vec(&[out, 1], r.db)?))
        })?;
        self.params[0].grad = dw;
        self.params[1].grad = db;
        Ok(vec![dx])
    }

    fn params(&self) -> &[Param] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    fn release(&mut self) {
        self.col = None;
    }
}
