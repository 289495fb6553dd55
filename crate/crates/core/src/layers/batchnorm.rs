//! Batch normalization over the channel axis.
//!
//! Spatial blobs (`ndim >= 3`) normalize each channel over `(h, w, n)`; flat
//! blobs normalize each feature over `n`.

use serde::Deserialize;

use super::{expect_inputs, with_real, ForwardCtx, Layer, Param, Phase};
use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

#[derive(Clone, Copy, Debug, Deserialize)]
pub struct BatchNormParams {
    pub in_size: usize,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

fn default_eps() -> f64 {
    1e-5
}

fn default_momentum() -> f64 {
    0.9
}

/// `x` viewed as `[inner, channels, outer]`.
#[derive(Clone, Copy, Debug)]
struct Layout {
    inner: usize,
    channels: usize,
    outer: usize,
}

impl Layout {
    fn of(x: &Tensor, channels: usize) -> Result<Layout> {
        let (inner, c) = if x.ndim() >= 3 { (x.extent(0) * x.extent(1), x.extent(2)) } else { (1, x.extent(0)) };
        if c != channels {
            return Err(Error::shape(format!("batch norm over {channels} channels got input {:?}", x.shape())));
        }
        let outer = x.numel() / (inner * c);
        if outer == 0 {
            return Err(Error::Empty);
        }
        Ok(Layout { inner, channels, outer })
    }

    fn count(&self) -> usize {
        self.inner * self.outer
    }

    fn for_channel<T: Copy>(&self, data: &[T], ch: usize, mut f: impl FnMut(usize, T)) {
        for o in 0..self.outer {
            let base = self.inner * (ch + self.channels * o);
            for i in 0..self.inner {
                f(base + i, data[base + i]);
            }
        }
    }
}

/// Cached batch statistics for the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

struct TrainOut<T> {
    y: Vec<T>,
    mean: Vec<T>,
    var: Vec<T>,
    cache: BnCache<T>,
}

fn train_raw<T: Real>(x: &[T], gamma: &[T], beta: &[T], l: Layout, eps: f64) -> TrainOut<T> {
    let m = T::lit(l.count() as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut mean = vec![T::zero(); l.channels];
    let mut var = vec![T::zero(); l.channels];
    let mut inv_std = vec![T::zero(); l.channels];
    for ch in 0..l.channels {
        let mut s = T::zero();
        l.for_channel(x, ch, |_, v| s += v);
        let mu = s / m;
        let mut sq = T::zero();
        l.for_channel(x, ch, |_, v| sq += (v - mu) * (v - mu));
        let v = sq / m;
        let is = T::one() / (v + T::lit(eps)).sqrt();
        l.for_channel(x, ch, |i, xv| {
            xhat[i] = (xv - mu) * is;
            y[i] = gamma[ch] * xhat[i] + beta[ch];
        });
        mean[ch] = mu;
        var[ch] = v;
        inv_std[ch] = is;
    }
    TrainOut { y, mean, var, cache: BnCache { xhat, inv_std } }
}

fn backward_raw<T: Real>(dy: &[T], gamma: &[T], cache: &BnCache<T>, l: Layout) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = T::lit(l.count() as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); l.channels];
    let mut dbeta = vec![T::zero(); l.channels];
    for ch in 0..l.channels {
        let (mut sg, mut sgx) = (T::zero(), T::zero());
        l.for_channel(dy, ch, |i, g| {
            sg += g;
            sgx += g * cache.xhat[i];
        });
        dgamma[ch] = sgx;
        dbeta[ch] = sg;
        let k = gamma[ch] * cache.inv_std[ch] / m;
        l.for_channel(dy, ch, |i, g| {
            dx[i] = k * (m * g - sg - cache.xhat[i] * sgx);
        });
    }
    (dx, dgamma, dbeta)
}

/// Train-phase normalization. Returns `y`, batch mean and (biased) variance.
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, Tensor, Tensor)> {
    let l = Layout::of(x, gamma.numel())?;
    with_real!(x.dtype(), "batch_normalization", T => {
        let out = train_raw::<T>(x.data()?, gamma.data()?, beta.data()?, l, eps);
        Ok((
            Tensor::from_vec(x.shape(), out.y)?,
            Tensor::from_vec(&[l.channels, 1], out.mean)?,
            Tensor::from_vec(&[l.channels, 1], out.var)?,
        ))
    })
}

/// `(dX, dgamma, dbeta)` for a train-phase forward on `x`.
pub fn batch_norm_backward(x: &Tensor, gamma: &Tensor, eps: f64, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let l = Layout::of(x, gamma.numel())?;
    with_real!(x.dtype(), "batch_normalization", T => {
        let zeros = vec![T::zero(); l.channels];
        let out = train_raw::<T>(x.data()?, gamma.data()?, &zeros, l, eps);
        let (dx, dg, db) = backward_raw::<T>(dy.data()?, gamma.data()?, &out.cache, l);
        Ok((
            Tensor::from_vec(x.shape(), dx)?,
            Tensor::from_vec(&[l.channels, 1], dg)?,
            Tensor::from_vec(&[l.channels, 1], db)?,
        ))
    })
}

/// Test-phase normalization with running statistics.
pub fn batch_norm_test(x: &Tensor, gamma: &Tensor, beta: &Tensor, mean: &Tensor, var: &Tensor, eps: f64) -> Result<Tensor> {
    let l = Layout::of(x, gamma.numel())?;
    with_real!(x.dtype(), "batch_normalization", T => {
        let (g, b, mu, v) = (gamma.data::<T>()?, beta.data::<T>()?, mean.data::<T>()?, var.data::<T>()?);
        let xs = x.data::<T>()?;
        let mut y = vec![T::zero(); xs.len()];
        for ch in 0..l.channels {
            let is = T::one() / (v[ch] + T::lit(eps)).sqrt();
            l.for_channel(xs, ch, |i, xv| y[i] = g[ch] * (xv - mu[ch]) * is + b[ch]);
        }
        Tensor::from_vec(x.shape(), y)
    })
}

pub struct BatchNorm {
    p: BatchNormParams,
    /// gamma, beta, running_mean, running_var
    params: Vec<Param>,
    cache: Option<(Layout, CacheAny)>,
}

enum CacheAny {
    F32(BnCache<f32>),
    F64(BnCache<f64>),
}

impl BatchNorm {
    pub fn new(p: BatchNormParams, dtype: DType) -> Result<BatchNorm> {
        if p.in_size == 0 || !(0.0..1.0).contains(&p.momentum) || p.eps <= 0.0 {
            return Err(Error::Definition(format!("invalid batch norm params {p:?}")));
        }
        let c = p.in_size;
        Ok(BatchNorm {
            p,
            params: vec![
                Param::learnable("gamma", Tensor::ones(&[c, 1], dtype)?)?,
                Param::learnable("beta", Tensor::zeros(&[c, 1], dtype)?)?,
                Param::state("running_mean", Tensor::zeros(&[c, 1], dtype)?)?,
                Param::state("running_var", Tensor::ones(&[c, 1], dtype)?)?,
            ],
            cache: None,
        })
    }

    fn update_running<T: Real>(&mut self, mean: &[T], var: &[T], count: usize) -> Result<()> {
        let mom = T::lit(self.p.momentum);
        let unbias = if count > 1 { T::lit(count as f64 / (count - 1) as f64) } else { T::one() };
        for (r, &m) in self.params[2].value.data_mut::<T>()?.iter_mut().zip(mean) {
            *r = mom * *r + (T::one() - mom) * m;
        }
        for (r, &v) in self.params[3].value.data_mut::<T>()?.iter_mut().zip(var) {
            *r = mom * *r + (T::one() - mom) * v * unbias;
        }
        Ok(())
    }
}

impl Layer for BatchNorm {
    fn kind(&self) -> &'static str {
        "batch_normalization"
    }

    fn forward(&mut self, inputs: &[&Tensor], ctx: &mut ForwardCtx<'_>) -> Result<Vec<Tensor>> {
        expect_inputs(inputs, 1)?;
        let x = inputs[0];
        if ctx.phase == Phase::Test {
            let [g, b, m, v] = [0, 1, 2, 3].map(|i| &self.params[i].value);
            return Ok(vec![batch_norm_test(x, g, b, m, v, self.p.eps)?]);
        }
        let l = Layout::of(x, self.p.in_size)?;
        let eps = self.p.eps;
        macro_rules! train {
            ($T:ty, $variant:ident) => {{
                let out = train_raw::<$T>(x.data()?, self.params[0].value.data()?, self.params[1].value.data()?, l, eps);
                self.update_running::<$T>(&out.mean, &out.var, l.count())?;
                self.cache = Some((l, CacheAny::$variant(out.cache)));
                Tensor::from_vec(x.shape(), out.y)?
            }};
        }
        let y = match x.dtype() {
            DType::F32 => train!(f32, F32),
            DType::F64 => train!(f64, F64),
            d => return Err(Error::UnsupportedDType { op: "batch_normalization", dtype: d }),
        };
        Ok(vec![y])
    }

    fn backward(
        &mut self,
        inputs: &[&Tensor],
        _outputs: &[&Tensor],
        top: &[Option<&Tensor>],
        _need: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let Some(dy) = top[0] else { return Ok(vec![None]) };
        let (l, cache) = self.cache.as_ref().ok_or(Error::BackwardWithoutForward)?;
        let l = *l;
        let shape = inputs[0].shape().to_vec();
        let c = l.channels;
        let (dx, dg, db) = match cache {
            CacheAny::F32(cache) => {
                let (dx, dg, db) = backward_raw::<f32>(dy.data()?, self.params[0].value.data()?, cache, l);
                (Tensor::from_vec(&shape, dx)?, Tensor::from_vec(&[c, 1], dg)?, Tensor::from_vec(&[c, 1], db)?)
            }
            CacheAny::F64(cache) => {
                let (dx, dg, db) = backward_raw::<f64>(dy.data()?, self.params[0].value.data()?, cache, l);
                (Tensor::from_vec(&shape, dx)?, Tensor::from_vec(&[c, 1], dg)?, Tensor::from_vec(&[c, 1], db)?)
            }
        };
        self.params[0].grad = dg;
        self.params[1].grad = db;
        Ok(vec![Some(dx)])
    }

    fn params(&self) -> &[Param] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    fn release(&mut self) {
        self.cache = None;
    }
}
