//! Fully-connected layer: `y = W' x + repmat(b, 1, n)`.

use rand::Rng;
use serde::Deserialize;

use super::{expect_inputs, init, same_dtype, with_real, ForwardCtx, Layer, Param};
use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

#[derive(Clone, Debug, Deserialize)]
pub struct LinearParams {
    pub out_size: usize,
    #[serde(default)]
    pub in_shape: Option<Vec<usize>>,
    #[serde(default)]
    pub in_size: Option<usize>,
}

impl LinearParams {
    pub fn in_shape(&self) -> Result<Vec<usize>> {
        match (&self.in_shape, self.in_size) {
            (Some(s), _) if !s.is_empty() && s.iter().all(|&e| e > 0) => Ok(s.clone()),
            (None, Some(n)) if n > 0 => Ok(vec![n]),
            _ => Err(Error::Definition("linear layer needs a positive in_shape or in_size".into())),
        }
    }
}

/// Samples in `x` when each holds a blob of `in_shape`, flattened column-major.
fn sample_count(x: &Tensor, in_shape: &[usize]) -> Result<usize> {
    let features: usize = in_shape.iter().product();
    let leading_ok = in_shape.iter().enumerate().all(|(d, &e)| x.extent(d) == e);
    if !leading_ok || x.numel() % features != 0 {
        return Err(Error::shape(format!("input {:?} does not hold samples of shape {in_shape:?}", x.shape())));
    }
    Ok(x.numel() / features)
}

fn forward_raw<T: Real>(x: &[T], w: &[T], b: &[T], f: usize, out: usize, n: usize) -> Vec<T> {
    let mut y = vec![T::zero(); out * n];
    for col in y.chunks_exact_mut(out) {
        col.copy_from_slice(b);
    }
    T::gemm(out, f, n, T::one(), w, true, x, false, T::one(), &mut y);
    y
}

pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor, in_shape: &[usize]) -> Result<Tensor> {
    same_dtype(x, w)?;
    same_dtype(w, b)?;
    let n = sample_count(x, in_shape)?;
    let f: usize = in_shape.iter().product();
    let out = w.extent(1);
    if w.shape() != [f, out] || b.numel() != out {
        return Err(Error::shape(format!("linear weight {:?} / bias {:?} for {f} features", w.shape(), b.shape())));
    }
    with_real!(x.dtype(), "linear", T => {
        Tensor::from_vec(&[out, n], forward_raw::<T>(x.data()?, w.data()?, b.data()?, f, out, n))
    })
}

/// `(dX, dW, db)` with `dW = x dY'`, `dX = W dY`, `db = sum_n dY`.
/// `dX` takes the shape of `x`.
pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor, in_shape: &[usize]) -> Result<(Tensor, Tensor, Tensor)> {
    let (dx, dw, db) = backward_tensors(x, w, dy, in_shape, true)?;
    Ok((dx.expect("requested"), dw, db))
}

fn backward_tensors(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    in_shape: &[usize],
    need_dx: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    same_dtype(x, w)?;
    same_dtype(x, dy)?;
    let n = sample_count(x, in_shape)?;
    let f: usize = in_shape.iter().product();
    let out = w.extent(1);
    if dy.numel() != out * n || dy.extent(0) != out {
        return Err(Error::shape(format!("linear output gradient {:?}, expected [{out}, {n}]", dy.shape())));
    }
    with_real!(x.dtype(), "linear", T => {
        let (xv, wv, dyv) = (x.data::<T>()?, w.data::<T>()?, dy.data::<T>()?);
        let mut dw = vec![T::zero(); f * out];
        T::gemm(f, n, out, T::one(), xv, false, dyv, true, T::zero(), &mut dw);
        let db: Vec<T> = (0..out).map(|o| (0..n).map(|s| dyv[o + out * s]).sum()).collect();
        let dx = if need_dx {
            let mut dx = vec![T::zero(); f * n];
            T::gemm(f, out, n, T::one(), wv, false, dyv, false, T::zero(), &mut dx);
            Some(Tensor::from_vec(x.shape(), dx)?)
        } else {
            None
        };
        Ok((dx, Tensor::from_vec(&[f, out], dw)?, Tensor::from_vec(&[out, 1], db)?))
    })
}

pub struct Linear {
    in_shape: Vec<usize>,
    params: Vec<Param>,
}

impl Linear {
    pub fn new<R: Rng>(p: &LinearParams, dtype: DType, rng: &mut R) -> Result<Linear> {
        let in_shape = p.in_shape()?;
        if p.out_size == 0 {
            return Err(Error::Definition("linear out_size must be positive".into()));
        }
        let f: usize = in_shape.iter().product();
        let w = init::he_normal(&[f, p.out_size], f, dtype, rng)?;
        let b = Tensor::zeros(&[p.out_size, 1], dtype)?;
        Ok(Linear { in_shape, params: vec![Param::learnable("W", w)?, Param::learnable("b", b)?] })
    }
}

impl Layer for Linear {
    fn kind(&self) -> &'static str {
        "linear"
    }

    fn forward(&mut self, inputs: &[&Tensor], _ctx: &mut ForwardCtx<'_>) -> Result<Vec<Tensor>> {
        expect_inputs(inputs, 1)?;
        Ok(vec![linear_forward(inputs[0], &self.params[0].value, &self.params[1].value, &self.in_shape)?])
    }

    fn backward(
        &mut self,
        inputs: &[&Tensor],
        _outputs: &[&Tensor],
        top: &[Option<&Tensor>],
        need: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let Some(dy) = top[0] else { return Ok(vec![None]) };
        let (dx, dw, db) = backward_tensors(inputs[0], &self.params[0].value, dy, &self.in_shape, need[0])?;
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
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fig2_fc_shapes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        use rand::SeedableRng;
        let p = LinearParams { out_size: 10, in_shape: Some(vec![12, 12, 20]), in_size: None };
        let l = Linear::new(&p, DType::F32, &mut rng).unwrap();
        assert_eq!(l.params()[0].value.shape(), &[2880, 10]);
        let x = Tensor::zeros(&[12, 12, 20, 5], DType::F32).unwrap();
        let y = linear_forward(&x, &l.params()[0].value, &l.params()[1].value, &[12, 12, 20]).unwrap();
        assert_eq!(y.shape(), &[10, 5]);
        let bad = Tensor::zeros(&[12, 20, 12, 5], DType::F32).unwrap();
        assert!(linear_forward(&bad, &l.params()[0].value, &l.params()[1].value, &[12, 12, 20]).is_err());
    }

    #[test]
    fn identity_weight() {
        let x = Tensor::from_vec(&[3, 2], vec![1.0, 2., 3., 4., 5., 6.]).unwrap();
        let w = Tensor::from_vec(&[3, 3], vec![1.0, 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let b = Tensor::zeros(&[3, 1], DType::F64).unwrap();
        assert!(linear_forward(&x, &w, &b, &[3]).unwrap().bit_eq(&x));
    }

    #[test]
    fn hand_expanded_two_by_one() {
        // W = [1; 1], x = [3; 4], dY = 2  =>  dW = 2 * [3; 4], dX = 2 * [1; 1], db = 2
        let x = Tensor::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap();
        let w = Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap();
        let dy = Tensor::from_vec(&[1, 1], vec![2.0]).unwrap();
        let (dx, dw, db) = linear_backward(&x, &w, &dy, &[2]).unwrap();
        assert_eq!(dw.data::<f64>().unwrap(), &[6.0, 8.0]);
        assert_eq!(dx.data::<f64>().unwrap(), &[2.0, 2.0]);
        assert_eq!(db.data::<f64>().unwrap(), &[2.0]);
        let zero = Tensor::zeros(&[1, 1], DType::F64).unwrap();
        let (dx, dw, db) = linear_backward(&x, &w, &zero, &[2]).unwrap();
        assert!([dx, dw, db].iter().all(|t| t.data::<f64>().unwrap().iter().all(|&v| v == 0.0)));
    }
}
