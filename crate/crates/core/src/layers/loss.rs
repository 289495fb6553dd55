use super::{expect_inputs, with_real, ForwardCtx, Layer};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn labels(label: &Tensor, k: usize, n: usize) -> Result<Vec<usize>> {
    if label.numel() != n {
        return Err(Error::shape(format!("{} labels for {n} samples", label.numel())));
    }
    label
        .to_f64_vec()?
        .into_iter()
        .map(|v| {
            if v.fract() != 0.0 || v < 0.0 || v >= k as f64 {
                Err(Error::InvalidArgument(format!("label {v} outside [0, {}]", k - 1)))
            } else {
                Ok(v as usize)
            }
        })
        .collect()
}

fn softmax_ce_raw<T: Real>(pred: &[T], lab: &[usize], k: usize) -> (T, Vec<T>) {
    let n = lab.len();
    let inv_n = T::one() / T::lit(n as f64);
    let mut grad = vec![T::zero(); k * n];
    let mut loss = T::zero();
    for (s, &l) in lab.iter().enumerate() {
        let col = &pred[s * k..(s + 1) * k];
        let m = col.iter().copied().fold(T::neg_infinity(), T::max);
        let g = &mut grad[s * k..(s + 1) * k];
        let mut z = T::zero();
        for (gi, &p) in g.iter_mut().zip(col) {
            *gi = (p - m).exp();
            z += *gi;
        }
        loss += z.ln() - (col[l] - m);
        for gi in g.iter_mut() {
            *gi = *gi / z * inv_n;
        }
        g[l] -= inv_n;
    }
    (loss * inv_n, grad)
}

/// Mean cross-entropy of column-wise softmax, and its gradient w.r.t. `pred`.
/// `pred` is `[k, n]`; `label` holds `n` class ids in `[0, k-1]`.
pub fn softmax_cross_entropy(pred: &Tensor, label: &Tensor) -> Result<(Tensor, Tensor)> {
    let k = pred.extent(0);
    let n = pred.numel() / k;
    let lab = labels(label, k, n)?;
    with_real!(pred.dtype(), "softmax_cross_entropy", T => {
        let (loss, grad) = softmax_ce_raw::<T>(pred.data()?, &lab, k);
        Ok((Tensor::from_vec(&[1, 1], vec![loss])?, Tensor::from_vec(pred.shape(), grad)?))
    })
}

/// Fraction of columns whose argmax (0-origin) equals the label.
pub fn accuracy(pred: &Tensor, label: &Tensor) -> Result<f64> {
    let k = pred.extent(0);
    let n = pred.numel() / k;
    let lab = labels(label, k, n)?;
    let flat = pred.reshape(&[k, n])?;
    let idx = flat.argmax(Some(1))?.indices.into_vec::<i32>()?;
    let correct = idx.iter().zip(&lab).filter(|(&i, &l)| (i - 1) as usize == l).count();
    Ok(correct as f64 / n as f64)
}

#[derive(Default)]
pub struct SoftmaxCrossEntropy {
    grad: Option<Tensor>,
}

impl Layer for SoftmaxCrossEntropy {
    fn kind(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn forward(&mut self, inputs: &[&Tensor], _ctx: &mut ForwardCtx<'_>) -> Result<Vec<Tensor>> {
        expect_inputs(inputs, 2)?;
        let (loss, grad) = softmax_cross_entropy(inputs[0], inputs[1])?;
        self.grad = Some(grad);
        Ok(vec![loss])
    }

    fn backward(
        &mut self,
        _inputs: &[&Tensor],
        _outputs: &[&Tensor],
        top: &[Option<&Tensor>],
        need: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (Some(g), true) = (top[0], need[0]) else { return Ok(vec![None, None]) };
        let grad = self.grad.as_ref().ok_or(Error::BackwardWithoutForward)?;
        let scaled = if g.numel() == 1 && g.at(&[1])? == 1.0 { grad.clone() } else { grad.times(g)? };
        Ok(vec![Some(scaled), None])
    }

    fn is_loss(&self) -> bool {
        true
    }

    fn release(&mut self) {
        self.grad = None;
    }
}

#[derive(Default)]
pub struct Accuracy;

impl Layer for Accuracy {
    fn kind(&self) -> &'static str {
        "accuracy"
    }

    fn forward(&mut self, inputs: &[&Tensor], _ctx: &mut ForwardCtx<'_>) -> Result<Vec<Tensor>> {
        expect_inputs(inputs, 2)?;
        let acc = accuracy(inputs[0], inputs[1])?;
        Ok(vec![Tensor::scalar(acc, inputs[0].dtype())])
    }

    fn backward(
        &mut self,
        inputs: &[&Tensor],
        _outputs: &[&Tensor],
        _top: &[Option<&Tensor>],
        _need: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![None; inputs.len()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    #[test]
    fn uniform_logits_give_ln_k() {
        let pred = Tensor::new(&[10, 4], DType::F64, 0.3).unwrap();
        let label = Tensor::from_vec(&[1, 4], vec![0i32, 3, 9, 5]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&pred, &label).unwrap();
        assert!((loss.at(&[1]).unwrap() - 10f64.ln()).abs() < 1e-12);
        let g = grad.data::<f64>().unwrap();
        for s in 0..4 {
            let col: f64 = g[s * 10..(s + 1) * 10].iter().sum();
            assert!(col.abs() < 1e-15);
        }
    }

    #[test]
    fn dominant_logit_gives_near_zero_loss() {
        let mut v = vec![0.0f32; 10];
        v[7] = 100.0;
        let pred = Tensor::from_vec(&[10, 1], v).unwrap();
        let label = Tensor::from_vec(&[1, 1], vec![7i32]).unwrap();
        let (loss, _) = softmax_cross_entropy(&pred, &label).unwrap();
        assert!(loss.at(&[1]).unwrap() < 1e-6);
    }

    #[test]
    fn label_out_of_range() {
        let pred = Tensor::zeros(&[3, 1], DType::F32).unwrap();
        let label = Tensor::from_vec(&[1, 1], vec![3i32]).unwrap();
        assert!(matches!(softmax_cross_entropy(&pred, &label), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn accuracy_fractions() {
        // columns argmax: 0, 1, 2, 0
        let pred = Tensor::from_vec(
            &[3, 4],
            vec![1.0f32, 0., 0., 0., 1., 0., 0., 0., 1., 1., 0., 0.],
        )
        .unwrap();
        let all = Tensor::from_vec(&[1, 4], vec![0i32, 1, 2, 0]).unwrap();
        let none = Tensor::from_vec(&[1, 4], vec![1i32, 2, 0, 2]).unwrap();
        let three = Tensor::from_vec(&[1, 4], vec![0i32, 1, 2, 1]).unwrap();
        assert_eq!(accuracy(&pred, &all).unwrap(), 1.0);
        assert_eq!(accuracy(&pred, &none).unwrap(), 0.0);
        assert_eq!(accuracy(&pred, &three).unwrap(), 0.75);
    }
}
