use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{DType, Tensor};

/// Zero-mean Gaussian weights with variance `2 / fan_in`.
pub fn he_normal<R: Rng>(shape: &[usize], fan_in: usize, dtype: DType, rng: &mut R) -> Result<Tensor> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::from_vec(shape, values)?.cast(dtype)
}
