//! Central finite-difference checks for every layer's backward pass, in f64.

use flatnet::layers::batchnorm::{batch_norm_backward, batch_norm_train};
use flatnet::layers::conv::{conv_backward, conv_forward};
use flatnet::layers::dropout::{apply_mask, dropout_backward};
use flatnet::layers::eltwise::eltwise_add;
use flatnet::layers::linear::{linear_backward, linear_forward};
use flatnet::layers::loss::softmax_cross_entropy;
use flatnet::layers::pool::{pooling_backward, pooling_forward};
use flatnet::layers::activation::{relu_backward, relu_forward};
use flatnet::layers::{ConvConfig, PoolConfig, PoolKind};
use flatnet::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::rel_err;

pub const LAYERS: [&str; 9] =
    ["convolution_2d", "pooling_max", "pooling_avg", "relu", "linear", "softmax_cross_entropy", "dropout", "batch_normalization", "eltwise_add"];

const H: f64 = 1e-6;

pub fn normal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn t(shape: &[usize], v: Vec<f64>) -> Tensor {
    Tensor::from_vec(shape, v).unwrap()
}

pub fn v(t: &Tensor) -> Vec<f64> {
    t.to_f64_vec().unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central differences of `f` around `x`.
pub fn fd(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + H;
            let up = f(&p);
            p[i] = x[i] - H;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * H)
        })
        .collect()
}

/// Worst norm-wise relative error over the layer's gradient outputs for one
/// random instance.
pub fn check(layer: &str, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match layer {
        "convolution_2d" => conv(&mut rng),
        "pooling_max" => pool(&mut rng, PoolKind::Max),
        "pooling_avg" => pool(&mut rng, PoolKind::Avg),
        "relu" => relu(&mut rng),
        "linear" => linear(&mut rng),
        "softmax_cross_entropy" => softmax(&mut rng),
        "dropout" => dropout(&mut rng),
        "batch_normalization" => batchnorm(&mut rng),
        "eltwise_add" => eltwise(&mut rng),
        other => panic!("no check for {other}"),
    }
}

fn conv(rng: &mut ChaCha8Rng) -> f64 {
    let ksize = rng.random_range(1..=3);
    let pad = rng.random_range(0..ksize);
    let cfg = ConvConfig {
        out_size: rng.random_range(1..=3),
        in_size: rng.random_range(1..=3),
        ksize,
        stride: rng.random_range(1..=2),
        pad,
    };
    let dims = [rng.random_range(ksize..=6), rng.random_range(ksize..=6), cfg.in_size, rng.random_range(1..=2)];
    let x = normal(rng, dims.iter().product());
    let w = normal(rng, cfg.patch_len() * cfg.out_size);
    let b = normal(rng, cfg.out_size);
    let wshape = [cfg.patch_len(), cfg.out_size];
    let bshape = [cfg.out_size, 1];
    let fwd = |x: &[f64], w: &[f64], b: &[f64]| v(&conv_forward(&t(&dims, x.to_vec()), &t(&wshape, w.to_vec()), &t(&bshape, b.to_vec()), &cfg).unwrap());
    let (xt, wt) = (t(&dims, x.clone()), t(&wshape, w.clone()));
    let y = conv_forward(&xt, &wt, &t(&bshape, b.clone()), &cfg).unwrap();
    let r = normal(rng, y.numel());
    let (dx, dw, db) = conv_backward(&xt, &wt, &cfg, &t(y.shape(), r.clone())).unwrap();
    let ex = rel_err(&fd(&x, |x| dot(&fwd(x, &w, &b), &r)), &v(&dx));
    let ew = rel_err(&fd(&w, |w| dot(&fwd(&x, w, &b), &r)), &v(&dw));
    let eb = rel_err(&fd(&b, |b| dot(&fwd(&x, &w, b), &r)), &v(&db));
    ex.max(ew).max(eb)
}

fn pool(rng: &mut ChaCha8Rng, kind: PoolKind) -> f64 {
    let ksize = rng.random_range(1..=3);
    let cfg = PoolConfig { kind, ksize, stride: rng.random_range(1..=2), pad: rng.random_range(0..ksize) };
    let dims = [rng.random_range(ksize..=6), rng.random_range(ksize..=6), rng.random_range(1..=2), rng.random_range(1..=2)];
    let n: usize = dims.iter().product();
    // distinct values spaced well beyond the FD step keep max pooling smooth
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let x: Vec<f64> = order.iter().map(|&k| k as f64 * 0.01 + rng.random_range(0.0..0.001)).collect();
    let fwd = |x: &[f64]| pooling_forward(&t(&dims, x.to_vec()), &cfg).unwrap();
    let (y, sw) = fwd(&x);
    let r = normal(rng, y.numel());
    let dx = pooling_backward(&sw, &t(y.shape(), r.clone())).unwrap();
    rel_err(&fd(&x, |x| dot(&v(&fwd(x).0), &r)), &v(&dx))
}

fn relu(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.random_range(1..=40);
    // keep clear of the kink
    let x: Vec<f64> = normal(rng, n).into_iter().map(|a| if a.abs() < 1e-3 { a + 0.01 } else { a }).collect();
    let r = normal(rng, n);
    let dx = relu_backward(&t(&[n], x.clone()), &t(&[n], r.clone())).unwrap();
    rel_err(&fd(&x, |x| dot(&v(&relu_forward(&t(&[n], x.to_vec())).unwrap()), &r)), &v(&dx))
}

fn linear(rng: &mut ChaCha8Rng) -> f64 {
    let in_shape = vec![rng.random_range(1..=4), rng.random_range(1..=3)];
    let f: usize = in_shape.iter().product();
    let (out, n) = (rng.random_range(1..=5), rng.random_range(1..=3));
    let xs = [in_shape[0], in_shape[1], n];
    let (x, w, b) = (normal(rng, f * n), normal(rng, f * out), normal(rng, out));
    let r = normal(rng, out * n);
    let fwd = |x: &[f64], w: &[f64], b: &[f64]| {
        v(&linear_forward(&t(&xs, x.to_vec()), &t(&[f, out], w.to_vec()), &t(&[out, 1], b.to_vec()), &in_shape).unwrap())
    };
    let (dx, dw, db) = linear_backward(&t(&xs, x.clone()), &t(&[f, out], w.clone()), &t(&[out, n], r.clone()), &in_shape).unwrap();
    let ex = rel_err(&fd(&x, |x| dot(&fwd(x, &w, &b), &r)), &v(&dx));
    let ew = rel_err(&fd(&w, |w| dot(&fwd(&x, w, &b), &r)), &v(&dw));
    let eb = rel_err(&fd(&b, |b| dot(&fwd(&x, &w, b), &r)), &v(&db));
    ex.max(ew).max(eb)
}

fn softmax(rng: &mut ChaCha8Rng) -> f64 {
    let (k, n) = (rng.random_range(2..=10), rng.random_range(1..=5));
    let x = normal(rng, k * n);
    let label = Tensor::from_vec(&[1, n], (0..n).map(|_| rng.random_range(0..k as i32)).collect()).unwrap();
    let (_, dx) = softmax_cross_entropy(&t(&[k, n], x.clone()), &label).unwrap();
    rel_err(&fd(&x, |x| softmax_cross_entropy(&t(&[k, n], x.to_vec()), &label).unwrap().0.sum_all().unwrap()), &v(&dx))
}

fn dropout(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.random_range(1..=40);
    let ratio = rng.random_range(0.0..0.9);
    let mask: Vec<bool> = (0..n).map(|_| rng.random::<f64>() >= ratio).collect();
    let x = normal(rng, n);
    let r = normal(rng, n);
    let dx = dropout_backward(&t(&[n], r.clone()), &mask, ratio).unwrap();
    rel_err(&fd(&x, |x| dot(&v(&apply_mask(&t(&[n], x.to_vec()), &mask, ratio).unwrap()), &r)), &v(&dx))
}

fn batchnorm(rng: &mut ChaCha8Rng) -> f64 {
    let c = rng.random_range(1..=3);
    let dims: Vec<usize> = if rng.random() { vec![c, rng.random_range(4..=8)] } else { vec![rng.random_range(1..=3), 2, c, rng.random_range(2..=3)] };
    let n: usize = dims.iter().product();
    let eps = 1e-5;
    let x: Vec<f64> = normal(rng, n).into_iter().map(|a| 2.0 * a + 0.5).collect();
    let (g, b) = (normal(rng, c), normal(rng, c));
    let r = normal(rng, n);
    let fwd = |x: &[f64], g: &[f64], b: &[f64]| v(&batch_norm_train(&t(&dims, x.to_vec()), &t(&[c, 1], g.to_vec()), &t(&[c, 1], b.to_vec()), eps).unwrap().0);
    let (dx, dg, db) = batch_norm_backward(&t(&dims, x.clone()), &t(&[c, 1], g.clone()), eps, &t(&dims, r.clone())).unwrap();
    let ex = rel_err(&fd(&x, |x| dot(&fwd(x, &g, &b), &r)), &v(&dx));
    let eg = rel_err(&fd(&g, |g| dot(&fwd(&x, g, &b), &r)), &v(&dg));
    let eb = rel_err(&fd(&b, |b| dot(&fwd(&x, &g, b), &r)), &v(&db));
    ex.max(eg).max(eb)
}

fn eltwise(rng: &mut ChaCha8Rng) -> f64 {
    let k = rng.random_range(2..=4);
    let n = rng.random_range(1..=20);
    let xs: Vec<Vec<f64>> = (0..k).map(|_| normal(rng, n)).collect();
    let r = normal(rng, n);
    let sum = |xs: &[Vec<f64>]| {
        let ts: Vec<Tensor> = xs.iter().map(|x| t(&[n], x.clone())).collect();
        let refs: Vec<&Tensor> = ts.iter().collect();
        dot(&v(&eltwise_add(&refs).unwrap()), &r)
    };
    // the layer passes dY to every input unchanged
    (0..k)
        .map(|i| {
            let g = fd(&xs[i], |xi| {
                let mut all = xs.clone();
                all[i] = xi.to_vec();
                sum(&all)
            });
            rel_err(&g, &r)
        })
        .fold(0.0, f64::max)
}

/// Direct sliding-window convolution, the oracle for im2col + GEMM.
pub fn conv_direct(x: &[f64], dims: [usize; 4], w: &[f64], b: &[f64], cfg: &ConvConfig) -> (Vec<f64>, [usize; 4]) {
    let [h, wd, c, n] = dims;
    let (k, s, p) = (cfg.ksize, cfg.stride, cfg.pad as isize);
    let oh = (h + 2 * cfg.pad - k) / s + 1;
    let ow = (wd + 2 * cfg.pad - k) / s + 1;
    let o = cfg.out_size;
    let mut y = vec![0.0; oh * ow * o * n];
    for sn in 0..n {
        for oc in 0..o {
            for ox in 0..ow {
                for oy in 0..oh {
                    let mut acc = b[oc];
                    for ch in 0..c {
                        for kx in 0..k {
                            for ky in 0..k {
                                let iy = (oy * s + ky) as isize - p;
                                let ix = (ox * s + kx) as isize - p;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = iy as usize + h * (ix as usize + wd * (ch + c * sn));
                                let q = ky + k * (kx + k * ch);
                                acc += x[xi] * w[q + k * k * c * oc];
                            }
                        }
                    }
                    y[oy + oh * (ox + ow * (oc + o * sn))] = acc;
                }
            }
        }
    }
    (y, [oh, ow, o, n])
}
