//! Oracle checks shared by the integration tests and the acceptance report.

use std::collections::BTreeMap;

use flatnet::graph::{fixtures, NetOptions, Network};
use flatnet::layers::conv::conv_forward;
use flatnet::layers::im2col::{col2im, im2col, Window};
use flatnet::layers::{ConvConfig, Phase};
use flatnet::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::grad::{conv_direct, fd, normal, t, v};
use super::rel_err;

/// Worst relative error of im2col + GEMM (f32) against the direct f64 loop.
pub fn conv_vs_direct(instances: u64) -> f64 {
    (0..instances)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let ksize = rng.random_range(1..=4);
            let cfg = ConvConfig {
                out_size: rng.random_range(1..=6),
                in_size: rng.random_range(1..=4),
                ksize,
                stride: rng.random_range(1..=3),
                pad: rng.random_range(0..ksize),
            };
            let dims = [rng.random_range(ksize..=9), rng.random_range(ksize..=9), cfg.in_size, rng.random_range(1..=3)];
            let x = normal(&mut rng, dims.iter().product());
            let w = normal(&mut rng, cfg.patch_len() * cfg.out_size);
            let b = normal(&mut rng, cfg.out_size);
            let f32s = |a: &[f64], s: &[usize]| Tensor::from_vec(s, a.iter().map(|&e| e as f32).collect()).unwrap();
            let y = conv_forward(&f32s(&x, &dims), &f32s(&w, &[cfg.patch_len(), cfg.out_size]), &f32s(&b, &[cfg.out_size, 1]), &cfg)
                .unwrap();
            // the oracle sees the same f32-rounded operands
            let round = |a: &[f64]| a.iter().map(|&e| e as f32 as f64).collect::<Vec<_>>();
            let (want, shape) = conv_direct(&round(&x), dims, &round(&w), &round(&b), &cfg);
            assert_eq!(y.shape(), shape);
            rel_err(&v(&y), &want)
        })
        .fold(0.0, f64::max)
}

/// Worst relative gap in `<im2col(x), C> = <x, col2im(C)>`.
pub fn im2col_adjoint(instances: u64) -> f64 {
    (0..instances)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
            let ksize = rng.random_range(1..=4);
            let win = Window { ksize, stride: rng.random_range(1..=3), pad: rng.random_range(0..ksize) };
            let dims = [rng.random_range(ksize..=8), rng.random_range(ksize..=8), rng.random_range(1..=3), rng.random_range(1..=2)];
            let x = normal(&mut rng, dims.iter().product());
            let col = im2col(&t(&dims, x.clone()), win).unwrap();
            let c = normal(&mut rng, col.numel());
            let back = col2im(&t(col.shape(), c.clone()), dims, win).unwrap();
            let lhs: f64 = v(&col).iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(v(&back)).map(|(a, b)| a * b).sum();
            (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(f64::MIN_POSITIVE)
        })
        .fold(0.0, f64::max)
}

/// Lower a batch of 16 224x224 RGB images for a 3x3/pad-1 convolution and
/// multiply by a `(27, 64)` weight. Returns the operand and product shapes.
pub fn large_lowering() -> (Vec<usize>, Vec<usize>) {
    let x = Tensor::zeros(&[224, 224, 3, 16], DType::F32).unwrap();
    let col = im2col(&x, Window { ksize: 3, stride: 1, pad: 1 }).unwrap();
    let w = Tensor::ones(&[27, 64], DType::F32).unwrap();
    let y = col.mtimes(&w).unwrap();
    (col.shape().to_vec(), y.shape().to_vec())
}

/// A small f64 net with a residual branch, batch norm, pooling and a loss.
pub const MICRO_NET: &str = r#"[
  {"type": "convolution_2d", "name": "c1", "inputs": ["data"], "outputs": ["c1"], "params": {"out_size": 3, "in_size": 2, "ksize": 3, "pad": 1}},
  {"type": "relu", "name": "r1", "inputs": ["c1"], "outputs": ["r1"]},
  {"type": "convolution_2d", "name": "c2", "inputs": ["r1"], "outputs": ["c2"], "params": {"out_size": 3, "in_size": 3, "ksize": 3, "pad": 1}},
  {"type": "eltwise_add", "name": "add", "inputs": ["c2", "r1"], "outputs": ["sum"]},
  {"type": "batch_normalization", "name": "bn", "inputs": ["sum"], "outputs": ["bn"], "params": {"in_size": 3}},
  {"type": "pooling_2d", "name": "pool", "inputs": ["bn"], "outputs": ["pool"], "params": {"type": "max", "ksize": 2, "stride": 2}},
  {"type": "linear", "name": "fc", "inputs": ["pool"], "outputs": ["pred"], "params": {"out_size": 4, "in_shape": [3, 3, 3]}},
  {"type": "softmax_cross_entropy", "name": "loss", "inputs": ["pred", "label"], "outputs": ["loss"]}
]"#;

fn micro_feeds(seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 3;
    let data = t(&[6, 6, 2, n], normal(&mut rng, 72 * n));
    let label = Tensor::from_vec(&[1, n], (0..n).map(|_| rng.random_range(0..4)).collect::<Vec<i32>>()).unwrap();
    (data, label)
}

fn micro_loss(net: &mut Network, feeds: &(Tensor, Tensor)) -> f64 {
    net.forward([("data", feeds.0.clone()), ("label", feeds.1.clone())], Phase::Train).unwrap();
    net.loss().unwrap()
}

/// Worst relative error of backprop parameter gradients against finite
/// differences of the whole network loss.
pub fn graph_fd(seed: u64) -> f64 {
    let mut net = Network::from_json(MICRO_NET, &NetOptions::default().seed(seed).dtype(DType::F64)).unwrap();
    let feeds = micro_feeds(seed);
    micro_loss(&mut net, &feeds);
    net.backward().unwrap();
    let analytic: Vec<Vec<f64>> = net.learnable().map(|p| v(&p.grad)).collect();
    let mut worst = 0.0f64;
    for (k, g) in analytic.iter().enumerate() {
        let base = v(&net.learnable().nth(k).unwrap().value);
        let shape = net.learnable().nth(k).unwrap().value.shape().to_vec();
        let numeric = fd(&base, |p| {
            net.learnable_mut().nth(k).unwrap().value = t(&shape, p.to_vec());
            micro_loss(&mut net, &feeds)
        });
        net.learnable_mut().nth(k).unwrap().value = t(&shape, base);
        // a bias feeding batch norm has an identically zero gradient, where
        // differences only pick up roundoff
        let norm = |a: &[f64]| a.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm(g) < 1e-12 && norm(&numeric) < 1e-7 {
            continue;
        }
        worst = worst.max(rel_err(&numeric, g));
    }
    worst
}

/// For every blob read by more than one layer, the gradient stored for it
/// must equal the sum of the per-consumer contributions. Returns the number
/// of such blobs and the worst relative error.
pub fn fan_out_rule(net: &Network) -> (usize, f64) {
    let mut consumers: BTreeMap<String, usize> = BTreeMap::new();
    for l in net.definition().layers().iter().filter(|l| l.active_in(Phase::Train)) {
        for i in &l.inputs {
            *consumers.entry(i.clone()).or_default() += 1;
        }
    }
    let mut checked = 0;
    let mut worst = 0.0f64;
    for (blob, n) in consumers.into_iter().filter(|(_, n)| *n > 1) {
        let parts = net.gradient_contributions(&blob);
        if parts.is_empty() {
            continue;
        }
        assert_eq!(parts.len(), n, "{blob}");
        let mut sum = vec![0.0; parts[0].1.numel()];
        for (_, g) in parts {
            for (s, x) in sum.iter_mut().zip(v(g)) {
                *s += x;
            }
        }
        let stored = v(net.blob_grad(&blob).unwrap());
        worst = worst.max(rel_err(&stored, &sum));
        checked += 1;
    }
    (checked, worst)
}

/// One forward+backward of a shipped fixture at batch 1 on a 32x32x3 input.
pub fn large_net_step(definition: &str, trace: bool) -> flatnet::Result<Network> {
    let mut net = Network::from_json(definition, &NetOptions::default().seed(1))?;
    net.trace_gradients(trace);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<f32> = (0..32 * 32 * 3).map(|_| rng.random::<f32>()).collect();
    let data = Tensor::from_vec(&[32, 32, 3, 1], x)?;
    let label = Tensor::from_vec(&[1, 1], vec![3i32])?;
    net.forward([("data", data), ("label", label)], Phase::Train)?;
    net.backward()?;
    for p in net.learnable() {
        if p.grad.shape() != p.value.shape() {
            return Err(flatnet::Error::ShapeMismatch(format!("gradient {:?} for parameter {:?}", p.grad.shape(), p.value.shape())));
        }
    }
    Ok(net)
}

pub fn vgg16() -> &'static str {
    fixtures::VGG16
}

pub fn resnet152() -> &'static str {
    fixtures::RESNET152
}
