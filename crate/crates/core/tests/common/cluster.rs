//! In-process cluster helpers shared by the distributed tests and the
//! acceptance report.

use std::sync::Arc;

use flatnet::distrib::protocol::encode_gradient;
use flatnet::distrib::{quantize_q8, dequantize_q8, run_local, Codec, DataMode, ParameterServer, ServerConfig, Worker};
use flatnet::graph::{fixtures, NetOptions, Network};
use flatnet::layers::{Dataset, Phase};
use flatnet::optim::SgdConfig;
use flatnet::train::{compute_gradients, Batches, TrainConfig, Trainer};
use flatnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEED: u64 = 11;

pub fn lenet(ds: &Arc<Dataset>) -> Network {
    let mut net = Network::from_json(fixtures::LENET, &NetOptions::default().seed(SEED)).unwrap();
    net.attach_dataset(Phase::Train, ds.clone()).unwrap();
    net
}

pub fn sgd() -> SgdConfig {
    SgdConfig { lr: 0.01, momentum: 0.9, weight_decay: 5e-4 }
}

pub fn distributed(ds: &Arc<Dataset>, n: usize, iterations: usize, batch: usize, mode: DataMode) -> Network {
    let cfg = ServerConfig { batch, seed: SEED, iterations, sgd: sgd(), data_mode: mode, ..ServerConfig::default() };
    let server = ParameterServer::new(lenet(ds), cfg).unwrap();
    let workers = (0..n).map(|_| Worker::new(lenet(ds), Codec::Raw, None)).collect();
    let (server, report) = run_local(server, workers).unwrap();
    assert_eq!(report.stats.images as usize, iterations * batch);
    server.into_network()
}

/// The same schedule run by a single-process trainer.
pub fn single(ds: &Arc<Dataset>, iterations: usize, batch: usize) -> Network {
    let mut cfg = TrainConfig::new(fixtures::LENET);
    cfg.batch = batch;
    cfg.sgd = sgd();
    cfg.seed = SEED;
    let mut tr = Trainer::with_network(lenet(ds), cfg).unwrap();
    let mut batches = Batches::new(SEED, ds.len(), batch).unwrap();
    for t in 0..iterations {
        tr.step(t, &batches.next().unwrap()).unwrap();
    }
    tr.net
}

pub fn max_diff(a: &Network, b: &Network) -> f64 {
    a.learnable()
        .zip(b.learnable())
        .flat_map(|(p, q)| {
            let (x, y) = (p.value.to_f64_vec().unwrap(), q.value.to_f64_vec().unwrap());
            x.into_iter().zip(y).map(|(u, v)| (u - v).abs()).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

/// Largest element-wise gap between `N`-worker and single-process LeNet
/// weights for each `N`.
pub fn equivalence(ns: &[usize], iterations: usize, batch: usize) -> Vec<(usize, f64)> {
    let ds = Arc::new(super::synthetic_digits(600, 3));
    let reference = single(&ds, iterations, batch);
    ns.iter().map(|&n| (n, max_diff(&reference, &distributed(&ds, n, iterations, batch, DataMode::Index)))).collect()
}

/// Worst excess of the q8 round-trip error over `max|x|/254 + 1 ulp` on `n`
/// random values; at most 0 when the bound holds.
pub fn q8_bound_excess(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread: f32 = rng.random_range(1e-3..1e3);
    let x: Vec<f32> = (0..n).map(|_| rng.random_range(-spread..spread)).collect();
    let max = x.iter().fold(0f32, |m, v| m.max(v.abs())) as f64;
    let (scale, q) = quantize_q8(&x).unwrap();
    x.iter()
        .zip(dequantize_q8(scale, &q))
        .map(|(&a, b)| {
            let ulp = (f32::EPSILON * a.abs().max(b.abs()).max(f32::MIN_POSITIVE)) as f64;
            (a - b).abs() as f64 - (max / 254.0 + ulp)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Raw and q8 gradient frame sizes for one LeNet split, plus the element
/// and tensor counts.
pub fn lenet_packet_sizes() -> (usize, usize, usize, usize) {
    let ds = Arc::new(super::synthetic_digits(16, 9));
    let mut net = lenet(&ds);
    let (grads, _) = compute_gradients(&mut net, &[0, 1, 2, 3], None).unwrap();
    let refs: Vec<&Tensor> = grads.iter().collect();
    let raw = encode_gradient(0, 1, 4, Codec::Raw, &refs).unwrap().len();
    let q8 = encode_gradient(0, 1, 4, Codec::Q8, &refs).unwrap().len();
    (raw, q8, grads.iter().map(Tensor::numel).sum(), grads.len())
}
