//! Benchmark harnesses: the four dense-matrix tasks and distributed
//! throughput against the number of workers.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distrib::{run_local, Codec, ParameterServer, ServerConfig, Worker};
use crate::error::{Error, Result};
use crate::graph::{NetOptions, Network};
use crate::layers::{Dataset, Phase};
use crate::optim::SgdConfig;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TaskReport {
    pub task: &'static str,
    pub description: &'static str,
    /// Median wall time over the repetitions.
    pub ms: f64,
    pub shape: Vec<usize>,
    /// Worst relative deviation from the oracle over the checked entries.
    pub max_rel_err: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(0.1f32..1.0)).collect())
}

fn median_ms(reps: usize, mut f: impl FnMut() -> Result<Tensor>) -> Result<(f64, Tensor)> {
    let mut times = Vec::with_capacity(reps);
    let mut out = None;
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        let y = f()?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        out = Some(y);
    }
    times.sort_by(f64::total_cmp);
    Ok((times[times.len() / 2], out.expect("at least one repetition")))
}

fn rel(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
}

/// Entry `(i, j)` of a column-major `[m, k] x [k, n]` product in f64.
fn dot_entry(a: &[f32], b: &[f32], m: usize, k: usize, i: usize, j: usize) -> f64 {
    (0..k).map(|p| a[i + m * p] as f64 * b[p + k * j] as f64).sum()
}

/// Run the four tasks `reps` times each and check every result against an
/// independent oracle. Timings are reported, never judged.
pub fn bench_matrix(reps: usize, seed: u64) -> Result<Vec<TaskReport>> {
    const TOL: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let spots = |rng: &mut ChaCha8Rng, n: usize| -> Vec<usize> { (0..1000).map(|_| rng.random_range(0..n)).collect() };

    let (a, b) = (uniform(&mut rng, &[1000, 1000])?, uniform(&mut rng, &[1000, 1000])?);
    let (ms, y) = median_ms(reps, || a.plus(&b))?;
    let (av, bv, yv) = (a.data::<f32>()?, b.data::<f32>()?, y.data::<f32>()?);
    let err = spots(&mut rng, yv.len()).into_iter().map(|i| rel(yv[i] as f64, av[i] as f64 + bv[i] as f64)).fold(0.0, f64::max);
    out.push(TaskReport { task: "task1", description: "1000x1000 elementwise add", ms, shape: y.shape().to_vec(), max_rel_err: err });

    let (ms, y) = median_ms(reps, || a.log())?;
    let yv = y.data::<f32>()?;
    let err = spots(&mut rng, yv.len()).into_iter().map(|i| rel(yv[i] as f64, (av[i] as f64).ln())).fold(0.0, f64::max);
    out.push(TaskReport { task: "task2", description: "1000x1000 elementwise log", ms, shape: y.shape().to_vec(), max_rel_err: err });

    let (c, d) = (uniform(&mut rng, &[1000, 100])?, uniform(&mut rng, &[100, 10])?);
    let (ms, y) = median_ms(reps, || c.mtimes(&d))?;
    let (cv, dv, yv) = (c.data::<f32>()?, d.data::<f32>()?, y.data::<f32>()?);
    let mut err = 0.0f64;
    for j in 0..10 {
        for i in 0..1000 {
            err = err.max(rel(yv[i + 1000 * j] as f64, dot_entry(cv, dv, 1000, 100, i, j)));
        }
    }
    out.push(TaskReport { task: "task3", description: "(1000x100) x (100x10) product", ms, shape: y.shape().to_vec(), max_rel_err: err });

    let (ms, y) = median_ms(reps, || a.mtimes(&b))?;
    let yv = y.data::<f32>()?;
    let (i0, j0) = (rng.random_range(0..1000 - 64), rng.random_range(0..1000 - 64));
    let mut err = 0.0f64;
    for j in j0..j0 + 64 {
        for i in i0..i0 + 64 {
            err = err.max(rel(yv[i + 1000 * j] as f64, dot_entry(av, bv, 1000, 1000, i, j)));
        }
    }
    out.push(TaskReport { task: "task4", description: "(1000x1000) x (1000x1000) product", ms, shape: y.shape().to_vec(), max_rel_err: err });

    let expected: [&[usize]; 4] = [&[1000, 1000], &[1000, 1000], &[1000, 10], &[1000, 1000]];
    for (r, want) in out.iter().zip(expected) {
        if r.shape != want {
            return Err(Error::Oracle(format!("{} produced shape {:?}, expected {want:?}", r.task, r.shape)));
        }
        if r.max_rel_err > TOL {
            return Err(Error::Oracle(format!("{} deviates from the oracle by {:e}", r.task, r.max_rel_err)));
        }
    }
    Ok(out)
}

/// Convolution-heavy net with few parameters, so each round is dominated
/// by worker compute rather than payload transfer.
pub const SYNTHETIC_NET: &str = r#"[
  {"type": "blob_data", "name": "d", "inputs": ["batch"], "outputs": ["data", "label"], "params": {"data_shape": [16, 16, 8], "file_prefix": "synthetic"}},
  {"type": "convolution_2d", "name": "conv1", "inputs": ["data"], "outputs": ["conv1"], "params": {"out_size": 32, "in_size": 8, "ksize": 3, "pad": 1}},
  {"type": "relu", "name": "relu1", "inputs": ["conv1"], "outputs": ["relu1"]},
  {"type": "convolution_2d", "name": "conv2", "inputs": ["relu1"], "outputs": ["conv2"], "params": {"out_size": 32, "in_size": 32, "ksize": 3, "pad": 1}},
  {"type": "relu", "name": "relu2", "inputs": ["conv2"], "outputs": ["relu2"]},
  {"type": "pooling_2d", "name": "pool", "inputs": ["relu2"], "outputs": ["pool"], "params": {"type": "avg", "ksize": 16, "stride": 16}},
  {"type": "linear", "name": "fc", "inputs": ["pool"], "outputs": ["pred"], "params": {"out_size": 10, "in_shape": [1, 1, 32]}},
  {"type": "softmax_cross_entropy", "name": "loss", "inputs": ["pred", "label"], "outputs": ["loss"]}
]"#;

#[derive(Clone, Debug)]
pub struct SpeedupConfig {
    pub workers: Vec<usize>,
    pub codecs: Vec<Codec>,
    pub iterations: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for SpeedupConfig {
    fn default() -> SpeedupConfig {
        SpeedupConfig { workers: vec![1, 2, 4, 8], codecs: vec![Codec::Raw, Codec::Q8], iterations: 6, batch: 64, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeedupRow {
    pub workers: usize,
    pub images_per_sec: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub codec: Codec,
}

impl SpeedupRow {
    pub const HEADER: &'static str = "workers,images_per_sec,bytes_up,bytes_down,codec";

    pub fn csv(&self) -> String {
        format!("{},{:.3},{},{},{}", self.workers, self.images_per_sec, self.bytes_up, self.bytes_down, self.codec)
    }
}

/// Throughput relative to the single-worker row with the same codec.
pub fn speedup(rows: &[SpeedupRow], row: &SpeedupRow) -> Option<f64> {
    let base = rows.iter().find(|r| r.workers == 1 && r.codec == row.codec)?;
    Some(row.images_per_sec / base.images_per_sec)
}

pub fn synthetic_dataset(n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<u8> = (0..16 * 16 * 8 * n).map(|_| rng.random()).collect();
    let label: Vec<i32> = (0..n).map(|_| rng.random_range(0..10)).collect();
    Dataset::new(Tensor::from_vec(&[16, 16, 8, n], data)?, Tensor::from_vec(&[1, n], label)?)
}

fn synthetic_net(ds: &Arc<Dataset>, seed: u64) -> Result<Network> {
    let mut net = Network::from_json(SYNTHETIC_NET, &NetOptions::default().seed(seed))?;
    net.attach_dataset(Phase::Train, ds.clone())?;
    Ok(net)
}

/// Images per second for each worker count and codec, over in-process
/// workers. Each measurement includes server aggregation and the optimizer.
pub fn speedup_benchmark(cfg: &SpeedupConfig) -> Result<Vec<SpeedupRow>> {
    if cfg.workers.iter().any(|&n| n == 0) {
        return Err(Error::InvalidArgument("worker counts must be positive".into()));
    }
    let ds = Arc::new(synthetic_dataset(cfg.batch * cfg.iterations.max(1), cfg.seed)?);
    let mut rows = Vec::new();
    for &codec in &cfg.codecs {
        for &n in &cfg.workers {
            let server_cfg = ServerConfig {
                batch: cfg.batch,
                seed: cfg.seed,
                iterations: cfg.iterations,
                sgd: SgdConfig { lr: 0.01, momentum: 0.9, weight_decay: 0.0 },
                weight_codec: codec,
                grad_codec: codec,
                ..ServerConfig::default()
            };
            let server = ParameterServer::new(synthetic_net(&ds, cfg.seed)?, server_cfg)?;
            let workers = (0..n).map(|_| Ok(Worker::new(synthetic_net(&ds, cfg.seed)?, codec, None))).collect::<Result<Vec<_>>>()?;
            let (_, report) = run_local(server, workers)?;
            rows.push(SpeedupRow {
                workers: n,
                images_per_sec: report.images_per_sec(),
                bytes_up: report.stats.bytes_up,
                bytes_down: report.stats.bytes_down,
                codec,
            });
        }
    }
    Ok(rows)
}
