//! Single-process training, evaluation and inference.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Definition, NetOptions, Network};
use crate::layers::data::batch_tensor;
use crate::layers::Phase;
use crate::optim::{GradientBuffer, MomentumSgd, SgdConfig};
use crate::tensor::{DType, Tensor};

/// Sample order for one epoch, reproducible from `(seed, epoch)`.
pub fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 2);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Consecutive batches over shuffled epochs. The last batch of an epoch may
/// be short.
#[derive(Clone, Debug)]
pub struct Batches {
    seed: u64,
    n: usize,
    batch: usize,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Batches {
    pub fn new(seed: u64, n: usize, batch: usize) -> Result<Batches> {
        if n == 0 || batch == 0 {
            return Err(Error::InvalidArgument(format!("batch {batch} over {n} samples")));
        }
        Ok(Batches { seed, n, batch, epoch: 0, order: epoch_permutation(seed, 0, n), pos: 0 })
    }

    pub fn per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch)
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl Iterator for Batches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.n {
            self.epoch += 1;
            self.order = epoch_permutation(self.seed, self.epoch, self.n);
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.n);
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(out)
    }
}

/// Mean-loss gradients of the train-phase net over `indices`, computed in
/// chunks of at most `micro` samples and combined with weights
/// `chunk / total`. Returns the gradients in registry order and the loss.
pub fn compute_gradients(net: &mut Network, indices: &[usize], micro: Option<usize>) -> Result<(Vec<Tensor>, f64)> {
    if indices.is_empty() {
        return Err(Error::Empty);
    }
    let micro = micro.unwrap_or(indices.len()).max(1);
    if micro >= indices.len() {
        net.forward([("batch", batch_tensor(indices)?)], Phase::Train)?;
        net.backward()?;
        let loss = net.loss()?;
        return Ok((net.gradients().into_iter().cloned().collect(), loss));
    }
    let mut buf = GradientBuffer::zeros_like(net.learnable().map(|p| &p.value))?;
    let mut loss = 0.0;
    let total = indices.len() as f64;
    for chunk in indices.chunks(micro) {
        let w = chunk.len() as f64 / total;
        net.forward([("batch", batch_tensor(chunk)?)], Phase::Train)?;
        net.backward()?;
        loss += w * net.loss()?;
        buf.accumulate(net.gradients(), w)?;
    }
    Ok((buf.into_grads(), loss))
}

/// Mean loss and accuracy of the test-phase net over its whole dataset.
pub fn evaluate(net: &mut Network, batch: usize) -> Result<(f64, f64)> {
    let n = net.dataset(Phase::Test)?.len();
    let (mut loss, mut acc) = (0.0, 0.0);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch.max(1)) {
        net.forward([("batch", batch_tensor(chunk)?)], Phase::Test)?;
        let w = chunk.len() as f64 / n as f64;
        loss += w * net.loss()?;
        acc += w * net.blob("accuracy")?.sum_all()?;
    }
    net.release();
    Ok((loss, acc))
}

/// Class index (argmax - 1) of `output` for one sample. A u8 image is scaled
/// to [0, 1] first.
pub fn predict(net: &mut Network, image: &Tensor, output: &str) -> Result<usize> {
    let x = match image.dtype() {
        DType::U8 => image.cast(net.dtype())?.times(&Tensor::scalar(1.0 / 255.0, net.dtype()))?,
        _ => image.cast(net.dtype())?,
    };
    net.forward([("data", x)], Phase::Test)?;
    let pred = net.blob(output)?;
    let k = pred.extent(0);
    let i = pred.reshape(&[k, pred.numel() / k])?.argmax(None)?.indices.at(&[1])?;
    Ok(i as usize - 1)
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub definition: String,
    pub data_root: Option<std::path::PathBuf>,
    pub epochs: usize,
    pub batch: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
    /// Evaluate every this many iterations; 0 evaluates only at the end.
    pub test_every: usize,
    pub test_batch: usize,
    pub micro_batch: Option<usize>,
    /// Multiply the learning rate by `.1` every `.0` iterations.
    pub lr_step: Option<(usize, f64)>,
}

impl TrainConfig {
    pub fn new(definition: impl Into<String>) -> TrainConfig {
        TrainConfig {
            definition: definition.into(),
            data_root: None,
            epochs: 1,
            batch: 64,
            sgd: SgdConfig::default(),
            seed: 0,
            test_every: 0,
            test_batch: 1000,
            micro_batch: None,
            lr_step: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch must be at least 1".into()));
        }
        self.sgd.validate()
    }

    pub fn net_options(&self) -> NetOptions {
        let mut o = NetOptions::default().seed(self.seed);
        o.data_root = self.data_root.clone();
        o
    }

    pub fn lr_at(&self, t: usize) -> f64 {
        match self.lr_step {
            Some((every, gamma)) if every > 0 => self.sgd.lr * gamma.powi((t / every) as i32),
            _ => self.sgd.lr,
        }
    }
}

/// One CSV log line: `t,phase,loss,accuracy,ms`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub t: usize,
    pub phase: Phase,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub ms: f64,
}

impl LogRow {
    pub const HEADER: &'static str = "t,phase,loss,accuracy,ms";

    pub fn csv(&self) -> String {
        let phase = match self.phase {
            Phase::Train => "train",
            Phase::Test => "test",
        };
        let acc = self.accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
        format!("{},{phase},{:.6},{acc},{:.3}", self.t, self.loss, self.ms)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub iterations: usize,
    pub final_loss: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
}

pub struct Trainer {
    pub net: Network,
    pub opt: MomentumSgd,
    cfg: TrainConfig,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        let net = Network::new(Definition::parse(&cfg.definition)?, &cfg.net_options())?;
        Trainer::with_network(net, cfg)
    }

    pub fn with_network(net: Network, cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        Ok(Trainer { net, opt: MomentumSgd::new(cfg.sgd)?, cfg })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// One optimizer step on `indices`; returns the batch loss.
    pub fn step(&mut self, t: usize, indices: &[usize]) -> Result<f64> {
        let (grads, loss) = compute_gradients(&mut self.net, indices, self.cfg.micro_batch)?;
        for (p, g) in self.net.learnable_mut().zip(grads) {
            p.grad = g;
        }
        self.opt.set_lr(self.cfg.lr_at(t))?;
        self.opt.step(self.net.learnable_mut())?;
        Ok(loss)
    }

    pub fn run(&mut self, log: &mut dyn FnMut(&LogRow)) -> Result<TrainReport> {
        let n = self.net.dataset(Phase::Train)?.len();
        let batches = Batches::new(self.cfg.seed, n, self.cfg.batch)?;
        let total = batches.per_epoch() * self.cfg.epochs;
        let mut report = TrainReport::default();
        for (t, idx) in batches.take(total).enumerate() {
            let start = Instant::now();
            let loss = self.step(t, &idx)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            log(&LogRow { t: t + 1, phase: Phase::Train, loss, accuracy: None, ms });
            report.iterations = t + 1;
            report.final_loss = loss;
            if self.cfg.test_every > 0 && (t + 1) % self.cfg.test_every == 0 && t + 1 < total {
                self.test(t + 1, &mut report, log)?;
            }
        }
        self.net.release();
        if total > 0 {
            self.test(total, &mut report, log)?;
        }
        Ok(report)
    }

    fn test(&mut self, t: usize, report: &mut TrainReport, log: &mut dyn FnMut(&LogRow)) -> Result<()> {
        let start = Instant::now();
        let (loss, acc) = evaluate(&mut self.net, self.cfg.test_batch)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        log(&LogRow { t, phase: Phase::Test, loss, accuracy: Some(acc), ms });
        report.test_loss = Some(loss);
        report.test_accuracy = Some(acc);
        Ok(())
    }
}
