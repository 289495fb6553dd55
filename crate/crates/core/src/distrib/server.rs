//! Transport-independent parameter server: round bookkeeping, split
//! assignment, gradient aggregation and the optimizer step.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::ops::Range;
use std::sync::Arc;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use super::codec::Codec;
use super::protocol::{encode_weights, Frame, GradientPacket, RoundFrame, Split};
use crate::error::{Error, Result};
use crate::graph::Network;
use crate::layers::{Dataset, Phase};
use crate::optim::{MomentumSgd, SgdConfig};
use crate::tensor::{npy, Tensor};
use crate::train::Batches;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataMode {
    /// Workers read samples from their own copy of the dataset.
    Index,
    /// Sample bytes travel inside the ROUND frame.
    Inline,
}

impl std::str::FromStr for DataMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<DataMode> {
        match s {
            "index" => Ok(DataMode::Index),
            "inline" => Ok(DataMode::Inline),
            o => Err(Error::InvalidArgument(format!("unknown data mode `{o}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub batch: usize,
    pub seed: u64,
    pub iterations: usize,
    pub sgd: SgdConfig,
    pub lr_step: Option<(usize, f64)>,
    pub weight_codec: Codec,
    /// Codec workers are asked to use for gradients.
    pub grad_codec: Codec,
    pub data_mode: DataMode,
    /// A split not answered within this long is handed to another worker.
    pub timeout: Duration,
}

impl Default for ServerConfig {
    fn default() -> ServerConfig {
        ServerConfig {
            batch: 120,
            seed: 0,
            iterations: 1,
            sgd: SgdConfig::default(),
            lr_step: None,
            weight_codec: Codec::Raw,
            grad_codec: Codec::Raw,
            data_mode: DataMode::Index,
            timeout: Duration::from_secs(60),
        }
    }
}

/// Near-equal contiguous partition of `0..len` into `n` parts; the first
/// `len % n` parts get one extra element.
pub fn split_ranges(len: usize, n: usize) -> Vec<Range<usize>> {
    let n = n.max(1);
    let (base, extra) = (len / n, len % n);
    let mut start = 0;
    (0..n)
        .map(|k| {
            let end = start + base + usize::from(k < extra);
            let r = start..end;
            start = end;
            r
        })
        .collect()
}

#[derive(Debug)]
pub struct Outgoing {
    pub worker_id: u32,
    pub frame: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Receipt {
    /// Wrong round or no outstanding split for this worker; nothing changed.
    Stale,
    Accepted,
    /// Last packet of the round: weights have been updated.
    Complete,
}

#[derive(Clone, Debug, Default)]
pub struct ServerStats {
    pub bytes_down: u64,
    pub bytes_up: u64,
    pub stale_packets: u64,
    pub reassignments: u64,
    pub images: u64,
}

struct Assignment {
    range: Range<usize>,
    worker: Option<u32>,
    sent: Instant,
    result: Option<GradientPacket>,
}

struct Round {
    t: u32,
    indices: Vec<usize>,
    weights: Arc<Vec<u8>>,
    splits: Vec<Assignment>,
}

pub struct ParameterServer {
    cfg: ServerConfig,
    net: Network,
    opt: MomentumSgd,
    dataset: Arc<Dataset>,
    batches: Batches,
    workers: BTreeSet<u32>,
    /// Split ids each worker still owes for the current round, oldest first.
    pending: BTreeMap<u32, VecDeque<usize>>,
    overdue: BTreeSet<u32>,
    round: Option<Round>,
    t: u32,
    next_id: u32,
    stats: ServerStats,
}

impl ParameterServer {
    /// `net` holds the canonical weights; its train-phase dataset defines
    /// the sample pool.
    pub fn new(mut net: Network, cfg: ServerConfig) -> Result<ParameterServer> {
        if cfg.batch == 0 {
            return Err(Error::InvalidArgument("batch must be at least 1".into()));
        }
        let dataset = net.dataset(Phase::Train)?;
        let batches = Batches::new(cfg.seed, dataset.len(), cfg.batch)?;
        Ok(ParameterServer {
            opt: MomentumSgd::new(cfg.sgd)?,
            cfg,
            net,
            dataset,
            batches,
            workers: BTreeSet::new(),
            pending: BTreeMap::new(),
            overdue: BTreeSet::new(),
            round: None,
            t: 0,
            next_id: 1,
            stats: ServerStats::default(),
        })
    }

    pub fn config(&self) -> &ServerConfig {
        &self.cfg
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn stats(&self) -> &ServerStats {
        &self.stats
    }

    /// Completed rounds.
    pub fn t(&self) -> u32 {
        self.t
    }

    pub fn finished(&self) -> bool {
        self.t as usize >= self.cfg.iterations
    }

    pub fn in_round(&self) -> bool {
        self.round.is_some()
    }

    pub fn workers(&self) -> impl Iterator<Item = u32> + '_ {
        self.workers.iter().copied()
    }

    /// Register a worker. `requested` 0 assigns a fresh id. Splits orphaned
    /// by earlier disconnects are handed to the newcomer.
    pub fn connect(&mut self, requested: u32) -> Result<(u32, Vec<Outgoing>)> {
        let id = if requested == 0 {
            while self.workers.contains(&self.next_id) {
                self.next_id += 1;
            }
            self.next_id
        } else if self.workers.contains(&requested) {
            return Err(Error::Handshake(format!("worker id {requested} already connected")));
        } else {
            requested
        };
        self.workers.insert(id);
        self.pending.entry(id).or_default();
        info!("worker {id} connected ({} total)", self.workers.len());
        let orphans: Vec<usize> = match &self.round {
            Some(r) => (0..r.splits.len()).filter(|&k| r.splits[k].result.is_none() && r.splits[k].worker.is_none()).collect(),
            None => Vec::new(),
        };
        let mut out = Vec::new();
        for k in orphans {
            out.push(self.assign(k, id)?);
        }
        Ok((id, out))
    }

    /// Drop a worker and hand its outstanding splits to others.
    pub fn disconnect(&mut self, id: u32) -> Result<Vec<Outgoing>> {
        if !self.workers.remove(&id) {
            return Ok(Vec::new());
        }
        self.overdue.remove(&id);
        let owed: Vec<usize> = self.pending.remove(&id).map(Vec::from).unwrap_or_default();
        warn!("worker {id} disconnected with {} outstanding splits", owed.len());
        self.reassign(owed)
    }

    /// Start round `t`: draw the next batch, split it over the connected
    /// workers and build one ROUND frame per non-empty split.
    pub fn begin_round(&mut self) -> Result<Vec<Outgoing>> {
        if self.round.is_some() {
            return Err(Error::Protocol("round already in progress".into()));
        }
        if self.finished() {
            return Err(Error::Protocol("training already finished".into()));
        }
        if self.workers.is_empty() {
            return Err(Error::Protocol("no connected workers".into()));
        }
        let indices = self.batches.next().expect("batches never end");
        let weights = Arc::new(encode_weights(&self.net, self.cfg.weight_codec)?);
        let now = Instant::now();
        let splits: Vec<Assignment> = split_ranges(indices.len(), self.workers.len())
            .into_iter()
            .filter(|r| !r.is_empty())
            .map(|range| Assignment { range, worker: None, sent: now, result: None })
            .collect();
        debug_assert!(covers(&splits, indices.len()));
        let order: Vec<u32> = self.workers.iter().copied().collect();
        self.overdue.clear();
        for q in self.pending.values_mut() {
            q.clear();
        }
        self.round = Some(Round { t: self.t, indices, weights, splits });
        let n = self.round.as_ref().unwrap().splits.len();
        (0..n).map(|k| self.assign(k, order[k])).collect()
    }

    fn assign(&mut self, k: usize, worker: u32) -> Result<Outgoing> {
        let round = self.round.as_mut().expect("assign outside a round");
        let a = &mut round.splits[k];
        a.worker = Some(worker);
        a.sent = Instant::now();
        let samples = &round.indices[a.range.clone()];
        let split = match self.cfg.data_mode {
            DataMode::Index => Split::Indices(samples.iter().map(|&i| i as u32).collect()),
            DataMode::Inline => {
                let (data, label) = self.dataset.gather(samples)?;
                Split::Inline { data: npy::to_bytes(&data)?, label: npy::to_bytes(&label)? }
            }
        };
        let frame = Frame::Round(RoundFrame {
            t: round.t,
            codec: self.cfg.weight_codec,
            weights: round.weights.as_ref().clone(),
            split,
        })
        .encode()?;
        self.pending.entry(worker).or_default().push_back(k);
        self.stats.bytes_down += frame.len() as u64;
        debug!("round {} split {k} ({} samples) -> worker {worker}", round.t, samples.len());
        Ok(Outgoing { worker_id: worker, frame })
    }

    fn reassign(&mut self, splits: Vec<usize>) -> Result<Vec<Outgoing>> {
        let Some(round) = self.round.as_mut() else { return Ok(Vec::new()) };
        let splits: Vec<usize> = splits.into_iter().filter(|&k| round.splits[k].result.is_none()).collect();
        for &k in &splits {
            round.splits[k].worker = None;
        }
        let mut out = Vec::new();
        for k in splits {
            // least-loaded responsive worker
            let target = self
                .workers
                .iter()
                .filter(|w| !self.overdue.contains(w))
                .min_by_key(|w| self.pending.get(w).map_or(0, VecDeque::len))
                .or_else(|| self.workers.iter().next())
                .copied();
            if let Some(w) = target {
                self.stats.reassignments += 1;
                out.push(self.assign(k, w)?);
            }
        }
        Ok(out)
    }

    /// Hand splits older than the timeout to other workers.
    pub fn check_timeouts(&mut self, now: Instant) -> Result<Vec<Outgoing>> {
        let Some(round) = &self.round else { return Ok(Vec::new()) };
        let late: Vec<(usize, u32)> = round
            .splits
            .iter()
            .enumerate()
            .filter(|(_, a)| a.result.is_none() && now.duration_since(a.sent) > self.cfg.timeout)
            .filter_map(|(k, a)| a.worker.map(|w| (k, w)))
            .collect();
        for &(k, w) in &late {
            warn!("worker {w} missed the deadline for split {k}");
            self.overdue.insert(w);
            if let Some(q) = self.pending.get_mut(&w) {
                q.retain(|&s| s != k);
            }
        }
        self.reassign(late.into_iter().map(|(k, _)| k).collect())
    }

    /// Decode and apply a GRADIENT frame received from `worker`.
    pub fn handle_bytes(&mut self, worker: u32, bytes: &[u8]) -> Result<Receipt> {
        self.stats.bytes_up += bytes.len() as u64;
        match Frame::decode(bytes)? {
            Frame::Gradient(p) if p.worker_id == worker || p.worker_id == 0 => self.receive(worker, p),
            Frame::Gradient(p) => Err(Error::Protocol(format!("worker {worker} sent a packet for worker {}", p.worker_id))),
            other => Err(Error::Protocol(format!("unexpected frame from worker {worker}: {:?}", kind(&other)))),
        }
    }

    /// Record a worker's packet. The packet answers the oldest split the
    /// worker owes in the current round. Stale packets change nothing.
    pub fn receive(&mut self, worker: u32, packet: GradientPacket) -> Result<Receipt> {
        let Some(round) = self.round.as_mut() else {
            self.stats.stale_packets += 1;
            return Ok(Receipt::Stale);
        };
        let Some(&k) = self.pending.get(&worker).and_then(VecDeque::front).filter(|_| packet.t == round.t) else {
            self.stats.stale_packets += 1;
            debug!("stale packet t={} from worker {worker} (round {})", packet.t, round.t);
            return Ok(Receipt::Stale);
        };
        let split = &round.splits[k];
        if packet.n_k as usize != split.range.len() {
            return Err(Error::Protocol(format!("packet covers {} samples, split has {}", packet.n_k, split.range.len())));
        }
        let sizes: Vec<usize> = self.net.learnable().map(|p| p.value.numel()).collect();
        if packet.tensors.len() != sizes.len() || packet.tensors.iter().zip(&sizes).any(|(v, &n)| v.len() != n) {
            return Err(Error::Protocol("gradient tensors do not match the parameter registry".into()));
        }
        if packet.tensors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Protocol(format!("non-finite gradient from worker {worker}")));
        }
        self.pending.get_mut(&worker).unwrap().pop_front();
        round.splits[k].result = Some(packet);
        if round.splits.iter().all(|a| a.result.is_some()) {
            self.aggregate()?;
            return Ok(Receipt::Complete);
        }
        Ok(Receipt::Accepted)
    }

    /// `dW = sum_K (n_K / |I|) g_K`, summed in split order, then one
    /// optimizer step.
    fn aggregate(&mut self) -> Result<()> {
        let round = self.round.take().expect("aggregate outside a round");
        assert!(covers(&round.splits, round.indices.len()), "splits must partition the batch");
        let total = round.indices.len() as f64;
        let shapes: Vec<Vec<usize>> = self.net.learnable().map(|p| p.value.shape().to_vec()).collect();
        let mut sums: Vec<Vec<f64>> = shapes.iter().map(|s| vec![0.0; s.iter().product()]).collect();
        for a in &round.splits {
            let p = a.result.as_ref().unwrap();
            let w = p.n_k as f64 / total;
            for (acc, g) in sums.iter_mut().zip(&p.tensors) {
                for (s, &v) in acc.iter_mut().zip(g) {
                    *s += w * v as f64;
                }
            }
        }
        let grads = sums
            .into_iter()
            .zip(&shapes)
            .map(|(v, s)| Tensor::from_vec(s, v.into_iter().map(|x| x as f32).collect()))
            .collect::<Result<Vec<_>>>()?;
        for (p, g) in self.net.learnable_mut().zip(grads) {
            p.grad = g;
        }
        let lr = match self.cfg.lr_step {
            Some((every, gamma)) if every > 0 => self.cfg.sgd.lr * gamma.powi((self.t as usize / every) as i32),
            _ => self.cfg.sgd.lr,
        };
        self.opt.set_lr(lr)?;
        self.opt.step(self.net.learnable_mut())?;
        self.stats.images += round.indices.len() as u64;
        self.t += 1;
        for q in self.pending.values_mut() {
            q.clear();
        }
        debug!("round {} complete", round.t);
        Ok(())
    }

    /// DONE frames for every connected worker.
    pub fn farewell(&mut self) -> Result<Vec<Outgoing>> {
        let frame = Frame::Done { t: self.t }.encode()?;
        Ok(self.workers.iter().map(|&w| Outgoing { worker_id: w, frame: frame.clone() }).collect())
    }
}

fn covers(splits: &[Assignment], len: usize) -> bool {
    let mut next = 0;
    for a in splits {
        if a.range.start != next {
            return false;
        }
        next = a.range.end;
    }
    next == len
}

fn kind(f: &Frame) -> &'static str {
    match f {
        Frame::Hello(_) => "HELLO",
        Frame::Ack { .. } => "ACK",
        Frame::Error(_) => "ERROR",
        Frame::Gradient(_) => "GRADIENT",
        Frame::Round(_) => "ROUND",
        Frame::Done { .. } => "DONE",
    }
}
