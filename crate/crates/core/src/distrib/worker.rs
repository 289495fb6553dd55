//! Worker side of a round: load weights, compute gradients on the split,
//! encode a GRADIENT frame.

use std::sync::Arc;

use log::debug;

use super::codec::Codec;
use super::protocol::{apply_weights, encode_gradient, RoundFrame, Split};
use crate::error::Result;
use crate::graph::Network;
use crate::layers::{Dataset, Phase};
use crate::tensor::{npy, Tensor};
use crate::train::compute_gradients;

pub struct Worker {
    pub net: Network,
    id: u32,
    codec: Codec,
    micro_batch: Option<usize>,
    last_t: Option<u32>,
}

impl Worker {
    pub fn new(net: Network, codec: Codec, micro_batch: Option<usize>) -> Worker {
        Worker { net, id: 0, codec, micro_batch, last_t: None }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn set_id(&mut self, id: u32) {
        self.id = id;
    }

    pub fn codec(&self) -> Codec {
        self.codec
    }

    /// GRADIENT frame for `round`, or `None` if the round is older than one
    /// already answered.
    pub fn handle_round(&mut self, round: &RoundFrame) -> Result<Option<Vec<u8>>> {
        if self.last_t.is_some_and(|t| round.t < t) {
            debug!("worker {} dropping stale round {}", self.id, round.t);
            return Ok(None);
        }
        apply_weights(&mut self.net, round.codec, &round.weights)?;
        let indices: Vec<usize> = match &round.split {
            Split::Indices(v) => v.iter().map(|&i| i as usize).collect(),
            Split::Inline { data, label } => {
                let ds = Dataset::new(npy::from_bytes(data)?, npy::from_bytes(label)?)?;
                let n = ds.len();
                self.net.attach_dataset(Phase::Train, Arc::new(ds))?;
                (0..n).collect()
            }
        };
        let (grads, _loss) = compute_gradients(&mut self.net, &indices, self.micro_batch)?;
        self.net.release();
        self.last_t = Some(round.t);
        let refs: Vec<&Tensor> = grads.iter().collect();
        encode_gradient(round.t, self.id, indices.len() as u32, self.codec, &refs).map(Some)
    }
}
