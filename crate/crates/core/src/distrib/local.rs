//! In-process cluster: one thread per worker, byte frames over channels.

use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use log::warn;

use super::protocol::Frame;
use super::server::{Outgoing, ParameterServer, Receipt, ServerStats};
use super::worker::Worker;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct ClusterReport {
    pub stats: ServerStats,
    pub elapsed: Duration,
}

impl ClusterReport {
    pub fn images_per_sec(&self) -> f64 {
        self.stats.images as f64 / self.elapsed.as_secs_f64().max(1e-9)
    }
}

/// Run `server` to completion with `workers`; returns the server so the
/// trained network can be inspected.
pub fn run_local(mut server: ParameterServer, workers: Vec<Worker>) -> Result<(ParameterServer, ClusterReport)> {
    if workers.is_empty() {
        return Err(Error::InvalidArgument("at least one worker is required".into()));
    }
    let (up_tx, up_rx) = mpsc::channel::<(u32, Result<Vec<u8>>)>();
    let mut downs = std::collections::BTreeMap::new();
    let mut handles = Vec::new();
    for mut w in workers {
        let (id, _) = server.connect(0)?;
        w.set_id(id);
        let (tx, rx) = mpsc::channel::<Vec<u8>>();
        downs.insert(id, tx);
        let up = up_tx.clone();
        handles.push(thread::spawn(move || {
            for bytes in rx {
                let reply = match Frame::decode(&bytes) {
                    Ok(Frame::Round(r)) => w.handle_round(&r),
                    Ok(Frame::Done { .. }) => break,
                    Ok(_) => continue,
                    Err(e) => Err(e),
                };
                match reply {
                    Ok(Some(frame)) => {
                        if up.send((id, Ok(frame))).is_err() {
                            break;
                        }
                    }
                    Ok(None) => {}
                    Err(e) => {
                        let _ = up.send((id, Err(e)));
                        break;
                    }
                }
            }
        }));
    }
    drop(up_tx);

    let send = |out: Vec<Outgoing>| -> Result<()> {
        for o in out {
            if let Some(tx) = downs.get(&o.worker_id) {
                tx.send(o.frame).map_err(|_| Error::Transport(format!("worker {} hung up", o.worker_id)))?;
            }
        }
        Ok(())
    };

    let start = Instant::now();
    let result = (|| -> Result<()> {
        while !server.finished() {
            send(server.begin_round()?)?;
            loop {
                let (id, msg) = match up_rx.recv_timeout(server.config().timeout) {
                    Ok(m) => m,
                    Err(mpsc::RecvTimeoutError::Timeout) => {
                        send(server.check_timeouts(Instant::now())?)?;
                        continue;
                    }
                    Err(mpsc::RecvTimeoutError::Disconnected) => {
                        return Err(Error::Transport("all workers exited".into()));
                    }
                };
                let bytes = msg?;
                match server.handle_bytes(id, &bytes)? {
                    Receipt::Complete => break,
                    Receipt::Accepted => {}
                    Receipt::Stale => warn!("stale packet from worker {id}"),
                }
            }
        }
        Ok(())
    })();
    let elapsed = start.elapsed();
    let _ = send(server.farewell()?);
    drop(downs);
    for h in handles {
        let _ = h.join();
    }
    result?;
    let stats = server.stats().clone();
    Ok((server, ClusterReport { stats, elapsed }))
}
