//! WebSocket transport: the serving loop with its HTTP bootstrap
//! (`GET /spec`, static files under `GET /`) and the native worker client.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, TryRecvError};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use tungstenite::{Message, WebSocket};

use super::codec::Codec;
use super::local::ClusterReport;
use super::protocol::{Frame, Hello, PROTOCOL_VERSION};
use super::server::{DataMode, Outgoing, ParameterServer, Receipt};
use super::worker::Worker;
use crate::error::{Error, Result};
use crate::graph::{NetOptions, Network};

/// Body of `GET /spec`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecDoc {
    pub definition: serde_json::Value,
    pub batch: usize,
    pub iterations: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Gradient codec.
    pub codec: Codec,
    pub weight_codec: Codec,
    pub data_mode: DataMode,
    pub protocol_version: u32,
    pub micro_batch: Option<usize>,
}

impl SpecDoc {
    pub fn of(server: &ParameterServer, micro_batch: Option<usize>) -> Result<SpecDoc> {
        let cfg = server.config();
        Ok(SpecDoc {
            definition: serde_json::from_str(&server.network().definition().to_json()?)?,
            batch: cfg.batch,
            iterations: cfg.iterations,
            lr: cfg.sgd.lr,
            momentum: cfg.sgd.momentum,
            weight_decay: cfg.sgd.weight_decay,
            codec: cfg.grad_codec,
            weight_codec: cfg.weight_codec,
            data_mode: cfg.data_mode,
            protocol_version: PROTOCOL_VERSION,
            micro_batch,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ServeOptions {
    /// Shared secret workers must present in HELLO; empty accepts any.
    pub token: String,
    /// The first round starts once this many workers are connected.
    pub min_workers: usize,
    /// Served under `GET /`.
    pub static_dir: Option<PathBuf>,
    /// Advertised to workers through `/spec`.
    pub micro_batch: Option<usize>,
}

impl Default for ServeOptions {
    fn default() -> ServeOptions {
        ServeOptions { token: String::new(), min_workers: 1, static_dir: None, micro_batch: None }
    }
}

enum Event {
    Join { requested: u32, outbox: Sender<Vec<u8>>, reply: Sender<Result<u32>> },
    Packet { worker: u32, bytes: Vec<u8> },
    Leave { worker: u32 },
}

struct Shared {
    spec: String,
    opts: ServeOptions,
}

const POLL: Duration = Duration::from_millis(20);

/// Accept connections on `listener` and train until the configured number
/// of rounds has completed. Returns the server holding the final weights.
pub fn serve(listener: TcpListener, mut server: ParameterServer, opts: ServeOptions) -> Result<(ParameterServer, ClusterReport)> {
    let shared = Arc::new(Shared { spec: serde_json::to_string(&SpecDoc::of(&server, opts.micro_batch)?)?, opts });
    let (ev_tx, ev_rx) = mpsc::channel();
    let stop = Arc::new(AtomicBool::new(false));
    listener.set_nonblocking(true)?;
    info!("serving on {}", listener.local_addr()?);
    let acceptor = {
        let (stop, shared) = (stop.clone(), shared.clone());
        thread::spawn(move || accept_loop(listener, ev_tx, shared, stop))
    };
    let result = drive(&mut server, &ev_rx, shared.opts.min_workers.max(1));
    // sessions still waiting on a join reply see the receiver gone
    drop(ev_rx);
    stop.store(true, Ordering::SeqCst);
    let _ = acceptor.join();
    let elapsed = result?;
    let stats = server.stats().clone();
    Ok((server, ClusterReport { stats, elapsed }))
}

/// Accept until `stop`, then wait for open sessions so queued DONE frames
/// reach their workers before the caller returns.
fn accept_loop(listener: TcpListener, events: Sender<Event>, shared: Arc<Shared>, stop: Arc<AtomicBool>) {
    let mut sessions: Vec<thread::JoinHandle<()>> = Vec::new();
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                debug!("connection from {peer}");
                let (events, shared) = (events.clone(), shared.clone());
                sessions.retain(|h| !h.is_finished());
                sessions.push(thread::spawn(move || {
                    if let Err(e) = session(stream, events, &shared) {
                        debug!("session with {peer} ended: {e}");
                    }
                }));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => warn!("accept failed: {e}"),
        }
    }
    drop(listener);
    for h in sessions {
        let _ = h.join();
    }
}

/// The aggregation context: every mutation of round state happens here.
fn drive(server: &mut ParameterServer, events: &Receiver<Event>, min_workers: usize) -> Result<Duration> {
    let mut outboxes: BTreeMap<u32, Sender<Vec<u8>>> = BTreeMap::new();
    let mut started: Option<Instant> = None;
    let dispatch = |outboxes: &BTreeMap<u32, Sender<Vec<u8>>>, out: Vec<Outgoing>| {
        for o in out {
            if let Some(tx) = outboxes.get(&o.worker_id) {
                let _ = tx.send(o.frame);
            }
        }
    };
    while !server.finished() {
        match events.recv_timeout(POLL) {
            Ok(Event::Join { requested, outbox, reply }) => match server.connect(requested) {
                Ok((id, out)) => {
                    outboxes.insert(id, outbox);
                    let _ = reply.send(Ok(id));
                    dispatch(&outboxes, out);
                }
                Err(e) => {
                    let _ = reply.send(Err(e));
                }
            },
            Ok(Event::Packet { worker, bytes }) => match server.handle_bytes(worker, &bytes) {
                Ok(Receipt::Complete) => info!("round {} complete", server.t()),
                Ok(Receipt::Accepted) => {}
                Ok(Receipt::Stale) => debug!("stale packet from worker {worker}"),
                Err(e) => {
                    warn!("dropping worker {worker}: {e}");
                    outboxes.remove(&worker);
                    dispatch(&outboxes, server.disconnect(worker)?);
                }
            },
            Ok(Event::Leave { worker }) => {
                outboxes.remove(&worker);
                dispatch(&outboxes, server.disconnect(worker)?);
            }
            Err(RecvTimeoutError::Timeout) => dispatch(&outboxes, server.check_timeouts(Instant::now())?),
            Err(RecvTimeoutError::Disconnected) => return Err(Error::Transport("acceptor exited".into())),
        }
        // the quorum only gates the first round
        let quorum = if started.is_some() { 1 } else { min_workers };
        if !server.in_round() && !server.finished() && outboxes.len() >= quorum {
            started.get_or_insert_with(Instant::now);
            dispatch(&outboxes, server.begin_round()?);
        }
    }
    let elapsed = started.map_or(Duration::ZERO, |s| s.elapsed());
    dispatch(&outboxes, server.farewell()?);
    // dropping the outboxes tells each session to close after flushing
    Ok(elapsed)
}

fn session(stream: TcpStream, events: Sender<Event>, shared: &Shared) -> Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(Duration::from_secs(10)))?;
    let (path, upgrade, header_len) = peek_request(&stream)?;
    if !upgrade {
        return http(stream, &path, header_len, shared);
    }
    let mut ws = tungstenite::accept(stream).map_err(|e| Error::Transport(format!("websocket handshake: {e}")))?;
    let hello = match read_frame(&mut ws)? {
        Some(Frame::Hello(h)) => h,
        other => return reject(&mut ws, format!("expected HELLO, got {other:?}")),
    };
    if hello.version != PROTOCOL_VERSION {
        return reject(&mut ws, format!("protocol version {} unsupported; server speaks {PROTOCOL_VERSION}", hello.version));
    }
    if !shared.opts.token.is_empty() && hello.token != shared.opts.token {
        return reject(&mut ws, "bad token".into());
    }
    let (outbox, inbox) = mpsc::channel();
    let (reply_tx, reply_rx) = mpsc::channel();
    events
        .send(Event::Join { requested: hello.worker_id, outbox, reply: reply_tx })
        .map_err(|_| Error::Transport("server stopped".into()))?;
    let id = match reply_rx.recv().map_err(|_| Error::Transport("server stopped".into()))? {
        Ok(id) => id,
        Err(e) => return reject(&mut ws, e.to_string()),
    };
    send_frame(&mut ws, &Frame::Ack { worker_id: id })?;
    ws.get_ref().set_read_timeout(Some(POLL))?;
    let result = pump(&mut ws, id, &inbox, &events);
    let _ = events.send(Event::Leave { worker: id });
    result
}

/// Shuttle frames until the server drops the outbox or the peer leaves.
fn pump(ws: &mut WebSocket<TcpStream>, id: u32, inbox: &Receiver<Vec<u8>>, events: &Sender<Event>) -> Result<()> {
    loop {
        loop {
            match inbox.try_recv() {
                Ok(bytes) => ws.send(Message::binary(bytes)).map_err(transport)?,
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => {
                    let _ = ws.close(None);
                    let _ = ws.flush();
                    return Ok(());
                }
            }
        }
        match ws.read() {
            Ok(Message::Binary(b)) => {
                if events.send(Event::Packet { worker: id, bytes: b.to_vec() }).is_err() {
                    return Ok(());
                }
            }
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(transport(e)),
        }
    }
}

fn transport(e: tungstenite::Error) -> Error {
    Error::Transport(e.to_string())
}

fn reject<S: Read + Write>(ws: &mut WebSocket<S>, msg: String) -> Result<()> {
    warn!("rejecting worker: {msg}");
    send_frame(ws, &Frame::Error(msg.clone()))?;
    let _ = ws.close(None);
    let _ = ws.flush();
    Err(Error::Handshake(msg))
}

fn send_frame<S: Read + Write>(ws: &mut WebSocket<S>, f: &Frame) -> Result<()> {
    ws.send(Message::binary(f.encode()?)).map_err(transport)
}

/// Next binary frame; `None` once the peer closes.
fn read_frame<S: Read + Write>(ws: &mut WebSocket<S>) -> Result<Option<Frame>> {
    loop {
        match ws.read() {
            Ok(Message::Binary(b)) => return Frame::decode(&b).map(Some),
            Ok(Message::Close(_)) => return Ok(None),
            Ok(_) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(None),
            Err(e) => return Err(transport(e)),
        }
    }
}

/// Request path, whether it asks for a WebSocket upgrade, and header length,
/// without consuming anything from the socket.
fn peek_request(stream: &TcpStream) -> Result<(String, bool, usize)> {
    let mut buf = vec![0u8; 8192];
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        let n = stream.peek(&mut buf)?;
        let mut headers = [httparse::EMPTY_HEADER; 64];
        let mut req = httparse::Request::new(&mut headers);
        match req.parse(&buf[..n]) {
            Ok(httparse::Status::Complete(len)) => {
                let upgrade = req
                    .headers
                    .iter()
                    .any(|h| h.name.eq_ignore_ascii_case("upgrade") && String::from_utf8_lossy(h.value).eq_ignore_ascii_case("websocket"));
                let path = req.path.unwrap_or("/").to_string();
                if req.method != Some("GET") {
                    return Err(Error::Transport(format!("unsupported method {:?}", req.method)));
                }
                return Ok((path, upgrade, len));
            }
            Ok(httparse::Status::Partial) if n < buf.len() && n > 0 && Instant::now() < deadline => thread::sleep(POLL),
            Ok(httparse::Status::Partial) => return Err(Error::Transport("incomplete HTTP request".into())),
            Err(e) => return Err(Error::Transport(format!("bad HTTP request: {e}"))),
        }
    }
}

fn http(mut stream: TcpStream, path: &str, header_len: usize, shared: &Shared) -> Result<()> {
    let mut consumed = vec![0u8; header_len];
    stream.read_exact(&mut consumed)?;
    let path = path.split(['?', '#']).next().unwrap_or("/");
    let (status, mime, body): (&str, &str, Vec<u8>) = if path == "/spec" {
        ("200 OK", "application/json", shared.spec.as_bytes().to_vec())
    } else {
        match static_file(shared.opts.static_dir.as_deref(), path) {
            Some((mime, body)) => ("200 OK", mime, body),
            None => ("404 Not Found", "text/plain", b"not found\n".to_vec()),
        }
    };
    write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: {mime}\r\nContent-Length: {}\r\nAccess-Control-Allow-Origin: *\r\nConnection: close\r\n\r\n",
        body.len()
    )?;
    stream.write_all(&body)?;
    stream.flush()?;
    Ok(())
}

const PLACEHOLDER: &str = "<!doctype html>\n<title>flatnet</title>\n<p>Parameter server is running. No worker page installed.</p>\n";

fn static_file(dir: Option<&Path>, path: &str) -> Option<(&'static str, Vec<u8>)> {
    let rel = path.trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    let rel = Path::new(rel);
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return None;
    }
    let Some(dir) = dir else {
        return (rel == Path::new("index.html")).then(|| ("text/html; charset=utf-8", PLACEHOLDER.as_bytes().to_vec()));
    };
    let body = std::fs::read(dir.join(rel)).ok()?;
    let mime = match rel.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("wasm") => "application/wasm",
        _ => "application/octet-stream",
    };
    Some((mime, body))
}

/// `http://host:port` from any of `host:port`, `http://…` or `ws://…`.
pub fn http_base(url: &str) -> String {
    let url = url.trim_end_matches('/');
    if let Some(rest) = url.strip_prefix("ws://") {
        format!("http://{rest}")
    } else if url.starts_with("http://") {
        url.to_string()
    } else {
        format!("http://{url}")
    }
}

fn ws_url(url: &str) -> String {
    format!("ws://{}/ws", http_base(url).trim_start_matches("http://"))
}

pub fn fetch_spec(url: &str) -> Result<SpecDoc> {
    let body = ureq::get(&format!("{}/spec", http_base(url)))
        .call()
        .map_err(|e| Error::Transport(format!("GET /spec: {e}")))?
        .body_mut()
        .read_to_string()
        .map_err(|e| Error::Transport(format!("GET /spec: {e}")))?;
    Ok(serde_json::from_str(&body)?)
}

pub type ClientSocket = WebSocket<tungstenite::stream::MaybeTlsStream<TcpStream>>;

/// Open the socket and perform the HELLO exchange; returns the assigned id.
pub fn handshake(url: &str, hello: &Hello) -> Result<(ClientSocket, u32)> {
    let (mut ws, _) = tungstenite::connect(ws_url(url)).map_err(transport)?;
    send_frame(&mut ws, &Frame::Hello(hello.clone()))?;
    match read_frame(&mut ws)? {
        Some(Frame::Ack { worker_id }) => Ok((ws, worker_id)),
        Some(Frame::Error(msg)) => Err(Error::Handshake(msg)),
        other => Err(Error::Handshake(format!("unexpected reply {other:?}"))),
    }
}

#[derive(Clone, Debug)]
pub struct WorkerOptions {
    pub url: String,
    pub token: String,
    /// 0 lets the server choose.
    pub worker_id: u32,
    /// Directory holding the dataset files in index mode.
    pub data_root: Option<PathBuf>,
    /// Overrides the server's advertised micro-batch.
    pub micro_batch: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct WorkerReport {
    pub worker_id: u32,
    pub rounds: usize,
}

/// Native worker loop: fetch `/spec`, join, answer ROUND frames until DONE.
pub fn run_worker(opts: &WorkerOptions) -> Result<WorkerReport> {
    let spec = fetch_spec(&opts.url)?;
    if spec.protocol_version != PROTOCOL_VERSION {
        return Err(Error::Handshake(format!(
            "server speaks protocol {}, this worker speaks {PROTOCOL_VERSION}",
            spec.protocol_version
        )));
    }
    let mut net_opts = NetOptions::default();
    net_opts.data_root = opts.data_root.clone();
    let net = Network::from_json(&spec.definition.to_string(), &net_opts)?;
    let mut worker = Worker::new(net, spec.codec, opts.micro_batch.or(spec.micro_batch));
    let hello = Hello { version: PROTOCOL_VERSION, worker_id: opts.worker_id, token: opts.token.clone() };
    let (mut ws, id) = handshake(&opts.url, &hello)?;
    worker.set_id(id);
    info!("joined as worker {id}");
    let mut rounds = 0;
    loop {
        match read_frame(&mut ws)? {
            Some(Frame::Round(r)) => {
                if let Some(reply) = worker.handle_round(&r)? {
                    ws.send(Message::binary(reply)).map_err(transport)?;
                    rounds += 1;
                }
            }
            Some(Frame::Done { t }) => {
                info!("training finished after {t} rounds");
                let _ = ws.close(None);
                let _ = ws.flush();
                return Ok(WorkerReport { worker_id: id, rounds });
            }
            Some(Frame::Error(msg)) => return Err(Error::Protocol(msg)),
            Some(other) => warn!("ignoring unexpected frame {other:?}"),
            None => return Err(Error::Transport("server closed the connection before DONE".into())),
        }
    }
}
