mod common;

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::thread;

use flatnet::distrib::ws::handshake;
use flatnet::distrib::{
    fetch_spec, run_worker, serve, ClusterReport, Frame, Hello, ParameterServer, ServeOptions, ServerConfig, WorkerOptions,
    PROTOCOL_VERSION,
};
use flatnet::graph::{fixtures, NetOptions, Network};
use flatnet::optim::SgdConfig;
use flatnet::train::{Batches, TrainConfig, Trainer};
use tempfile::TempDir;

const SEED: u64 = 5;

fn dataset_dir() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    common::synthetic_digits(180, 1).save(dir.path().join("mnist_train")).unwrap();
    dir
}

fn lenet(root: &Path) -> Network {
    Network::from_json(fixtures::LENET, &NetOptions::default().seed(SEED).data_root(root)).unwrap()
}

fn config(iterations: usize) -> ServerConfig {
    ServerConfig {
        batch: 60,
        seed: SEED,
        iterations,
        sgd: SgdConfig { lr: 0.02, momentum: 0.9, weight_decay: 0.0 },
        ..ServerConfig::default()
    }
}

type Handle = thread::JoinHandle<flatnet::Result<(ParameterServer, ClusterReport)>>;

fn start(root: &Path, iterations: usize, opts: ServeOptions) -> (String, Handle) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let server = ParameterServer::new(lenet(root), config(iterations)).unwrap();
    (url, thread::spawn(move || serve(listener, server, opts)))
}

fn worker_opts(url: &str, root: &Path) -> WorkerOptions {
    WorkerOptions { url: url.into(), token: "t0k".into(), worker_id: 0, data_root: Some(root.into()), micro_batch: None }
}

fn reference(root: &Path, iterations: usize) -> Network {
    let mut cfg = TrainConfig::new(fixtures::LENET);
    cfg.batch = 60;
    cfg.seed = SEED;
    cfg.sgd = config(iterations).sgd;
    let mut tr = Trainer::with_network(lenet(root), cfg).unwrap();
    let n = tr.net.dataset(flatnet::layers::Phase::Train).unwrap().len();
    let mut b = Batches::new(SEED, n, 60).unwrap();
    for t in 0..iterations {
        tr.step(t, &b.next().unwrap()).unwrap();
    }
    tr.net
}

fn assert_close(a: &Network, b: &Network) {
    for (p, q) in a.learnable().zip(b.learnable()) {
        for (x, y) in p.value.to_f64_vec().unwrap().iter().zip(q.value.to_f64_vec().unwrap()) {
            assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        }
    }
}

fn opts(min_workers: usize) -> ServeOptions {
    ServeOptions { token: "t0k".into(), min_workers, ..ServeOptions::default() }
}

#[test]
fn two_native_workers_train_over_websocket() {
    let dir = dataset_dir();
    let (url, server) = start(dir.path(), 4, opts(2));
    let workers: Vec<_> = (0..2)
        .map(|_| {
            let o = worker_opts(&url, dir.path());
            thread::spawn(move || run_worker(&o))
        })
        .collect();
    let reports: Vec<_> = workers.into_iter().map(|h| h.join().unwrap().unwrap()).collect();
    let (server, report) = server.join().unwrap().unwrap();
    assert_eq!(reports.iter().map(|r| r.rounds).sum::<usize>(), 8);
    assert_eq!(report.stats.images, 240);
    assert_close(server.network(), &reference(dir.path(), 4));
}

#[test]
fn dropped_worker_split_is_reassigned() {
    let dir = dataset_dir();
    let (url, server) = start(dir.path(), 3, opts(2));
    // a peer that takes its first split and vanishes
    let hello = Hello { version: PROTOCOL_VERSION, worker_id: 0, token: "t0k".into() };
    let (mut ghost, _) = handshake(&url, &hello).unwrap();
    let o = worker_opts(&url, dir.path());
    let live = thread::spawn(move || run_worker(&o));
    match ghost.read().unwrap() {
        tungstenite::Message::Binary(b) => assert!(matches!(Frame::decode(&b).unwrap(), Frame::Round(_))),
        m => panic!("unexpected {m:?}"),
    }
    drop(ghost);
    let report = live.join().unwrap().unwrap();
    let (server, stats) = server.join().unwrap().unwrap();
    assert!(report.rounds >= 3);
    assert!(stats.stats.reassignments >= 1);
    assert_close(server.network(), &reference(dir.path(), 3));
}

#[test]
fn handshake_rejections() {
    let dir = dataset_dir();
    let (url, server) = start(dir.path(), 1, opts(1));
    let bad_version = Hello { version: PROTOCOL_VERSION + 1, worker_id: 0, token: "t0k".into() };
    let e = handshake(&url, &bad_version).err().unwrap();
    assert!(matches!(e, flatnet::Error::Handshake(_)), "{e}");
    let bad_token = Hello { version: PROTOCOL_VERSION, worker_id: 0, token: "nope".into() };
    assert!(matches!(handshake(&url, &bad_token), Err(flatnet::Error::Handshake(_))));

    // let the server finish
    run_worker(&worker_opts(&url, dir.path())).unwrap();
    server.join().unwrap().unwrap();
}

fn get(url: &str, path: &str) -> (String, Vec<u8>) {
    let mut s = TcpStream::connect(url.trim_start_matches("http://")).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: x\r\n\r\n").unwrap();
    let mut out = Vec::new();
    s.read_to_end(&mut out).unwrap();
    let split = out.windows(4).position(|w| w == b"\r\n\r\n").unwrap();
    (String::from_utf8_lossy(&out[..split]).into_owned(), out[split + 4..].to_vec())
}

#[test]
fn http_bootstrap() {
    let dir = dataset_dir();
    let web = tempfile::tempdir().unwrap();
    std::fs::write(web.path().join("index.html"), "<p>worker</p>").unwrap();
    std::fs::write(web.path().join("app.js"), "let x = 1;").unwrap();
    let (url, server) = start(dir.path(), 1, ServeOptions { static_dir: Some(web.path().into()), ..opts(1) });

    let spec = fetch_spec(&url).unwrap();
    assert_eq!(spec.protocol_version, 1);
    assert_eq!(spec.batch, 60);
    assert_eq!(spec.definition.as_array().unwrap().len(), 8);
    assert_eq!(spec.definition[2]["type"], "convolution_2d");

    let (head, body) = get(&url, "/");
    assert!(head.starts_with("HTTP/1.1 200"), "{head}");
    assert_eq!(body, b"<p>worker</p>");
    let (head, _) = get(&url, "/app.js");
    assert!(head.contains("text/javascript"));
    let (head, _) = get(&url, "/../Cargo.toml");
    assert!(head.starts_with("HTTP/1.1 404"));

    run_worker(&worker_opts(&url, dir.path())).unwrap();
    server.join().unwrap().unwrap();
}
