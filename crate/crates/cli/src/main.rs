use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand};
use flatnet::bench::{bench_matrix, speedup, speedup_benchmark, SpeedupConfig, SpeedupRow};
use flatnet::data::ingest_mnist;
use flatnet::distrib::{run_worker, serve, Codec, DataMode, ParameterServer, ServeOptions, ServerConfig, WorkerOptions};
use flatnet::graph::{Definition, Network};
use flatnet::layers::{Dataset, Phase};
use flatnet::train::{evaluate, predict, LogRow, Trainer};
use flatnet_cli::TrainArgs;

#[derive(Parser)]
#[command(name = "flatnet", version, about = "CNN training, evaluation and a synchronous parameter server")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert an MNIST IDX image/label pair into `<out>_data.npy` and `<out>_label.npy`
    IngestMnist {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train in this process; logs CSV rows and writes the parameters
    Train {
        #[command(flatten)]
        args: TrainArgs,
        /// Parameter file to write
        #[arg(long)]
        out: Option<PathBuf>,
        /// Start from these parameters instead of the seeded initialization
        #[arg(long)]
        init: Option<PathBuf>,
        /// CSV log destination (default stdout)
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Print test-phase loss and accuracy of a saved model
    Eval {
        #[command(flatten)]
        args: TrainArgs,
        #[arg(long)]
        model: PathBuf,
        /// Evaluate on this dataset prefix instead of the definition's test data
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Print the predicted class of one NPY image
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Blob holding the class scores
        #[arg(long, default_value = "pred")]
        output: String,
    },
    /// Time the four matrix tasks and check them against oracles
    BenchMatrix {
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the parameter server over WebSocket
    Serve {
        #[command(flatten)]
        args: TrainArgs,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Workers to wait for before the first round
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Gradient codec requested from workers
        #[arg(long)]
        codec: Option<Codec>,
        /// Codec of the weight broadcast
        #[arg(long, default_value = "raw")]
        weight_codec: Codec,
        #[arg(long, default_value = "index")]
        data_mode: DataMode,
        /// Rounds to run (default: epochs over the training set)
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long, default_value = "")]
        token: String,
        /// Seconds before an unanswered split is reassigned
        #[arg(long, default_value_t = 60)]
        timeout: u64,
        /// Directory served under `GET /`
        #[arg(long)]
        static_dir: Option<PathBuf>,
        /// Parameter file to write at the end
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Join a server as a native worker
    Worker {
        #[arg(long)]
        url: String,
        #[arg(long, default_value = "")]
        token: String,
        /// Requested worker id (0: assigned by the server)
        #[arg(long, default_value_t = 0)]
        id: u32,
        #[arg(long)]
        data_root: Option<PathBuf>,
        #[arg(long)]
        micro_batch: Option<usize>,
    },
    /// Throughput of in-process clusters on a synthetic convolutional workload
    BenchSpeedup {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        workers: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "raw,q8")]
        codec: Vec<Codec>,
        #[arg(long, default_value_t = 6)]
        iterations: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV destination (default stdout)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn sink(path: Option<&PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn network(args: &TrainArgs, model: Option<&PathBuf>) -> anyhow::Result<Network> {
    let cfg = args.resolve()?.train;
    let mut net = Network::new(Definition::parse(&cfg.definition)?, &cfg.net_options())?;
    if let Some(m) = model {
        net.load_params(m).with_context(|| format!("loading {}", m.display()))?;
    }
    Ok(net)
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::IngestMnist { images, labels, out } => {
            let n = ingest_mnist(&images, &labels, &out)?;
            println!("{n}");
        }
        Command::Train { args, out, init, log } => {
            let cfg = args.resolve()?.train;
            let mut trainer = Trainer::new(cfg)?;
            if let Some(p) = &init {
                trainer.net.load_params(p).with_context(|| format!("loading {}", p.display()))?;
            }
            let mut w = sink(log.as_ref())?;
            writeln!(w, "{}", LogRow::HEADER)?;
            let mut io = Ok(());
            let report = trainer.run(&mut |r| {
                if io.is_ok() {
                    io = writeln!(w, "{}", r.csv());
                }
            })?;
            io?;
            w.flush()?;
            log::info!("{} iterations, final loss {:.4}, test accuracy {:?}", report.iterations, report.final_loss, report.test_accuracy);
            if let Some(p) = out {
                trainer.net.save_params(&p)?;
            }
        }
        Command::Eval { args, model, dataset } => {
            let batch = args.batch.unwrap_or(1000);
            let mut net = network(&args, Some(&model))?;
            if let Some(prefix) = dataset {
                net.attach_dataset(Phase::Test, Dataset::load(&prefix)?.into())?;
            }
            let (loss, acc) = evaluate(&mut net, batch)?;
            println!("loss,accuracy\n{loss:.6},{acc:.6}");
        }
        Command::Predict { config, model, image, output } => {
            let (definition, _) = flatnet_cli::config::load(&config)?;
            let mut net = Network::new(Definition::parse(&definition)?, &Default::default())?;
            net.load_params(&model).with_context(|| format!("loading {}", model.display()))?;
            let x = flatnet::tensor::npy::load(&image)?;
            println!("{}", predict(&mut net, &x, &output)?);
        }
        Command::BenchMatrix { reps, seed } => {
            println!("task,description,ms,shape,max_rel_err");
            for r in bench_matrix(reps, seed)? {
                let shape: Vec<String> = r.shape.iter().map(usize::to_string).collect();
                println!("{},{},{:.3},{},{:.3e}", r.task, r.description, r.ms, shape.join("x"), r.max_rel_err);
            }
        }
        Command::Serve { args, host, port, workers, codec, weight_codec, data_mode, iterations, token, timeout, static_dir, out } => {
            let resolved = args.resolve()?;
            let cfg = resolved.train;
            let mut net = Network::new(Definition::parse(&cfg.definition)?, &cfg.net_options())?;
            let per_epoch = net.dataset(Phase::Train)?.len().div_ceil(cfg.batch);
            let server_cfg = ServerConfig {
                batch: cfg.batch,
                seed: cfg.seed,
                iterations: iterations.unwrap_or(per_epoch * cfg.epochs),
                sgd: cfg.sgd,
                lr_step: cfg.lr_step,
                weight_codec,
                grad_codec: codec.or(resolved.codec).unwrap_or(Codec::Raw),
                data_mode,
                timeout: Duration::from_secs(timeout),
            };
            let server = ParameterServer::new(net, server_cfg)?;
            let listener = TcpListener::bind((host.as_str(), port)).with_context(|| format!("binding {host}:{port}"))?;
            log::info!("listening on http://{}", listener.local_addr()?);
            let opts = ServeOptions { token, min_workers: workers, static_dir, micro_batch: cfg.micro_batch };
            let (server, report) = serve(listener, server, opts)?;
            let s = &report.stats;
            println!("rounds,images,images_per_sec,bytes_up,bytes_down,stale_packets,reassignments");
            println!(
                "{},{},{:.2},{},{},{},{}",
                server.t(),
                s.images,
                report.images_per_sec(),
                s.bytes_up,
                s.bytes_down,
                s.stale_packets,
                s.reassignments
            );
            let mut net = server.into_network();
            match evaluate(&mut net, 1000) {
                Ok((loss, acc)) => log::info!("test loss {loss:.4}, accuracy {acc:.4}"),
                Err(e) => log::warn!("no test evaluation: {e}"),
            }
            if let Some(p) = out {
                net.save_params(&p)?;
            }
        }
        Command::Worker { url, token, id, data_root, micro_batch } => {
            let report = run_worker(&WorkerOptions { url, token, worker_id: id, data_root, micro_batch })?;
            log::info!("worker {} answered {} rounds", report.worker_id, report.rounds);
        }
        Command::BenchSpeedup { workers, codec, iterations, batch, seed, out } => {
            let rows = speedup_benchmark(&SpeedupConfig { workers, codecs: codec, iterations, batch, seed })?;
            let mut w = sink(out.as_ref())?;
            writeln!(w, "{},speedup", SpeedupRow::HEADER)?;
            for r in &rows {
                writeln!(w, "{},{:.3}", r.csv(), speedup(&rows, r).unwrap_or(f64::NAN))?;
            }
            w.flush()?;
        }
    }
    Ok(())
}
