use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use flatnet::distrib::Codec;
use flatnet::optim::SgdConfig;
use flatnet::train::TrainConfig;
use serde::Deserialize;
use serde_json::Value;

/// Contents of `--config`: either a bare network definition (a JSON array of
/// layers) or an object naming one plus hyperparameters. Relative paths are
/// taken from the file's directory.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    /// Path to a definition file, or the layer array inline.
    pub definition: Option<Value>,
    pub data_root: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub seed: Option<u64>,
    pub codec: Option<String>,
    pub test_every: Option<usize>,
    pub micro_batch: Option<usize>,
    /// `[every, gamma]`
    pub lr_step: Option<(usize, f64)>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Network definition or run file (JSON)
    #[arg(long)]
    pub config: PathBuf,
    /// Directory holding `<file_prefix>_data.npy` / `_label.npy`
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Weight decay
    #[arg(long)]
    pub wd: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluate on the test phase every N iterations (0: only at the end)
    #[arg(long)]
    pub test_every: Option<usize>,
    #[arg(long)]
    pub micro_batch: Option<usize>,
}

pub struct Resolved {
    pub train: TrainConfig,
    pub codec: Option<Codec>,
}

/// Read `path` into a definition text and run file.
pub fn load(path: &Path) -> anyhow::Result<(String, RunFile)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    match value {
        Value::Array(_) => Ok((text, RunFile::default())),
        Value::Object(_) => {
            let mut run: RunFile = serde_json::from_value(value).with_context(|| format!("run file {}", path.display()))?;
            let definition = match run.definition.take() {
                Some(Value::String(p)) => {
                    let p = base.join(p);
                    std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?
                }
                Some(v @ Value::Array(_)) => v.to_string(),
                Some(_) => bail!("`definition` must be a path or a layer array"),
                None => bail!("run file {} has no `definition`", path.display()),
            };
            run.data_root = run.data_root.map(|r| base.join(r));
            Ok((definition, run))
        }
        _ => bail!("{} is neither a definition nor a run file", path.display()),
    }
}

impl TrainArgs {
    /// Run-file values overridden by flags. Without either, data is looked
    /// up next to the config file.
    pub fn resolve(&self) -> anyhow::Result<Resolved> {
        let (definition, run) = load(&self.config)?;
        let mut cfg = TrainConfig::new(definition);
        let defaults = SgdConfig { lr: 0.01, ..SgdConfig::default() };
        cfg.data_root = self
            .data_root
            .clone()
            .or(run.data_root)
            .or_else(|| self.config.parent().map(Path::to_path_buf));
        cfg.epochs = self.epochs.or(run.epochs).unwrap_or(1);
        cfg.batch = self.batch.or(run.batch).unwrap_or(64);
        cfg.sgd = SgdConfig {
            lr: self.lr.or(run.lr).unwrap_or(defaults.lr),
            momentum: self.momentum.or(run.momentum).unwrap_or(defaults.momentum),
            weight_decay: self.wd.or(run.weight_decay).unwrap_or(defaults.weight_decay),
        };
        cfg.seed = self.seed.or(run.seed).unwrap_or(0);
        cfg.test_every = self.test_every.or(run.test_every).unwrap_or(0);
        cfg.micro_batch = self.micro_batch.or(run.micro_batch);
        cfg.lr_step = run.lr_step;
        cfg.validate()?;
        let codec = run.codec.map(|c| c.parse()).transpose()?;
        Ok(Resolved { train: cfg, codec })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(config: PathBuf) -> TrainArgs {
        TrainArgs {
            config,
            data_root: None,
            epochs: None,
            batch: Some(32),
            lr: None,
            momentum: None,
            wd: None,
            seed: None,
            test_every: None,
            micro_batch: None,
        }
    }

    #[test]
    fn run_file_with_relative_definition() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("net.json"), flatnet::graph::fixtures::LENET).unwrap();
        let run = dir.path().join("run.json");
        std::fs::write(&run, r#"{"definition": "net.json", "epochs": 3, "batch": 8, "lr": 0.1, "codec": "q8", "data_root": "d"}"#)
            .unwrap();
        let r = args(run).resolve().unwrap();
        assert_eq!(r.train.epochs, 3);
        // the flag wins over the file
        assert_eq!(r.train.batch, 32);
        assert_eq!(r.train.sgd.lr, 0.1);
        assert_eq!(r.codec, Some(Codec::Q8));
        assert_eq!(r.train.data_root.unwrap(), dir.path().join("d"));
        assert!(r.train.definition.contains("mnist_train"));
    }

    #[test]
    fn bare_definition_and_bad_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let net = dir.path().join("net.json");
        std::fs::write(&net, flatnet::graph::fixtures::LENET).unwrap();
        let r = args(net).resolve().unwrap();
        assert_eq!(r.train.data_root.unwrap(), dir.path());
        assert_eq!(r.codec, None);

        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, r#"{"definition": "net.json", "epoch": 3}"#).unwrap();
        assert!(args(bad.clone()).resolve().is_err());
        std::fs::write(&bad, r#"{"definition": "net.json", "lr": -1}"#).unwrap();
        assert!(args(bad.clone()).resolve().is_err());
        std::fs::write(&bad, "3").unwrap();
        assert!(args(bad).resolve().is_err());
    }
}
