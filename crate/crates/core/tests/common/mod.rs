#![allow(dead_code)]

pub mod checks;
pub mod cluster;
pub mod grad;

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use flatnet::data::ingest_mnist;

/// Directory holding the four MNIST IDX files: `$MNIST_DIR`, else
/// `<workspace>/data/mnist`.
pub fn mnist_idx_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join("train-images-idx3-ubyte").exists().then_some(dir)
}

/// Ingest MNIST once per test binary; returns the directory holding
/// `mnist_train_*.npy` and `mnist_test_*.npy`.
pub fn mnist_root() -> Option<PathBuf> {
    static ROOT: OnceLock<Option<PathBuf>> = OnceLock::new();
    ROOT.get_or_init(|| {
        let idx = mnist_idx_dir()?;
        let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("mnist-npy");
        std::fs::create_dir_all(&out).ok()?;
        if !out.join("mnist_test_label.npy").exists() {
            ingest_mnist(idx.join("train-images-idx3-ubyte"), idx.join("train-labels-idx1-ubyte"), out.join("mnist_train"))
                .expect("ingest train");
            ingest_mnist(idx.join("t10k-images-idx3-ubyte"), idx.join("t10k-labels-idx1-ubyte"), out.join("mnist_test"))
                .expect("ingest test");
        }
        Some(out)
    })
    .clone()
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`, 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Random MNIST-shaped u8 images with labels 0..9.
pub fn synthetic_digits(n: usize, seed: u64) -> flatnet::layers::Dataset {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<u8> = (0..28 * 28 * n).map(|_| rng.random()).collect();
    let label: Vec<i32> = (0..n).map(|_| rng.random_range(0..10)).collect();
    flatnet::layers::Dataset::new(
        flatnet::Tensor::from_vec(&[28, 28, 1, n], data).unwrap(),
        flatnet::Tensor::from_vec(&[1, n], label).unwrap(),
    )
    .unwrap()
}
