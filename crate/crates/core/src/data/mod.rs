//! IDX (MNIST distribution format) reading and conversion to NPY pairs.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};

use crate::error::{Error, Result};
use crate::layers::Dataset;
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

fn magic<R: Read>(r: &mut R, want: u32, what: &str) -> Result<()> {
    let m = r.read_u32::<BigEndian>()?;
    if m != want {
        return Err(Error::Dataset(format!("{what}: magic {m:#010x}, expected {want:#010x}")));
    }
    Ok(())
}

/// Images as a u8 tensor `[rows, cols, 1, count]` in column-major order.
pub fn read_images<R: Read>(mut r: R) -> Result<Tensor> {
    magic(&mut r, IMAGES_MAGIC, "IDX images")?;
    let count = r.read_u32::<BigEndian>()? as usize;
    let rows = r.read_u32::<BigEndian>()? as usize;
    let cols = r.read_u32::<BigEndian>()? as usize;
    let per = rows * cols;
    let mut raw = vec![0u8; per * count];
    r.read_exact(&mut raw).map_err(|_| Error::Dataset("IDX images: truncated pixel data".into()))?;
    let mut out = vec![0u8; raw.len()];
    for (src, dst) in raw.chunks_exact(per).zip(out.chunks_exact_mut(per)) {
        for y in 0..rows {
            for x in 0..cols {
                dst[y + rows * x] = src[x + cols * y];
            }
        }
    }
    Tensor::from_vec(&[rows, cols, 1, count], out)
}

/// Labels as an i32 tensor `[1, count]`.
pub fn read_labels<R: Read>(mut r: R) -> Result<Tensor> {
    magic(&mut r, LABELS_MAGIC, "IDX labels")?;
    let count = r.read_u32::<BigEndian>()? as usize;
    let mut raw = vec![0u8; count];
    r.read_exact(&mut raw).map_err(|_| Error::Dataset("IDX labels: truncated".into()))?;
    Tensor::from_vec(&[1, count], raw.into_iter().map(i32::from).collect())
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let data = read_images(open(images.as_ref())?)?;
    let label = read_labels(open(labels.as_ref())?)?;
    let (n, m) = (data.extent(3), label.numel());
    if n != m {
        return Err(Error::Dataset(format!("{n} images but {m} labels")));
    }
    Dataset::new(data, label)
}

/// Convert an IDX image/label pair into `{out_prefix}_data.npy` and
/// `{out_prefix}_label.npy`. Returns the sample count.
pub fn ingest_mnist(images: impl AsRef<Path>, labels: impl AsRef<Path>, out_prefix: impl AsRef<Path>) -> Result<usize> {
    let ds = load_idx(images, labels)?;
    ds.save(out_prefix)?;
    Ok(ds.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(count: u32, rows: u32, cols: u32) -> Vec<u8> {
        let mut v = Vec::new();
        for w in [IMAGES_MAGIC, count, rows, cols] {
            v.extend_from_slice(&w.to_be_bytes());
        }
        v.extend((0..count * rows * cols).map(|i| i as u8));
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = LABELS_MAGIC.to_be_bytes().to_vec();
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn images_are_transposed_to_column_major() {
        // one 2x3 image, row-major 0 1 2 / 3 4 5
        let t = read_images(&idx_images(1, 2, 3)[..]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 1, 1]);
        assert_eq!(t.data::<u8>().unwrap(), &[0, 3, 1, 4, 2, 5]);
        assert_eq!(t.at(&[1, 3]).unwrap(), 2.0);
    }

    #[test]
    fn magic_is_checked() {
        assert!(read_images(&idx_labels(&[1, 2])[..]).is_err());
        assert!(read_labels(&idx_images(1, 2, 2)[..]).is_err());
    }

    #[test]
    fn ingest_round_trip_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (im, lb, bad) = (dir.path().join("im"), dir.path().join("lb"), dir.path().join("bad"));
        std::fs::write(&im, idx_images(3, 2, 2)).unwrap();
        std::fs::write(&lb, idx_labels(&[4, 5, 6])).unwrap();
        std::fs::write(&bad, idx_labels(&[4, 5])).unwrap();
        assert_eq!(ingest_mnist(&im, &lb, dir.path().join("set")).unwrap(), 3);
        let ds = Dataset::load(dir.path().join("set")).unwrap();
        assert_eq!(ds.labels().data::<i32>().unwrap(), &[4, 5, 6]);
        assert!(ingest_mnist(&im, &bad, dir.path().join("x")).is_err());
        assert!(ingest_mnist(&lb, &lb, dir.path().join("y")).is_err());
    }
}
