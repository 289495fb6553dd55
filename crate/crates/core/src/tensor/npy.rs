//! NPY v1.0 reader and writer.
//!
//! Files are written with `fortran_order: True`, so the tensor buffer is the
//! file body verbatim. C-order files are accepted on read and reordered.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DType, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

fn descr(dtype: DType) -> &'static str {
    match dtype {
        DType::F32 => "<f4",
        DType::F64 => "<f8",
        DType::I32 => "<i4",
        DType::U8 => "|u1",
        DType::Logical => "|b1",
    }
}

fn parse_descr(s: &str) -> Result<DType> {
    Ok(match s {
        "<f4" => DType::F32,
        "<f8" => DType::F64,
        "<i4" => DType::I32,
        "|u1" | "<u1" => DType::U8,
        "|b1" => DType::Logical,
        other => return Err(Error::Npy(format!("unsupported descr '{other}'"))),
    })
}

/// The padded header dict, including the trailing newline.
pub fn header(dtype: DType, shape: &[usize]) -> String {
    let shape_str = match shape {
        [n] => format!("({n},)"),
        _ => format!("({})", shape.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")),
    };
    let mut h = format!("{{'descr': '{}', 'fortran_order': True, 'shape': {}, }}", descr(dtype), shape_str);
    // magic(6) + version(2) + length(2) + dict + '\n'
    let total = 10 + h.len() + 1;
    h.push_str(&" ".repeat((ALIGN - total % ALIGN) % ALIGN));
    h.push('\n');
    h
}

pub fn write<W: Write>(t: &Tensor, mut sink: W) -> Result<()> {
    let body = t.to_bytes()?;
    let h = header(t.dtype(), t.shape());
    sink.write_all(MAGIC)?;
    sink.write_all(&[1, 0])?;
    sink.write_all(&(h.len() as u16).to_le_bytes())?;
    sink.write_all(h.as_bytes())?;
    sink.write_all(&body)?;
    sink.flush()?;
    Ok(())
}

pub fn to_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(128 + t.numel() * t.dtype().width());
    write(t, &mut out)?;
    Ok(out)
}

pub fn save(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write(t, BufWriter::new(File::create(path)?))
}

struct Header {
    dtype: DType,
    fortran_order: bool,
    shape: Vec<usize>,
}

fn dict_value<'a>(dict: &'a str, key: &str) -> Result<&'a str> {
    let needle = format!("'{key}'");
    let start = dict.find(&needle).ok_or_else(|| Error::Npy(format!("header lacks '{key}'")))? + needle.len();
    let rest = dict[start..].trim_start();
    let rest = rest.strip_prefix(':').ok_or_else(|| Error::Npy(format!("malformed entry for '{key}'")))?.trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')').map(|i| i + 1)
    } else if let Some(quoted) = rest.strip_prefix('\'') {
        quoted.find('\'').map(|i| i + 2)
    } else {
        rest.find([',', '}'])
    };
    let end = end.ok_or_else(|| Error::Npy(format!("malformed entry for '{key}'")))?;
    Ok(rest[..end].trim())
}

fn parse_header(dict: &str) -> Result<Header> {
    let dict = dict.trim();
    if !dict.starts_with('{') || !dict.ends_with('}') {
        return Err(Error::Npy("header is not a dict".into()));
    }
    let d = dict_value(dict, "descr")?;
    let dtype = parse_descr(d.trim_matches('\''))?;
    let fortran_order = match dict_value(dict, "fortran_order")? {
        "True" => true,
        "False" => false,
        other => return Err(Error::Npy(format!("bad fortran_order '{other}'"))),
    };
    let s = dict_value(dict, "shape")?;
    let inner = s.strip_prefix('(').and_then(|s| s.strip_suffix(')')).ok_or_else(|| Error::Npy("bad shape".into()))?;
    let mut shape = inner
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<usize>().map_err(|_| Error::Npy(format!("bad extent '{p}'"))))
        .collect::<Result<Vec<_>>>()?;
    if shape.is_empty() {
        shape.push(1);
    }
    Ok(Header { dtype, fortran_order, shape })
}

pub fn read<R: Read>(mut source: R) -> Result<Tensor> {
    let mut magic = [0u8; 6];
    source.read_exact(&mut magic).map_err(|_| Error::Npy("truncated magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Npy("bad magic".into()));
    }
    let mut version = [0u8; 2];
    source.read_exact(&mut version)?;
    let header_len = match version[0] {
        1 => {
            let mut b = [0u8; 2];
            source.read_exact(&mut b)?;
            u16::from_le_bytes(b) as usize
        }
        2 | 3 => {
            let mut b = [0u8; 4];
            source.read_exact(&mut b)?;
            u32::from_le_bytes(b) as usize
        }
        v => return Err(Error::Npy(format!("unsupported version {v}.{}", version[1]))),
    };
    let mut h = vec![0u8; header_len];
    source.read_exact(&mut h)?;
    let h = std::str::from_utf8(&h).map_err(|_| Error::Npy("header is not text".into()))?;
    let header = parse_header(h)?;
    if header.shape.iter().any(|&e| e == 0) {
        return Err(Error::Npy(format!("empty arrays are not supported: {:?}", header.shape)));
    }
    let n: usize = header.shape.iter().product();
    let mut body = vec![0u8; n * header.dtype.width()];
    source.read_exact(&mut body).map_err(|_| Error::Npy("truncated data".into()))?;
    if header.fortran_order || header.shape.len() == 1 {
        Tensor::from_bytes(&header.shape, header.dtype, &body)
    } else {
        // C order is column-major over the reversed shape
        let rev: Vec<usize> = header.shape.iter().rev().copied().collect();
        let t = Tensor::from_bytes(&rev, header.dtype, &body)?;
        let order: Vec<usize> = (1..=rev.len()).rev().collect();
        t.permute(&order)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
    read(bytes)
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::Npy(format!("{}: {e}", path.display())))?;
    read(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::zeros(&[2, 3], DType::F32).unwrap();
        let bytes = to_bytes(&t).unwrap();
        assert_eq!(&bytes[..6], MAGIC);
        assert_eq!(&bytes[6..8], &[1, 0]);
        let hl = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + hl) % 64, 0);
        let h = std::str::from_utf8(&bytes[10..10 + hl]).unwrap();
        assert!(h.contains("'fortran_order': True"));
        assert!(h.contains("'descr': '<f4'"));
        assert!(h.contains("'shape': (2, 3)"));
        assert!(h.ends_with('\n'));
        assert_eq!(bytes.len(), 10 + hl + 24);
    }

    #[test]
    fn bad_magic() {
        assert!(matches!(from_bytes(b"BAD"), Err(Error::Npy(_))));
        assert!(matches!(from_bytes(b"BADBADBADBAD"), Err(Error::Npy(_))));
    }

    #[test]
    fn c_order_is_reordered() {
        // numpy.arange(6, dtype='<i4').reshape(2, 3), C order
        let dict = "{'descr': '<i4', 'fortran_order': False, 'shape': (2, 3), }";
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&[1, 0]);
        bytes.extend_from_slice(&(dict.len() as u16).to_le_bytes());
        bytes.extend_from_slice(dict.as_bytes());
        for i in 0..6i32 {
            bytes.extend_from_slice(&i.to_le_bytes());
        }
        let t = from_bytes(&bytes).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.at(&[1, 2]).unwrap(), 1.0);
        assert_eq!(t.at(&[2, 1]).unwrap(), 3.0);
    }

    #[test]
    fn unsupported_descr() {
        let dict = "{'descr': '<c8', 'fortran_order': True, 'shape': (1,), }";
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&[1, 0]);
        bytes.extend_from_slice(&(dict.len() as u16).to_le_bytes());
        bytes.extend_from_slice(dict.as_bytes());
        bytes.extend_from_slice(&[0; 8]);
        assert!(matches!(from_bytes(&bytes), Err(Error::Npy(_))));
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        let shape = proptest::collection::vec(1usize..6, 1..4);
        (shape, 0u8..4, any::<u64>()).prop_map(|(shape, kind, seed)| {
            let n: usize = shape.iter().product();
            let mut s = seed;
            let mut next = move || {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                s
            };
            match kind {
                0 => Tensor::from_vec(&shape, (0..n).map(|_| f32::from_bits(next() as u32)).collect()).unwrap(),
                1 => Tensor::from_vec(&shape, (0..n).map(|_| f64::from_bits(next())).collect()).unwrap(),
                2 => Tensor::from_vec(&shape, (0..n).map(|_| next() as i32).collect()).unwrap(),
                _ => Tensor::from_vec(&shape, (0..n).map(|_| next() as u8).collect()).unwrap(),
            }
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(t in arb_tensor()) {
            let back = from_bytes(&to_bytes(&t).unwrap()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert_eq!(back.dtype(), t.dtype());
            prop_assert_eq!(back.to_bytes().unwrap(), t.to_bytes().unwrap());
        }
    }
}
