//! Binary parameter file: magic `SKNP`, version u32, tensor count u32, then
//! for each tensor a u16-length UTF-8 name, dtype code u8, ndim u8, u32
//! extents and the raw little-endian elements.

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::Network;
use crate::error::{Error, Result};
use crate::tensor::{same_shape, DType, Tensor};

pub const MAGIC: &[u8; 4] = b"SKNP";
pub const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::ParamFile(msg.into())
}

pub fn write<'a, W: Write>(mut sink: W, entries: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    sink.write_all(MAGIC)?;
    sink.write_u32::<LE>(VERSION)?;
    sink.write_u32::<LE>(entries.len() as u32)?;
    for (name, t) in entries {
        let name_len = u16::try_from(name.len()).map_err(|_| bad(format!("name too long: {name}")))?;
        let ndim = u8::try_from(t.ndim()).map_err(|_| bad(format!("{name} has {} dims", t.ndim())))?;
        sink.write_u16::<LE>(name_len)?;
        sink.write_all(name.as_bytes())?;
        sink.write_u8(t.dtype().code())?;
        sink.write_u8(ndim)?;
        for &e in t.shape() {
            sink.write_u32::<LE>(u32::try_from(e).map_err(|_| bad(format!("{name} extent {e}")))?)?;
        }
        sink.write_all(&t.to_bytes()?)?;
    }
    Ok(())
}

pub fn encode<'a>(entries: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write(&mut out, entries)?;
    Ok(out)
}

pub fn read<R: Read>(mut source: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    source.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let version = source.read_u32::<LE>()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = source.read_u32::<LE>()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut name = vec![0u8; source.read_u16::<LE>()? as usize];
        source.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
        let code = source.read_u8()?;
        let dtype = DType::from_code(code).ok_or_else(|| bad(format!("{name}: unknown dtype code {code}")))?;
        let ndim = source.read_u8()? as usize;
        let shape = (0..ndim).map(|_| source.read_u32::<LE>().map(|e| e as usize)).collect::<std::io::Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * dtype.width()];
        source.read_exact(&mut raw).map_err(|_| bad(format!("{name}: truncated data")))?;
        out.push((name, Tensor::from_bytes(&shape, dtype, &raw)?));
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cursor = bytes;
    let out = read(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(bad(format!("{} trailing bytes", cursor.len())));
    }
    Ok(out)
}

impl Network {
    /// All parameters, including non-learnable state, in registry order.
    pub fn serialize_params(&self) -> Result<Vec<u8>> {
        let entries: Vec<(String, &Tensor)> = self.params().map(|(n, p)| (n, &p.value)).collect();
        encode(entries.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    /// Load parameters written by [`Network::serialize_params`] for the same
    /// definition. Nothing is modified unless every tensor matches.
    pub fn deserialize_params(&mut self, bytes: &[u8]) -> Result<()> {
        let entries = decode(bytes)?;
        {
            let mine: Vec<(String, &Tensor)> = self.params().map(|(n, p)| (n, &p.value)).collect();
            if mine.len() != entries.len() {
                return Err(bad(format!("{} tensors in file, network has {}", entries.len(), mine.len())));
            }
            for ((name, t), (want, have)) in entries.iter().zip(&mine) {
                if name != want {
                    return Err(bad(format!("tensor `{name}` where `{want}` was expected")));
                }
                if t.dtype() != have.dtype() || !same_shape(t.shape(), have.shape()) {
                    return Err(Error::shape(format!(
                        "{name}: file has {:?} {:?}, network has {:?} {:?}",
                        t.dtype(),
                        t.shape(),
                        have.dtype(),
                        have.shape()
                    )));
                }
            }
        }
        for ((_, p), (_, t)) in self.params_mut().zip(entries) {
            p.value = t.reshape(p.value.shape())?;
        }
        Ok(())
    }

    pub fn save_params(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        Ok(std::fs::write(path, self.serialize_params()?)?)
    }

    pub fn load_params(&mut self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.deserialize_params(&std::fs::read(path)?)
    }
}
