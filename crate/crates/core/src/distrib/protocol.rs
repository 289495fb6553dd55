//! Binary frames exchanged over the worker connection. Every frame starts
//! with a 4-byte magic; all integers are little-endian.
//!
//! | magic  | direction       | body                                                     |
//! |--------|-----------------|----------------------------------------------------------|
//! | `SKHL` | worker → server | version u32, worker_id u32, token (u16 length + UTF-8)   |
//! | `SKAK` | server → worker | worker_id u32                                            |
//! | `SKER` | server → worker | message (u16 length + UTF-8)                             |
//! | `SKGP` | worker → server | t u32, worker_id u32, n_K u32, codec u8, tensors         |
//! | `SKWB` | server → worker | t u32, codec u8, weights (u32 length + bytes), split     |
//! | `SKDN` | server → worker | t u32; training finished                                 |
//!
//! A split is a mode byte followed by either `u32 count + u32 indices`
//! (mode 0) or two length-prefixed NPY bodies, data then label (mode 1).

use byteorder::{ByteOrder, LittleEndian as LE};

use super::codec::{decode_from, encode_into, take, Codec};
use crate::error::{Error, Result};
use crate::graph::Network;
use crate::tensor::Tensor;

pub const PROTOCOL_VERSION: u32 = 1;

pub const HELLO: &[u8; 4] = b"SKHL";
pub const ACK: &[u8; 4] = b"SKAK";
pub const ERROR: &[u8; 4] = b"SKER";
pub const GRADIENT: &[u8; 4] = b"SKGP";
pub const ROUND: &[u8; 4] = b"SKWB";
pub const DONE: &[u8; 4] = b"SKDN";

#[derive(Clone, Debug, PartialEq)]
pub struct Hello {
    pub version: u32,
    /// 0 asks the server to assign one.
    pub worker_id: u32,
    pub token: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientPacket {
    pub t: u32,
    pub worker_id: u32,
    pub n_k: u32,
    pub codec: Codec,
    /// Decoded values, one vector per learnable tensor in registry order.
    pub tensors: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Split {
    Indices(Vec<u32>),
    Inline { data: Vec<u8>, label: Vec<u8> },
}

impl Split {
    pub fn len_hint(&self) -> Option<usize> {
        match self {
            Split::Indices(v) => Some(v.len()),
            Split::Inline { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundFrame {
    pub t: u32,
    pub codec: Codec,
    pub weights: Vec<u8>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Frame {
    Hello(Hello),
    Ack { worker_id: u32 },
    Error(String),
    Gradient(GradientPacket),
    Round(RoundFrame),
    Done { t: u32 },
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let n = u16::try_from(s.len()).map_err(|_| Error::Protocol("string longer than 65535 bytes".into()))?;
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_blob(out: &mut Vec<u8>, b: &[u8]) -> Result<()> {
    let n = u32::try_from(b.len()).map_err(|_| Error::Protocol("payload larger than 4 GiB".into()))?;
    put_u32(out, n);
    out.extend_from_slice(b);
    Ok(())
}

fn get_u32(input: &mut &[u8]) -> Result<u32> {
    take(input, 4).map(LE::read_u32)
}

fn get_u8(input: &mut &[u8]) -> Result<u8> {
    take(input, 1).map(|b| b[0])
}

fn get_str(input: &mut &[u8]) -> Result<String> {
    let n = take(input, 2).map(LE::read_u16)? as usize;
    String::from_utf8(take(input, n)?.to_vec()).map_err(|_| Error::Protocol("string is not UTF-8".into()))
}

fn get_blob(input: &mut &[u8]) -> Result<Vec<u8>> {
    let n = get_u32(input)? as usize;
    Ok(take(input, n)?.to_vec())
}

/// Encode a gradient frame straight from tensors.
pub fn encode_gradient(t: u32, worker_id: u32, n_k: u32, codec: Codec, grads: &[&Tensor]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(17 + grads.iter().map(|g| 4 + codec.payload_len(g.numel())).sum::<usize>());
    out.extend_from_slice(GRADIENT);
    put_u32(&mut out, t);
    put_u32(&mut out, worker_id);
    put_u32(&mut out, n_k);
    out.push(codec.tag());
    for g in grads {
        encode_into(&mut out, g.data::<f32>()?, codec)?;
    }
    Ok(out)
}

impl Frame {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        match self {
            Frame::Hello(h) => {
                out.extend_from_slice(HELLO);
                put_u32(&mut out, h.version);
                put_u32(&mut out, h.worker_id);
                put_str(&mut out, &h.token)?;
            }
            Frame::Ack { worker_id } => {
                out.extend_from_slice(ACK);
                put_u32(&mut out, *worker_id);
            }
            Frame::Error(msg) => {
                out.extend_from_slice(ERROR);
                put_str(&mut out, msg)?;
            }
            Frame::Gradient(p) => {
                out.extend_from_slice(GRADIENT);
                put_u32(&mut out, p.t);
                put_u32(&mut out, p.worker_id);
                put_u32(&mut out, p.n_k);
                out.push(p.codec.tag());
                for v in &p.tensors {
                    encode_into(&mut out, v, p.codec)?;
                }
            }
            Frame::Round(r) => {
                out.extend_from_slice(ROUND);
                put_u32(&mut out, r.t);
                out.push(r.codec.tag());
                put_blob(&mut out, &r.weights)?;
                match &r.split {
                    Split::Indices(idx) => {
                        out.push(0);
                        put_u32(&mut out, idx.len() as u32);
                        for &i in idx {
                            put_u32(&mut out, i);
                        }
                    }
                    Split::Inline { data, label } => {
                        out.push(1);
                        put_blob(&mut out, data)?;
                        put_blob(&mut out, label)?;
                    }
                }
            }
            Frame::Done { t } => {
                out.extend_from_slice(DONE);
                put_u32(&mut out, *t);
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame> {
        let mut input = bytes;
        let magic: [u8; 4] = take(&mut input, 4)?.try_into().unwrap();
        let frame = match &magic {
            HELLO => Frame::Hello(Hello {
                version: get_u32(&mut input)?,
                worker_id: get_u32(&mut input)?,
                token: get_str(&mut input)?,
            }),
            ACK => Frame::Ack { worker_id: get_u32(&mut input)? },
            ERROR => Frame::Error(get_str(&mut input)?),
            GRADIENT => {
                let t = get_u32(&mut input)?;
                let worker_id = get_u32(&mut input)?;
                let n_k = get_u32(&mut input)?;
                let codec = Codec::from_tag(get_u8(&mut input)?)?;
                let mut tensors = Vec::new();
                while !input.is_empty() {
                    tensors.push(decode_from(&mut input, codec)?);
                }
                Frame::Gradient(GradientPacket { t, worker_id, n_k, codec, tensors })
            }
            ROUND => {
                let t = get_u32(&mut input)?;
                let codec = Codec::from_tag(get_u8(&mut input)?)?;
                let weights = get_blob(&mut input)?;
                let split = match get_u8(&mut input)? {
                    0 => {
                        let n = get_u32(&mut input)? as usize;
                        let raw = take(&mut input, 4 * n)?;
                        Split::Indices(raw.chunks_exact(4).map(LE::read_u32).collect())
                    }
                    1 => Split::Inline { data: get_blob(&mut input)?, label: get_blob(&mut input)? },
                    m => return Err(Error::Protocol(format!("unknown split mode {m}"))),
                };
                Frame::Round(RoundFrame { t, codec, weights, split })
            }
            DONE => Frame::Done { t: get_u32(&mut input)? },
            m => return Err(Error::Protocol(format!("unknown frame magic {m:?}"))),
        };
        if !input.is_empty() {
            return Err(Error::Protocol(format!("{} trailing bytes after frame", input.len())));
        }
        Ok(frame)
    }
}

/// Weight payload for a ROUND frame: the parameter file for `raw`, or a u32
/// tensor count followed by q8-coded tensors in registry order.
pub fn encode_weights(net: &Network, codec: Codec) -> Result<Vec<u8>> {
    match codec {
        Codec::Raw => net.serialize_params(),
        Codec::Q8 => {
            let params: Vec<&Tensor> = net.params().map(|(_, p)| &p.value).collect();
            let mut out = Vec::new();
            put_u32(&mut out, params.len() as u32);
            for t in params {
                encode_into(&mut out, t.data::<f32>()?, Codec::Q8)?;
            }
            Ok(out)
        }
    }
}

pub fn apply_weights(net: &mut Network, codec: Codec, payload: &[u8]) -> Result<()> {
    match codec {
        Codec::Raw => net.deserialize_params(payload),
        Codec::Q8 => {
            let mut input = payload;
            let count = get_u32(&mut input)? as usize;
            let values = (0..count).map(|_| decode_from(&mut input, Codec::Q8)).collect::<Result<Vec<_>>>()?;
            let shapes: Vec<Vec<usize>> = net.params().map(|(_, p)| p.value.shape().to_vec()).collect();
            if shapes.len() != count || !input.is_empty() {
                return Err(Error::Protocol(format!("q8 weights: {count} tensors for {} parameters", shapes.len())));
            }
            let tensors = values
                .into_iter()
                .zip(&shapes)
                .map(|(v, s)| Tensor::from_vec(s, v))
                .collect::<Result<Vec<_>>>()?;
            for ((_, p), t) in net.params_mut().zip(tensors) {
                p.value = t;
            }
            Ok(())
        }
    }
}
