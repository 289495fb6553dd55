//! Per-tensor payload codecs: raw little-endian f32, or signed 8-bit with a
//! single f32 scale `max|x| / 127`.

use std::fmt;
use std::str::FromStr;

use byteorder::{ByteOrder, LittleEndian as LE};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Codec {
    Raw,
    Q8,
}

impl Codec {
    pub fn tag(self) -> u8 {
        match self {
            Codec::Raw => 0,
            Codec::Q8 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Codec> {
        match tag {
            0 => Ok(Codec::Raw),
            1 => Ok(Codec::Q8),
            t => Err(Error::Protocol(format!("unknown codec tag {t}"))),
        }
    }

    /// Encoded bytes for one tensor of `n` elements, excluding the u32 count.
    pub fn payload_len(self, n: usize) -> usize {
        match self {
            Codec::Raw => 4 * n,
            Codec::Q8 => 4 + n,
        }
    }
}

impl fmt::Display for Codec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Codec::Raw => "raw",
            Codec::Q8 => "q8",
        })
    }
}

impl FromStr for Codec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Codec> {
        match s {
            "raw" | "raw_f32" => Ok(Codec::Raw),
            "q8" => Ok(Codec::Q8),
            other => Err(Error::InvalidArgument(format!("unknown codec `{other}`"))),
        }
    }
}

pub fn quantize_q8(x: &[f32]) -> Result<(f32, Vec<i8>)> {
    let mut max = 0.0f32;
    for &v in x {
        if !v.is_finite() {
            return Err(Error::InvalidArgument("q8 input contains a non-finite value".into()));
        }
        max = max.max(v.abs());
    }
    let scale = if max == 0.0 { 1.0 } else { max / 127.0 };
    let q = x.iter().map(|&v| (v / scale).round().clamp(-127.0, 127.0) as i8).collect();
    Ok((scale, q))
}

pub fn dequantize_q8(scale: f32, q: &[i8]) -> Vec<f32> {
    q.iter().map(|&b| b as f32 * scale).collect()
}

/// Append `u32 count` followed by the codec payload for `x`.
pub fn encode_into(out: &mut Vec<u8>, x: &[f32], codec: Codec) -> Result<()> {
    out.extend_from_slice(&(x.len() as u32).to_le_bytes());
    match codec {
        Codec::Raw => {
            let start = out.len();
            out.resize(start + 4 * x.len(), 0);
            LE::write_f32_into(x, &mut out[start..]);
        }
        Codec::Q8 => {
            let (scale, q) = quantize_q8(x)?;
            out.extend_from_slice(&scale.to_le_bytes());
            out.extend(q.into_iter().map(|b| b as u8));
        }
    }
    Ok(())
}

/// Decode one tensor written by [`encode_into`] from the front of `input`,
/// advancing it.
pub fn decode_from(input: &mut &[u8], codec: Codec) -> Result<Vec<f32>> {
    let n = take(input, 4).map(LE::read_u32)? as usize;
    match codec {
        Codec::Raw => {
            let raw = take(input, 4 * n)?;
            let mut v = vec![0f32; n];
            LE::read_f32_into(raw, &mut v);
            Ok(v)
        }
        Codec::Q8 => {
            let scale = take(input, 4).map(LE::read_f32)?;
            let q: Vec<i8> = take(input, n)?.iter().map(|&b| b as i8).collect();
            Ok(dequantize_q8(scale, &q))
        }
    }
}

pub(crate) fn take<'a>(input: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if input.len() < n {
        return Err(Error::Protocol(format!("frame truncated: need {n} bytes, have {}", input.len())));
    }
    let (head, rest) = input.split_at(n);
    *input = rest;
    Ok(head)
}
