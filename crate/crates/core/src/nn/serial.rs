//! Flat binary snapshots for parameter vectors and optimizer state.
//!
//! Layout: a 16-byte header (8-byte magic, u32 version, u32 element count,
//! all little-endian) followed by the payload. JSON export is available for
//! debugging.

use super::{AdamState, ParamVector};
use crate::error::{Error, Result};

const PARAM_MAGIC: &[u8; 8] = b"CAPOPAR\0";
const ADAM_MAGIC: &[u8; 8] = b"CAPOADM\0";
const VERSION: u32 = 1;

fn header(magic: &[u8; 8], len: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(16);
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    out
}

fn parse_header<'a>(magic: &[u8; 8], bytes: &'a [u8]) -> Result<(usize, &'a [u8])> {
    if bytes.len() < 16 {
        return Err(Error::Decode("snapshot shorter than header".into()));
    }
    if &bytes[..8] != magic {
        return Err(Error::Decode("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Decode(format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    Ok((len, &bytes[16..]))
}

fn write_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_f64s(bytes: &[u8], n: usize) -> Result<(Vec<f64>, &[u8])> {
    if bytes.len() < 8 * n {
        return Err(Error::Decode("truncated payload".into()));
    }
    let xs = bytes[..8 * n]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((xs, &bytes[8 * n..]))
}

impl ParamVector {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = header(PARAM_MAGIC, self.len() as u32);
        write_f64s(&mut out, &self.0);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (len, rest) = parse_header(PARAM_MAGIC, bytes)?;
        let (values, _) = read_f64s(rest, len)?;
        Ok(ParamVector(values))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("param vector serializes")
    }
}

impl AdamState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = header(ADAM_MAGIC, self.len() as u32);
        write_f64s(&mut out, &self.first_moment);
        write_f64s(&mut out, &self.second_moment);
        out.extend_from_slice(&self.step_count.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (len, rest) = parse_header(ADAM_MAGIC, bytes)?;
        let (first_moment, rest) = read_f64s(rest, len)?;
        let (second_moment, rest) = read_f64s(rest, len)?;
        if rest.len() < 8 {
            return Err(Error::Decode("missing step counter".into()));
        }
        let step_count = u64::from_le_bytes(rest[..8].try_into().unwrap());
        Ok(AdamState {
            first_moment,
            second_moment,
            step_count,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("adam state serializes")
    }
}
