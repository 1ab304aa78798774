//! Binary feature files.
//!
//! Layout (all little-endian):
//!
//! | offset | size | field                      |
//! |--------|------|----------------------------|
//! | 0      | 4    | magic `b"VSTG"`            |
//! | 4      | 4    | version (`u32`, always 1)  |
//! | 8      | 4    | rows (`u32`)               |
//! | 12     | 4    | cols (`u32`)               |
//! | 16     | 4·rows·cols | `f32` payload, row-major |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 4] = b"VSTG";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    if t.shape().len() != 2 {
        return Err(Error::Shape {
            op: "feature_file",
            lhs: t.shape().to_vec(),
            rhs: vec![2],
        });
    }
    if !t.is_finite() {
        return Err(Error::NonFinite("feature file payload".into()));
    }
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let to_u32 = |v: usize| {
        u32::try_from(v).map_err(|_| Error::Config(format!("extent {v} does not fit in u32")))
    };
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * t.numel());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&to_u32(rows)?.to_le_bytes());
    buf.extend_from_slice(&to_u32(cols)?.to_le_bytes());
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(buf)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let fmt = |offset: usize, message: &str| Error::Format {
        offset: offset as u64,
        message: message.to_string(),
    };
    if bytes.len() < HEADER_LEN {
        return Err(fmt(bytes.len(), "truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fmt(0, "bad magic"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(fmt(4, &format!("unsupported version {version}")));
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fmt(8, "payload size overflows"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(fmt(
            bytes.len(),
            &format!("truncated payload: expected {expected} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(fmt(HEADER_LEN + expected, "trailing bytes after payload"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(vec![rows, cols], data)
}

pub fn write_feature_file(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(t)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
