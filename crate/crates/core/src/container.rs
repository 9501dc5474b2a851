//! The `TPDMVOL1` array container.
//!
//! Layout: the 8 ASCII bytes `TPDMVOL1`, a little-endian `u32` header
//! length, a UTF-8 JSON header `{"shape":[d1,d2,d3],"dtype":"f32"|"c64"}`,
//! then `d1*d2*d3` little-endian values in row-major order. `c64` values are
//! interleaved `(re, im)` f32 pairs.

use std::fs;
use std::io::Write;
use std::path::Path;

use num_complex::Complex32;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 8] = b"TPDMVOL1";

const MAX_HEADER_LEN: usize = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    C64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    shape: [usize; 3],
    dtype: DType,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    C64(Vec<Complex32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub shape: [usize; 3],
    pub payload: Payload,
}

fn corrupt<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::CorruptFile(msg.into()))
}

impl Container {
    pub fn dtype(&self) -> DType {
        match self.payload {
            Payload::F32(_) => DType::F32,
            Payload::C64(_) => DType::C64,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            shape: self.shape,
            dtype: self.dtype(),
        })
        .expect("header serialises");
        let n: usize = self.shape.iter().product();
        let width = match self.payload {
            Payload::F32(_) => 4,
            Payload::C64(_) => 8,
        };
        let mut out = Vec::with_capacity(12 + header.len() + n * width);
        out.extend_from_slice(VOLUME_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        match &self.payload {
            Payload::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            Payload::C64(v) => {
                for z in v {
                    out.extend_from_slice(&z.re.to_le_bytes());
                    out.extend_from_slice(&z.im.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Container> {
        if bytes.len() < 12 {
            return corrupt("file shorter than magic + header length");
        }
        if &bytes[..8] != VOLUME_MAGIC {
            return corrupt("bad magic, expected TPDMVOL1");
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if hlen > MAX_HEADER_LEN || 12 + hlen > bytes.len() {
            return corrupt(format!("header length {hlen} exceeds file"));
        }
        let header: Header = serde_json::from_slice(&bytes[12..12 + hlen])
            .map_err(|e| Error::CorruptFile(format!("bad header: {e}")))?;
        if header.shape.iter().any(|&d| d == 0) {
            return corrupt(format!("zero extent in shape {:?}", header.shape));
        }
        let width = match header.dtype {
            DType::F32 => 4usize,
            DType::C64 => 8,
        };
        let expected = header
            .shape
            .iter()
            .try_fold(width, |acc, &d| acc.checked_mul(d));
        let body = &bytes[12 + hlen..];
        match expected {
            Some(e) if e == body.len() => {}
            _ => {
                return corrupt(format!(
                    "payload is {} bytes, header {:?}/{:?} implies {}",
                    body.len(),
                    header.shape,
                    header.dtype,
                    expected.map_or("overflow".to_string(), |e| e.to_string())
                ))
            }
        }
        let f = |c: &[u8]| f32::from_le_bytes(c.try_into().unwrap());
        let payload = match header.dtype {
            DType::F32 => Payload::F32(body.chunks_exact(4).map(f).collect()),
            DType::C64 => Payload::C64(
                body.chunks_exact(8)
                    .map(|c| Complex32::new(f(&c[..4]), f(&c[4..])))
                    .collect(),
            ),
        };
        Ok(Container {
            shape: header.shape,
            payload,
        })
    }
}

pub(crate) fn write_file(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}
