//! Binary matrix files used for per-clip audio and expression data.
//!
//! Layout (little endian):
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `SHMX`                  |
//! | 4      | 2    | format version, currently 1   |
//! | 6      | 1    | dtype, 1 = f64                |
//! | 7      | 1    | reserved, 0                   |
//! | 8      | 4    | rows (u32)                    |
//! | 12     | 4    | cols (u32)                    |
//! | 16     | 8·r·c| row-major f64 values          |

use std::path::Path;

use crate::error::{Error, Result};
use crate::tape::Mat;

const MAGIC: &[u8; 4] = b"SHMX";
const VERSION: u16 = 1;
const DTYPE_F64: u8 = 1;
const HEADER: usize = 16;

pub fn encode(m: &Mat) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 8 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F64);
    out.push(0);
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for x in m.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Mat, String> {
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        return Err("not a matrix file".into());
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    if bytes[6] != DTYPE_F64 {
        return Err(format!("unsupported dtype tag {}", bytes[6]));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[HEADER..];
    if body.len() != rows * cols * 8 {
        return Err(format!("expected {} data bytes for {rows}x{cols}, found {}", rows * cols * 8, body.len()));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Mat::from_shape_vec((rows, cols), data).map_err(|e| e.to_string())
}

pub fn write(path: &Path, m: &Mat) -> Result<()> {
    std::fs::write(path, encode(m)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Mat> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|msg| Error::format(path, msg))
}
