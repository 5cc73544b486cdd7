//! On-disk tensor container.
//!
//! Layout, all little-endian, no padding or compression:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "GTAQ"
//! 4       1     format version, 0x01
//! 5       1     dtype tag: 0 = f32, 1 = f64
//! 6       4     rank as u32, always 2
//! 10      8     rows as u64
//! 18      8     cols as u64
//! 26      ...   row-major payload, rows*cols elements
//! ```
//!
//! Writing narrows values to the matrix dtype; reading widens back to f64.
//! A write/read round trip of a matrix whose values are representable at
//! its dtype is bit-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Matrix};

pub const MAGIC: [u8; 4] = *b"GTAQ";
pub const VERSION: u8 = 0x01;
const HEADER_LEN: usize = 26;

pub fn write_tensor(path: &Path, m: &Matrix) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    encode_tensor(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Matrix> {
    let file = File::open(path)
        .map_err(|e| Error::from(e).annotate(path.display().to_string()))?;
    decode_tensor(&mut BufReader::new(file))
}

pub fn encode_tensor<W: Write>(w: &mut W, m: &Matrix) -> Result<()> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::EmptyTensor {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    w.write_all(&MAGIC)?;
    w.write_all(&[VERSION, m.dtype().tag()])?;
    w.write_all(&2u32.to_le_bytes())?;
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    match m.dtype() {
        Dtype::F32 => {
            for &v in m.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for &v in m.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn decode_tensor<R: Read>(r: &mut R) -> Result<Matrix> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format("truncated header".into()))?;
    if header[0..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x?}, expected {:02x?}",
            &header[0..4],
            MAGIC
        )));
    }
    if header[4] != VERSION {
        return Err(Error::Format(format!(
            "unsupported version 0x{:02x}, expected 0x{VERSION:02x}",
            header[4]
        )));
    }
    let dtype = Dtype::from_tag(header[5])?;
    let rank = u32::from_le_bytes(header[6..10].try_into().unwrap());
    if rank != 2 {
        return Err(Error::Format(format!("unsupported rank {rank}, only rank 2")));
    }
    let rows = u64::from_le_bytes(header[10..18].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(header[18..26].try_into().unwrap()) as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyTensor { rows, cols });
    }
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("element count overflows".into()))?;
    let expected = count * dtype.byte_width();
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, expected {expected} ({rows}x{cols} {dtype})",
            payload.len()
        )));
    }
    let mut data = Vec::with_capacity(count);
    match dtype {
        Dtype::F32 => {
            for chunk in payload.chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
        Dtype::F64 => {
            for chunk in payload.chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
    }
    Matrix::from_vec(rows, cols, dtype, data)
}
