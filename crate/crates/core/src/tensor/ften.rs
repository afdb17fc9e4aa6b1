//! `FTEN` binary tensor dumps: magic `FTEN`, u32 LE rank, rank × u32 LE
//! dims, then the values as f64 LE in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FTEN";

pub fn write_ften_to<W: Write>(mut out: W, tensor: &Tensor) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &d in tensor.shape() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in tensor.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_ften_from<R: Read>(mut input: R) -> std::result::Result<Tensor, String> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf).map_err(|e| e.to_string())?;
    parse(&buf)
}

fn parse(buf: &[u8]) -> std::result::Result<Tensor, String> {
    let u32_at = |off: usize| -> std::result::Result<u32, String> {
        buf.get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| "truncated header".to_string())
    };
    if buf.len() < 8 || &buf[..4] != MAGIC {
        return Err("missing FTEN magic".into());
    }
    let rank = u32_at(4)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(u32_at(8 + 4 * i)? as usize);
    }
    let start = 8 + 4 * rank;
    let count: usize = shape.iter().product();
    let body = &buf[start..];
    if body.len() != count * 8 {
        return Err(format!(
            "expected {} value bytes for shape {shape:?}, found {}",
            count * 8,
            body.len()
        ));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write_ften(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + 4 * tensor.rank() + 8 * tensor.numel());
    write_ften_to(&mut bytes, tensor).map_err(|e| Error::io(path, e))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ften(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|reason| Error::data(path, reason))
}
