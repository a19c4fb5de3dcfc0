//! CXT1 binary tensor format.
//!
//! Layout (all little-endian): magic `CXT1`, `u32` rank, `rank` x `u64`
//! extents, then row-major interleaved `(re, im)` pairs of `f32`. Values are
//! promoted to `f64` on read.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::ComplexArray;

pub const MAGIC: &[u8; 4] = b"CXT1";

pub fn write_to<W: Write>(mut w: W, x: &ComplexArray) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(x.rank() as u32).to_le_bytes())?;
    for &e in x.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(x.len() * 8);
    for v in x.data() {
        buf.extend_from_slice(&(v.re as f32).to_le_bytes());
        buf.extend_from_slice(&(v.im as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_from<R: Read>(mut r: R) -> Result<ComplexArray> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)
        .map_err(|_| Error::Format("truncated rank".into()))?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8)
            .map_err(|_| Error::Format("truncated extents".into()))?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Format(format!("extents overflow: {shape:?}")))?;
    let mut payload = vec![0u8; n * 8];
    r.read_exact(&mut payload)
        .map_err(|_| Error::Format(format!("payload shorter than {n} elements")))?;
    let data = payload
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
            Complex64::new(re as f64, im as f64)
        })
        .collect();
    ComplexArray::new(shape, data)
}

pub fn write(path: impl AsRef<Path>, x: &ComplexArray) -> Result<()> {
    write_to(BufWriter::new(File::create(path)?), x)
}

pub fn read(path: impl AsRef<Path>) -> Result<ComplexArray> {
    read_from(BufReader::new(File::open(path)?))
}
