//! Checkpoint file: `PFLW1`, a parameter count, then per parameter the name
//! length, UTF-8 name, rank, extents, and raw f32 data. All integers are
//! 64-bit little-endian unsigned; floats are 32-bit little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"PFLW1";

pub fn write<W: Write>(mut w: W, params: &[(String, Tensor<f32>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (name, t) in params {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * t.numel());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("checkpoint truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

const SANE_LIMIT: u64 = 1 << 32;

pub fn read<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 5];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let count = read_u64(&mut r, "parameter count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u64(&mut r, "name length")?;
        if len > 4096 {
            return Err(Error::Format(format!("parameter name length {len}")));
        }
        let mut name = vec![0u8; len as usize];
        read_exact(&mut r, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = read_u64(&mut r, "rank")?;
        if rank > 8 {
            return Err(Error::Format(format!("rank {rank} for {name}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let d = read_u64(&mut r, "extent")?;
            if d == 0 || d > SANE_LIMIT {
                return Err(Error::Format(format!("extent {d} for {name}")));
            }
            shape.push(d as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; 4 * n];
        read_exact(&mut r, &mut raw, "data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

pub fn save(path: &Path, params: &[(String, Tensor<f32>)]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write(std::io::BufWriter::new(f), params)
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let f = std::fs::File::open(path)?;
    read(std::io::BufReader::new(f))
}
