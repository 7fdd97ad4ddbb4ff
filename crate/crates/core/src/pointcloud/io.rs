//! Frame sequence file: `PCSQ1`, frame count, then per frame the timestamp
//! (f64), pose (9 rotation entries row-major then 3 translation, f64),
//! point count, and 5 little-endian f32 per point. Counts are u64 LE.

use std::io::{Read, Write};
use std::path::Path;

use super::{Frame, LidarPoint, Pose};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"PCSQ1";

pub fn write_frames_to<W: Write>(mut w: W, frames: &[Frame]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(frames.len() as u64).to_le_bytes())?;
    for f in frames {
        w.write_all(&f.timestamp.to_le_bytes())?;
        for v in f.pose.rotation.iter().flatten().chain(&f.pose.translation) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(f.points.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(20 * f.points.len());
        for p in &f.points {
            for v in p.features() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn take<const N: usize, R: Read>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("frame file truncated in {what}")),
        _ => Error::Io(e),
    })?;
    Ok(b)
}

pub fn read_frames_from<R: Read>(mut r: R) -> Result<Vec<Frame>> {
    if &take::<5, _>(&mut r, "magic")? != MAGIC {
        return Err(Error::Format("bad frame file magic".into()));
    }
    let count = u64::from_le_bytes(take(&mut r, "frame count")?);
    let mut frames = Vec::new();
    for _ in 0..count {
        let timestamp = f64::from_le_bytes(take(&mut r, "timestamp")?);
        let mut vals = [0.0f64; 12];
        for v in vals.iter_mut() {
            *v = f64::from_le_bytes(take(&mut r, "pose")?);
        }
        let pose = Pose {
            rotation: [[vals[0], vals[1], vals[2]], [vals[3], vals[4], vals[5]], [vals[6], vals[7], vals[8]]],
            translation: [vals[9], vals[10], vals[11]],
        };
        let n = u64::from_le_bytes(take(&mut r, "point count")?);
        if n > 1 << 32 {
            return Err(Error::Format(format!("implausible point count {n}")));
        }
        let mut raw = vec![0u8; 20 * n as usize];
        r.read_exact(&mut raw).map_err(|_| Error::Format("frame file truncated in points".into()))?;
        let points = raw
            .chunks_exact(20)
            .map(|c| {
                let f = |i: usize| f32::from_le_bytes([c[4 * i], c[4 * i + 1], c[4 * i + 2], c[4 * i + 3]]) as f64;
                LidarPoint::new(f(0), f(1), f(2), f(3), f(4))
            })
            .collect();
        frames.push(Frame { points, pose, timestamp });
    }
    Ok(frames)
}

pub fn write_frames(frames: &[Frame], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_frames_to(std::io::BufWriter::new(f), frames)
}

pub fn read_frames(path: &Path) -> Result<Vec<Frame>> {
    let f = std::fs::File::open(path)?;
    read_frames_from(std::io::BufReader::new(f))
}
