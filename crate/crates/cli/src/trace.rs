//! The `ZTRC1` latent-trace file format.
//!
//! Layout: magic `ZTRC1`, u32 little-endian step count, then per step a u32
//! timestep followed by one tensor record in the checkpoint record format
//! (name length + name, rank, u32 extents, f32 little-endian values).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use cyclediff_core::sampler::LatentTrace;
use cyclediff_core::Tensor;

use crate::error::{AppError, AppResult};

pub const MAGIC: &[u8; 5] = b"ZTRC1";

pub fn write_trace(trace: &LatentTrace<f32>, path: &Path) -> AppResult<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(trace.len() as u32).to_le_bytes());
    for (n, z) in trace.steps() {
        buf.extend_from_slice(&(*n as u32).to_le_bytes());
        let name = b"z";
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(z.shape().len() as u32).to_le_bytes());
        for &e in z.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in z.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_trace(path: &Path) -> AppResult<LatentTrace<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail = |m: &str| AppError::config(format!("{}: {m}", path.display()));
    if bytes.len() < 9 || &bytes[..5] != MAGIC {
        return Err(fail("bad magic"));
    }
    let mut off = 5usize;
    let take_u32 = |off: &mut usize| -> AppResult<u32> {
        if *off + 4 > bytes.len() {
            return Err(fail("truncated"));
        }
        let v = u32::from_le_bytes(bytes[*off..*off + 4].try_into().unwrap());
        *off += 4;
        Ok(v)
    };
    let count = take_u32(&mut off)? as usize;
    let mut steps = Vec::with_capacity(count);
    for _ in 0..count {
        let n = take_u32(&mut off)? as usize;
        let nlen = take_u32(&mut off)? as usize;
        off += nlen; // record name, unused on read
        let rank = take_u32(&mut off)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(take_u32(&mut off)? as usize);
        }
        let numel: usize = shape.iter().product();
        if off + 4 * numel > bytes.len() {
            return Err(fail("truncated payload"));
        }
        let data: Vec<f32> = bytes[off..off + 4 * numel]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off += 4 * numel;
        steps.push((n, Tensor::from_vec(&shape, data).map_err(|e| fail(&e.to_string()))?));
    }
    LatentTrace::new(steps).map_err(|e| AppError::config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn trace_roundtrip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.ztrc");
        let z = |s: u64| Tensor::from_fn(&[1, 1, 2, 2, 2], |i| (i as f32 + s as f32) * 0.1);
        let trace = LatentTrace::new(vec![(16, z(1)), (8, z(2)), (4, z(3))]).unwrap();
        write_trace(&trace, &p).unwrap();
        let back = read_trace(&p).unwrap();
        assert_eq!(back.len(), 3);
        for ((n1, z1), (n2, z2)) in trace.steps().iter().zip(back.steps()) {
            assert_eq!(n1, n2);
            assert_eq!(z1, z2);
        }
    }
}
