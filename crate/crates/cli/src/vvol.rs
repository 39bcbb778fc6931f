//! The `VVOL1` volume file format.
//!
//! Layout: magic `VVOL1`, three u32 little-endian extents (x, y, z), three
//! f32 little-endian spacings in millimetres, one dtype byte (0 = 32-bit
//! float), then the payload as little-endian f32, x fastest.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use cyclediff_core::volume::Volume;
use thiserror::Error;

pub const MAGIC: &[u8; 5] = b"VVOL1";
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum VvolError {
    #[error("bad magic in {0}")]
    BadMagic(String),
    #[error("truncated payload in {0}")]
    Truncated(String),
    #[error("unknown dtype {1} in {0}")]
    UnknownDtype(String, u8),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

pub fn write_volume(v: &Volume, path: &Path) -> Result<(), VvolError> {
    let mut buf = Vec::with_capacity(30 + 4 * v.numel());
    buf.extend_from_slice(MAGIC);
    for e in v.extents() {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for s in v.spacing() {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    buf.push(DTYPE_F32);
    for x in v.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume, VvolError> {
    let name = path.display().to_string();
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 5 || &bytes[..5] != MAGIC {
        return Err(VvolError::BadMagic(name));
    }
    if bytes.len() < 30 {
        return Err(VvolError::Truncated(name));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let extents = [u32_at(5), u32_at(9), u32_at(13)];
    let spacing = [f32_at(17), f32_at(21), f32_at(25)];
    let dtype = bytes[29];
    if dtype != DTYPE_F32 {
        return Err(VvolError::UnknownDtype(name, dtype));
    }
    let numel = extents[0] * extents[1] * extents[2];
    if bytes.len() != 30 + 4 * numel {
        return Err(VvolError::Truncated(name));
    }
    let data: Vec<f32> = bytes[30..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume::new(extents, spacing, data).map_err(|e| VvolError::Invalid(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("v.vvol");
        let v = Volume::new(
            [3, 4, 2],
            [1.0, 1.0, 6.0],
            (0..24).map(|i| (i as f32 - 12.0) * 0.05).collect(),
        )
        .unwrap();
        write_volume(&v, &p).unwrap();
        let r = read_volume(&p).unwrap();
        assert_eq!(r, v);
        // same bytes when written again
        let b1 = std::fs::read(&p).unwrap();
        write_volume(&r, &p).unwrap();
        assert_eq!(b1, std::fs::read(&p).unwrap());
    }

    #[test]
    fn file_size_is_header_plus_payload() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("z.vvol");
        write_volume(&Volume::zeros([2, 2, 2], [1.0; 3]), &p).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 30 + 32);
    }

    #[test]
    fn distinct_error_kinds() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.vvol");
        std::fs::write(&p, b"NOPE!xxxxxxxxxxxxxxxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(read_volume(&p), Err(VvolError::BadMagic(_))));

        let v = Volume::zeros([2, 2, 2], [1.0; 3]);
        write_volume(&v, &p).unwrap();
        let full = std::fs::read(&p).unwrap();
        std::fs::write(&p, &full[..full.len() - 3]).unwrap();
        assert!(matches!(read_volume(&p), Err(VvolError::Truncated(_))));

        let mut wrong = full.clone();
        wrong[29] = 7;
        std::fs::write(&p, &wrong).unwrap();
        assert!(matches!(read_volume(&p), Err(VvolError::UnknownDtype(_, 7))));
    }
}
