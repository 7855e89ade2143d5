//! Flat binary parameter files.
//!
//! Layout, all integers little-endian `u32`:
//! magic `MFKP`, version, tensor count, then for each tensor its rank and
//! dimensions, then every value as little-endian `f32` in tensor order.

use std::io::{Read, Write};
use std::path::Path;

use super::GrpoError;

pub const PARAM_MAGIC: &[u8; 4] = b"MFKP";
pub const PARAM_VERSION: u32 = 1;

fn put(out: &mut Vec<u8>, x: usize) -> Result<(), GrpoError> {
    let x = u32::try_from(x).map_err(|_| GrpoError::ParamFormat(format!("{x} does not fit in u32")))?;
    out.extend_from_slice(&x.to_le_bytes());
    Ok(())
}

pub fn write_params(path: &Path, shapes: &[Vec<usize>], values: &[f64]) -> Result<(), GrpoError> {
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if total != values.len() {
        return Err(GrpoError::ParamFormat(format!("shapes cover {total} values, got {}", values.len())));
    }
    let mut out = PARAM_MAGIC.to_vec();
    put(&mut out, PARAM_VERSION as usize)?;
    put(&mut out, shapes.len())?;
    for shape in shapes {
        put(&mut out, shape.len())?;
        for &d in shape {
            put(&mut out, d)?;
        }
    }
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], GrpoError> {
        if self.0.len() < N {
            return Err(GrpoError::ParamFormat("file truncated".into()));
        }
        let (head, rest) = self.0.split_at(N);
        self.0 = rest;
        Ok(head.try_into().expect("split at N"))
    }

    fn u32(&mut self) -> Result<usize, GrpoError> {
        Ok(u32::from_le_bytes(self.take()?) as usize)
    }
}

pub fn read_params(path: &Path) -> Result<(Vec<Vec<usize>>, Vec<f64>), GrpoError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor(&bytes);
    if &cur.take::<4>()? != PARAM_MAGIC {
        return Err(GrpoError::ParamFormat("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != PARAM_VERSION as usize {
        return Err(GrpoError::ParamFormat(format!("unsupported version {version}")));
    }
    let count = cur.u32()?;
    let mut shapes = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let rank = cur.u32()?;
        shapes.push((0..rank).map(|_| cur.u32()).collect::<Result<Vec<_>, _>>()?);
    }
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if cur.0.len() != total * 4 {
        return Err(GrpoError::ParamFormat(format!("expected {} value bytes, found {}", total * 4, cur.0.len())));
    }
    let values = cur.0.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64).collect();
    Ok((shapes, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let shapes = vec![vec![2, 3], vec![4]];
        let values: Vec<f64> = (0..10).map(|i| i as f64 * 0.25 - 1.0).collect();
        write_params(&path, &shapes, &values).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"MFKP");
        assert_eq!(bytes.len(), 4 + 4 + 4 + (4 + 8) + (4 + 4) + 40);
        assert_eq!(read_params(&path).unwrap(), (shapes, values));
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        write_params(&path, &[vec![3]], &[1.0, 2.0, 3.0]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_params(&path), Err(GrpoError::ParamFormat(_))));
        std::fs::write(&path, b"XXXX").unwrap();
        assert!(matches!(read_params(&path), Err(GrpoError::ParamFormat(_))));
        assert!(write_params(&path, &[vec![2]], &[1.0]).is_err());
    }
}
