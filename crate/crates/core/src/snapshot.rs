//! Binary tensor snapshots.
//!
//! Layout, all little-endian: magic `ONER`, `u32` version, `u32` ndim,
//! `u64` per dimension, then the raw `f32` payload in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ONER";
pub const VERSION: u32 = 1;

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated tensor snapshot".into())
    } else {
        Error::Io(e)
    }
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad snapshot magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Version(format!("snapshot version {version}, expected {VERSION}")));
    }
    let ndim = read_u32(&mut r)? as usize;
    if ndim > 8 {
        return Err(Error::Format(format!("implausible ndim {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(truncated)?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw).map_err(truncated)?;
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new(shape, data)
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Tensor> {
    read_tensor(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut want = b"ONER".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read_tensor(&b"NOPE\x01\0\0\0"[..]), Err(Error::Format(_))));
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::zeros(&[3])).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(read_tensor(&buf[..]), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn round_trip(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32).sin()).collect();
            let t = Tensor::new(shape, data).unwrap();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            prop_assert_eq!(read_tensor(&buf[..]).unwrap(), t);
        }
    }
}
