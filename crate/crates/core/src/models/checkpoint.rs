//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//! `b"MDDKCKPT"`, `u32` version, `u32` metadata length, metadata JSON,
//! `u32` tensor count, then per tensor: `u32` name length, name bytes,
//! `u32` rank, `u64` per dimension, `f64` values row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use mddkit_tensor::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MDDKCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(&len_u32(meta.len())?.to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&len_u32(self.tensors.len())?.to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&len_u32(name.len())?.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&len_u32(t.ndim())?.to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic bytes)".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, this build reads {VERSION}"
            )));
        }
        let meta_len = read_u32(r)? as usize;
        let meta = serde_json::from_slice(&read_bytes(r, meta_len)?)?;
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let name = String::from_utf8(read_bytes(r, name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let ndim = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = read_bytes(r, numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| {
            Error::Missing(format!("cannot open checkpoint {}: {e}", path.display()))
        })?;
        Self::read_from(&mut BufReader::new(f))
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} does not fit the format")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    // Guard against absurd lengths from corrupt files before allocating.
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_bytes() {
        let ck = Checkpoint {
            meta: serde_json::json!({"kind": "test", "epoch": 3}),
            tensors: vec![
                ("a".into(), Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.25]).unwrap()),
                ("s".into(), Tensor::scalar(0.1)),
            ],
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::read_from(&mut &b"NOTACKPT\x01\x00\x00\x00"[..]).is_err());
        let ck = Checkpoint {
            meta: serde_json::json!({}),
            tensors: vec![("a".into(), Tensor::zeros(&[3]))],
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 4);
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
    }
}
