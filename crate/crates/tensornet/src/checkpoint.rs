//! Binary container of named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "TNCKPT01"
//! width    u8       4 or 8 (bytes per stored float)
//! meta     u32 len + UTF-8 bytes (free-form, typically JSON)
//! count    u32
//! entry*   u32 name len + UTF-8 name
//!          u32 rank + u64 extent per axis
//!          u8  has_moments (0/1)
//!          values, then first and second moments when present
//! ```

use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::gemm::Precision;
use crate::params::{ParamStore, Parameter};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TNCKPT01";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub value: Tensor,
    pub moments: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub precision: Precision,
    pub metadata: String,
    pub entries: Vec<CheckpointEntry>,
}

fn fmt_err(msg: impl Into<String>) -> TensorError {
    TensorError::Format(msg.into())
}

impl Checkpoint {
    pub fn from_store(
        store: &ParamStore,
        metadata: impl Into<String>,
        with_moments: bool,
        precision: Precision,
    ) -> Self {
        let entries = store
            .iter()
            .map(|(_, name, p)| CheckpointEntry {
                name: name.to_string(),
                value: p.value.clone(),
                moments: with_moments.then(|| (p.first_moment.clone(), p.second_moment.clone())),
            })
            .collect();
        Self {
            precision,
            metadata: metadata.into(),
            entries,
        }
    }

    pub fn entry(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Rebuilds a store in checkpoint order; moments default to zero.
    pub fn to_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for e in &self.entries {
            let id = store.insert(e.name.clone(), e.value.clone())?;
            if let Some((m, v)) = &e.moments {
                let p: &mut Parameter = store.get_mut(id);
                p.first_moment.clone_from(m);
                p.second_moment.clone_from(v);
            }
        }
        Ok(store)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[width(self.precision)])?;
        write_str(&mut w, &self.metadata)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            write_str(&mut w, &e.name)?;
            w.write_all(&(e.value.rank() as u32).to_le_bytes())?;
            for &d in e.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            w.write_all(&[u8::from(e.moments.is_some())])?;
            write_floats(&mut w, e.value.data(), self.precision)?;
            if let Some((m, v)) = &e.moments {
                write_floats(&mut w, m, self.precision)?;
                write_floats(&mut w, v, self.precision)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(fmt_err("bad magic"));
        }
        let precision = match read_u8(&mut r)? {
            4 => Precision::F32,
            8 => Precision::F64,
            other => return Err(fmt_err(format!("unsupported float width {other}"))),
        };
        let metadata = read_str(&mut r)?;
        let count = read_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = read_str(&mut r)?;
            let rank = read_u32(&mut r)? as usize;
            if rank > 16 {
                return Err(fmt_err(format!("entry {name}: rank {rank} too large")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let has_moments = match read_u8(&mut r)? {
                0 => false,
                1 => true,
                other => return Err(fmt_err(format!("entry {name}: bad moment flag {other}"))),
            };
            let value = Tensor::new(&shape, read_floats(&mut r, n, precision)?)?;
            let moments = if has_moments {
                let m = read_floats(&mut r, n, precision)?;
                let v = read_floats(&mut r, n, precision)?;
                Some((m, v))
            } else {
                None
            };
            entries.push(CheckpointEntry {
                name,
                value,
                moments,
            });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| fmt_err(e.to_string()))? != 0 {
            return Err(fmt_err("trailing bytes after last entry"));
        }
        Ok(Self {
            precision,
            metadata,
            entries,
        })
    }
}

fn width(p: Precision) -> u8 {
    match p {
        Precision::F32 => 4,
        Precision::F64 => 8,
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn write_floats<W: Write>(w: &mut W, xs: &[f64], p: Precision) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 8);
    match p {
        Precision::F32 => xs
            .iter()
            .for_each(|&x| buf.extend((x as f32).to_le_bytes())),
        Precision::F64 => xs.iter().for_each(|&x| buf.extend(x.to_le_bytes())),
    }
    w.write_all(&buf)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| fmt_err(format!("truncated checkpoint: {e}")))
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|e| fmt_err(format!("invalid UTF-8: {e}")))
}

fn read_floats<R: Read>(r: &mut R, n: usize, p: Precision) -> Result<Vec<f64>> {
    let w = width(p) as usize;
    let mut buf = vec![0u8; n * w];
    read_exact(r, &mut buf)?;
    Ok(match p {
        Precision::F32 => buf
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        Precision::F64 => buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    })
}
