//! Flat named-tensor checkpoint container.
//!
//! Layout (little-endian):
//! ```text
//! magic "NTCK0001"
//! u32 meta count, then per entry: u32 key len, key bytes, u32 val len, val bytes
//! u32 tensor count, then per tensor:
//!   u32 name len, name bytes, u32 ndim, u64 dims..., f64 data (prod(dims))
//! ```
//! Round-trips are bit-exact; f64 payloads are stored verbatim.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

const MAGIC: &[u8; 8] = b"NTCK0001";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?} has shape {got:?}, expected {want:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered tensor container with string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<NamedTensor>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: &str) {
        if let Some(entry) = self.meta.iter_mut().find(|(k, _)| k == key) {
            entry.1 = value.to_string();
        } else {
            self.meta.push((key.to_string(), value.to_string()));
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn get(&self, name: &str) -> Result<&NamedTensor, CheckpointError> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    }

    pub fn get_shaped(&self, name: &str, want: &[usize]) -> Result<&NamedTensor, CheckpointError> {
        let t = self.get(name)?;
        if t.shape != want {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                got: t.shape.clone(),
                want: want.to_vec(),
            });
        }
        Ok(t)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (k, v) in &self.meta {
            write_str(&mut w, k)?;
            write_str(&mut w, v)?;
        }
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            write_str(&mut w, &t.name)?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in &t.data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let meta_count = read_u32(&mut r)?;
        let mut meta = Vec::with_capacity(meta_count as usize);
        for _ in 0..meta_count {
            let k = read_str(&mut r)?;
            let v = read_str(&mut r)?;
            meta.push((k, v));
        }
        let tensor_count = read_u32(&mut r)?;
        let mut tensors = Vec::with_capacity(tensor_count as usize);
        for _ in 0..tensor_count {
            let name = read_str(&mut r)?;
            let ndim = read_u32(&mut r)? as usize;
            if ndim > 8 {
                return Err(CheckpointError::Corrupt(format!(
                    "tensor {name:?} claims {ndim} dims"
                )));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let len: usize = shape.iter().product();
            if len > (1 << 30) {
                return Err(CheckpointError::Corrupt(format!(
                    "tensor {name:?} is implausibly large"
                )));
            }
            let mut data = vec![0f64; len];
            let mut buf = vec![0u8; len * 8];
            r.read_exact(&mut buf)?;
            for (i, chunk) in buf.chunks_exact(8).enumerate() {
                data[i] = f64::from_le_bytes(chunk.try_into().unwrap());
            }
            tensors.push(NamedTensor { name, shape, data });
        }
        Ok(TensorStore { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn write_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String, CheckpointError> {
    let len = read_u32(r)? as usize;
    if len > (1 << 20) {
        return Err(CheckpointError::Corrupt("oversized string".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| CheckpointError::Corrupt("non-utf8 string".into()))
}
