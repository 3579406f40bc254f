//! Binary parameter files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"MTDP"
//! version u32 (= 1)
//! count   u32
//! count × {
//!     name_len u32, name (UTF-8, name_len bytes),
//!     rank u32, extents (rank × u64),
//!     values (product(extents) × f64)
//! }
//! ```

use std::path::Path;

use crate::tensor::{ParamSet, Tensor};

const MAGIC: &[u8; 4] = b"MTDP";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub fn params_to_bytes(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + params.num_values() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn params_from_bytes(buf: &[u8]) -> Result<ParamSet, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::Corrupt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Corrupt(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= buf.len()))
            .ok_or_else(|| CheckpointError::Corrupt(format!("{name}: implausible shape {shape:?}")))?;
        let bytes = r.take(n * 8)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(format!("{name}: {e}")))?;
        if params.get(&name).is_some() {
            return Err(CheckpointError::Corrupt(format!("duplicate tensor {name}")));
        }
        params.insert(name, t);
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(params)
}

pub fn save_params(path: &Path, params: &ParamSet) -> Result<(), CheckpointError> {
    std::fs::write(path, params_to_bytes(params)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_params(path: &Path) -> Result<ParamSet, CheckpointError> {
    let buf = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    params_from_bytes(&buf).map_err(|e| match e {
        CheckpointError::Corrupt(m) => CheckpointError::Corrupt(format!("{}: {m}", path.display())),
        other => other,
    })
}
