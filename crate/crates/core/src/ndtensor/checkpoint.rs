//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "GCLCKPT1"
//! version      u32      (1)
//! param count  u64
//! records      param count x record
//! adam flag    u8       0 = absent, 1 = present
//!   step       u64
//!   lr beta1 beta2 eps weight_decay   5 x f64
//!   records    param count x (first-moment record, second-moment record)
//! meta count   u32
//!   entries    (key length u32, key bytes, value f64)
//!
//! record := name length u32, name bytes (UTF-8), rank u32,
//!           extents rank x u64, values prod(extents) x f64
//! ```
//!
//! Values are always stored as 64-bit reals regardless of the scalar type
//! the model was trained with.

use std::io::{Read, Write};

use indexmap::IndexMap;

use super::adam::{AdamConfig, AdamState};
use super::params::ParamSet;
use super::tensor::{Tensor, TensorError};
use crate::scalar::Real;

pub const MAGIC: &[u8; 8] = b"GCLCKPT1";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes, not a checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Everything a checkpoint holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Real = f64> {
    pub params: ParamSet<T>,
    pub adam: Option<AdamState<T>>,
    pub meta: IndexMap<String, f64>,
}

fn write_record<T: Real, W: Write>(w: &mut W, name: &str, shape: &[usize], data: &[T]) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &e in shape {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for v in data {
        w.write_all(&v.as_f64().to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint<T: Real, W: Write>(mut w: W, ckpt: &Checkpoint<T>) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(ckpt.params.len() as u64).to_le_bytes())?;
    for (name, t) in ckpt.params.iter() {
        write_record(&mut w, name, t.shape(), t.data())?;
    }
    match &ckpt.adam {
        None => w.write_all(&[0u8])?,
        Some(st) => {
            if st.m.len() != ckpt.params.len() {
                return Err(CheckpointError::Corrupt("optimizer state misaligned with parameters".into()));
            }
            w.write_all(&[1u8])?;
            w.write_all(&st.step.to_le_bytes())?;
            let c = st.config;
            for v in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay] {
                w.write_all(&v.to_le_bytes())?;
            }
            for (idx, (name, t)) in ckpt.params.iter().enumerate() {
                write_record(&mut w, &format!("adam.m.{name}"), t.shape(), &st.m[idx])?;
                write_record(&mut w, &format!("adam.v.{name}"), t.shape(), &st.v[idx])?;
            }
        }
    }
    w.write_all(&(ckpt.meta.len() as u32).to_le_bytes())?;
    for (k, v) in &ckpt.meta {
        w.write_all(&(k.len() as u32).to_le_bytes())?;
        w.write_all(k.as_bytes())?;
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                CheckpointError::Corrupt("truncated file".into())
            } else {
                CheckpointError::Io(e)
            }
        })?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        if n > 1 << 20 {
            return Err(CheckpointError::Corrupt(format!("name length {n}")));
        }
        let mut b = vec![0u8; n];
        self.inner
            .read_exact(&mut b)
            .map_err(|_| CheckpointError::Corrupt("truncated name".into()))?;
        String::from_utf8(b).map_err(|_| CheckpointError::Corrupt("name is not UTF-8".into()))
    }

    fn record<T: Real>(&mut self) -> Result<(String, Vec<usize>, Vec<T>), CheckpointError> {
        let name = self.string()?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(CheckpointError::Corrupt(format!("rank {rank} for `{name}`")));
        }
        let shape = (0..rank)
            .map(|_| self.u64().map(|e| e as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.f64().map(T::of))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((name, shape, data))
    }
}

pub fn read_checkpoint<T: Real, R: Read>(r: R) -> Result<Checkpoint<T>, CheckpointError> {
    let mut rd = Reader { inner: r };
    if &rd.bytes::<8>()? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = rd.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = rd.u64()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let (name, shape, data) = rd.record::<T>()?;
        params.insert(name, Tensor::from_parts(shape, data)?);
    }
    let adam = match rd.bytes::<1>()?[0] {
        0 => None,
        1 => {
            let step = rd.u64()?;
            let config = AdamConfig {
                lr: rd.f64()?,
                beta1: rd.f64()?,
                beta2: rd.f64()?,
                eps: rd.f64()?,
                weight_decay: rd.f64()?,
            };
            let mut m = Vec::with_capacity(count);
            let mut v = Vec::with_capacity(count);
            for idx in 0..count {
                let expect = params.name_of(idx).to_string();
                let (mn, _, md) = rd.record::<T>()?;
                let (vn, _, vd) = rd.record::<T>()?;
                if mn != format!("adam.m.{expect}") || vn != format!("adam.v.{expect}") {
                    return Err(CheckpointError::Corrupt(format!(
                        "optimizer records `{mn}`/`{vn}` do not match `{expect}`"
                    )));
                }
                m.push(md);
                v.push(vd);
            }
            Some(AdamState { config, step, m, v })
        }
        f => return Err(CheckpointError::Corrupt(format!("adam flag {f}"))),
    };
    let meta_count = rd.u32()? as usize;
    let mut meta = IndexMap::new();
    for _ in 0..meta_count {
        let k = rd.string()?;
        meta.insert(k, rd.f64()?);
    }
    Ok(Checkpoint { params, adam, meta })
}

pub fn save_checkpoint<T: Real>(path: &std::path::Path, ckpt: &Checkpoint<T>) -> Result<(), CheckpointError> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(f), ckpt)
}

pub fn load_checkpoint<T: Real>(path: &std::path::Path) -> Result<Checkpoint<T>, CheckpointError> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}
