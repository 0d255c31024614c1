//! Versioned binary checkpoints.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MOEC"
//! 4       4     format version (u32) = 1
//! 8       1     dtype code: 0 = f32, 1 = f64
//! 9       64    canonical spec hash, lowercase ascii hex
//! 73      8     build seed (u64)
//! 81      8     training step (u64)
//! 89      8     buffer count (u64)
//! 97      ...   per buffer: element count (u64), then raw little-endian
//!               float data; buffers appear in parameter declaration order
//! ```
//!
//! Round trips are bitwise stable: floats are copied as raw bits.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::params::ParamSet;
use crate::tensor::{Dtype, Element};

const MAGIC: &[u8; 4] = b"MOEC";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("checkpoint dtype {found:?} does not match model dtype {expected:?}")]
    DtypeMismatch { expected: Dtype, found: Dtype },
    #[error("checkpoint spec hash {found} does not match model spec hash {expected}")]
    SpecMismatch { expected: String, found: String },
    #[error("buffer {index} holds {got} elements, model expects {expected}")]
    BufferShape {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("checkpoint holds {got} buffers, model expects {expected}")]
    BufferCount { expected: usize, got: usize },
}

/// Raw contents of a checkpoint, decoupled from any model instance.
pub struct CheckpointData<T> {
    pub spec_hash: String,
    pub seed: u64,
    pub step: u64,
    pub buffers: Vec<Vec<T>>,
}

pub fn save_checkpoint<T: Element, W: Write>(
    mut w: W,
    spec_hash: &str,
    seed: u64,
    step: u64,
    params: &ParamSet<T>,
) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[T::DTYPE.code()])?;
    let mut hash_bytes = [b'0'; 64];
    let src = spec_hash.as_bytes();
    hash_bytes[..src.len().min(64)].copy_from_slice(&src[..src.len().min(64)]);
    w.write_all(&hash_bytes)?;
    w.write_all(&seed.to_le_bytes())?;
    w.write_all(&step.to_le_bytes())?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (_, p) in params.iter() {
        w.write_all(&(p.value.numel() as u64).to_le_bytes())?;
        for &x in p.value.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint<T: Element, R: Read>(mut r: R) -> Result<CheckpointData<T>, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let mut dtype = [0u8; 1];
    r.read_exact(&mut dtype)?;
    let found = Dtype::from_code(dtype[0]).ok_or(CheckpointError::BadDtype(dtype[0]))?;
    if found != T::DTYPE {
        return Err(CheckpointError::DtypeMismatch {
            expected: T::DTYPE,
            found,
        });
    }
    let mut hash_bytes = [0u8; 64];
    r.read_exact(&mut hash_bytes)?;
    let spec_hash = String::from_utf8_lossy(&hash_bytes).into_owned();
    let seed = read_u64(&mut r)?;
    let step = read_u64(&mut r)?;
    let count = read_u64(&mut r)? as usize;
    let elem_size = std::mem::size_of::<T>();
    let mut buffers = Vec::with_capacity(count);
    for _ in 0..count {
        let numel = read_u64(&mut r)? as usize;
        let mut raw = vec![0u8; numel * elem_size];
        r.read_exact(&mut raw)?;
        let buf: Vec<T> = raw
            .chunks_exact(elem_size)
            .map(T::from_le_slice)
            .collect();
        buffers.push(buf);
    }
    Ok(CheckpointData {
        spec_hash,
        seed,
        step,
        buffers,
    })
}

/// Copies checkpoint buffers into a built model's parameters, verifying the
/// spec hash and every buffer length.
pub fn restore_checkpoint<T: Element>(
    params: &mut ParamSet<T>,
    expected_hash: &str,
    data: &CheckpointData<T>,
) -> Result<(), CheckpointError> {
    if data.spec_hash != expected_hash {
        return Err(CheckpointError::SpecMismatch {
            expected: expected_hash.to_string(),
            found: data.spec_hash.clone(),
        });
    }
    if data.buffers.len() != params.len() {
        return Err(CheckpointError::BufferCount {
            expected: params.len(),
            got: data.buffers.len(),
        });
    }
    for (index, ((_, p), buf)) in params.iter_mut().zip(&data.buffers).enumerate() {
        if buf.len() != p.value.numel() {
            return Err(CheckpointError::BufferShape {
                index,
                expected: p.value.numel(),
                got: buf.len(),
            });
        }
        p.value.data_mut().copy_from_slice(buf);
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
