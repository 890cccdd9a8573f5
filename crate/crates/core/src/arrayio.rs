//! Portable array container for exporting intermediate tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "PARR"
//! 4       2     format version (currently 1)
//! 6       1     dtype code: 1 = f32, 2 = f64
//! 7       1     rank
//! 8       8*r   dims, u64 each
//! ...     n     payload, dtype elements in row-major order
//! ```

use ndarray::{ArrayD, IxDyn};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"PARR";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ArrayIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic; not a portable array file")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u16),
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("payload size mismatch")]
    Truncated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self, ArrayIoError> {
        match c {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            other => Err(ArrayIoError::BadDtype(other)),
        }
    }
}

/// Serialize an array into any writer.
pub fn write_array(
    w: &mut impl Write,
    arr: &ArrayD<f64>,
    dtype: Dtype,
) -> Result<(), ArrayIoError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[dtype.code(), arr.ndim() as u8])?;
    for &d in arr.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match dtype {
        Dtype::F64 => {
            for &v in arr.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Dtype::F32 => {
            for &v in arr.iter() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Deserialize an array (f32 payloads widen to f64).
pub fn read_array(r: &mut impl Read) -> Result<ArrayD<f64>, ArrayIoError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ArrayIoError::BadMagic);
    }
    let mut buf2 = [0u8; 2];
    r.read_exact(&mut buf2)?;
    let version = u16::from_le_bytes(buf2);
    if version != VERSION {
        return Err(ArrayIoError::BadVersion(version));
    }
    let mut hdr = [0u8; 2];
    r.read_exact(&mut hdr)?;
    let dtype = Dtype::from_code(hdr[0])?;
    let rank = hdr[1] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        dims.push(u64::from_le_bytes(b) as usize);
    }
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    match dtype {
        Dtype::F64 => {
            let mut b = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b).map_err(|_| ArrayIoError::Truncated)?;
                data.push(f64::from_le_bytes(b));
            }
        }
        Dtype::F32 => {
            let mut b = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut b).map_err(|_| ArrayIoError::Truncated)?;
                data.push(f32::from_le_bytes(b) as f64);
            }
        }
    }
    Ok(ArrayD::from_shape_vec(IxDyn(&dims), data).expect("consistent dims"))
}

pub fn save_array(path: &Path, arr: &ArrayD<f64>, dtype: Dtype) -> Result<(), ArrayIoError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_array(&mut f, arr, dtype)
}

pub fn load_array(path: &Path) -> Result<ArrayD<f64>, ArrayIoError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_array(&mut f)
}
