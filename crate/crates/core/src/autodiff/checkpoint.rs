//! Flat little-endian parameter checkpoint.
//!
//! Layout:
//!
//! ```text
//! magic      4 bytes  "BDGT"
//! version    u32
//! count      u32
//! count × {
//!     name_len  u32
//!     name      name_len bytes, UTF-8
//!     rank      u32
//!     dims      rank × u64
//!     values    prod(dims) × f64
//! }
//! ```

use std::io::{Read, Write};

use super::{AutodiffError, Tensor};

pub const MAGIC: [u8; 4] = *b"BDGT";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(
    mut w: W,
    tensors: &[(String, &Tensor)],
) -> Result<(), AutodiffError> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, AutodiffError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(AutodiffError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(AutodiffError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| AutodiffError::Checkpoint(format!("tensor name: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let len: usize = shape.iter().product();
        let mut values = Vec::with_capacity(len);
        let mut b = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut b)?;
            values.push(f64::from_le_bytes(b));
        }
        out.push((name, Tensor::new(shape, values)?));
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, AutodiffError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
