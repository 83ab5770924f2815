//! Little-endian binary tensor dumps for debugging and cross-checking.
//!
//! Layout: magic `PFT1`, `u32` rank, one `u32` per extent, then the elements
//! as 64-bit floats in row-major order.

use std::io::{Read, Write};

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

const MAGIC: [u8; 4] = *b"PFT1";

pub fn write_tensor<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    if t.rank() > u32::MAX as usize {
        return Err(TensorError::Dump("rank exceeds u32".to_string()));
    }
    w.write_all(&MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        if e > u32::MAX as usize {
            return Err(TensorError::Dump(format!("extent {e} exceeds u32")));
        }
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_f64().to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor<f64>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(TensorError::Dump(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let rank = u32::from_le_bytes(buf4) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut buf4)?;
        shape.push(u32::from_le_bytes(buf4) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut buf8 = [0u8; 8];
    for _ in 0..numel {
        r.read_exact(&mut buf8)?;
        data.push(f64::from_le_bytes(buf8));
    }
    Tensor::from_vec(shape, data)
}
