//! Binary tensor records.
//!
//! Layout: ASCII `ADPT`, one version byte, one rank byte, `rank` little-endian
//! u64 extents, then the little-endian f64 payload in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"ADPT";
pub const TENSOR_VERSION: u8 = 1;

pub fn write_tensor<W: Write>(out: &mut W, tensor: &Tensor) -> std::io::Result<()> {
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&[TENSOR_VERSION, tensor.rank() as u8])?;
    for &e in tensor.shape() {
        out.write_all(&(e as u64).to_le_bytes())?;
    }
    for &v in tensor.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<()> {
    input
        .read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated tensor record: {e}")))
}

pub fn read_tensor<R: Read>(input: &mut R) -> Result<Tensor> {
    let mut head = [0u8; 6];
    read_exact(input, &mut head)?;
    if &head[..4] != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {:?}", &head[..4])));
    }
    if head[4] != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {}", head[4])));
    }
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut word = [0u8; 8];
    for _ in 0..rank {
        read_exact(input, &mut word)?;
        shape.push(u64::from_le_bytes(word) as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        read_exact(input, &mut word)?;
        data.push(f64::from_le_bytes(word));
    }
    Tensor::from_vec(&shape, data)
}

pub fn write_tensor_file(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, tensor).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_tensor(&mut bytes.as_slice())
}
