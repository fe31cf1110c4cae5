//! "PTSR" raw tensor files: magic, u16 version, u8 dtype, u8 rank,
//! rank x u64 extents, then the row-major payload. Everything little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const PTSR_MAGIC: &[u8; 4] = b"PTSR";
pub const PTSR_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| TensorError::Format(format!("rank {} exceeds 255", t.rank())))?;
    w.write_all(PTSR_MAGIC)?;
    w.write_all(&PTSR_VERSION.to_le_bytes())?;
    w.write_all(&[DTYPE_F32, rank])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let mut head = [0u8; 8];
    r.read_exact(&mut head)?;
    if &head[..4] != PTSR_MAGIC {
        return Err(TensorError::Format("bad magic, expected PTSR".into()));
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != PTSR_VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    if head[6] != DTYPE_F32 {
        return Err(TensorError::Format(format!("unsupported dtype code {}", head[6])));
    }
    let rank = head[7] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut total: usize = 1;
    for _ in 0..rank {
        let mut e = [0u8; 8];
        r.read_exact(&mut e)?;
        let d = usize::try_from(u64::from_le_bytes(e)).map_err(|_| TensorError::Format("extent overflows usize".into()))?;
        total = total
            .checked_mul(d)
            .filter(|&n| n <= (1 << 34))
            .ok_or_else(|| TensorError::Format("tensor too large".into()))?;
        shape.push(d);
    }
    let mut bytes = vec![0u8; total * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new(shape, data)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor(BufReader::new(File::open(path)?))
}
