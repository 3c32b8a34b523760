//! "MSRT" binary tensor container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! b"MSRT" | version | dtype (0 = f32) | rank | extent * rank | f32 LE payload
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"MSRT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;

/// Byte length of the header for a tensor of the given rank.
pub fn header_len(rank: usize) -> usize {
    16 + 4 * rank
}

pub fn write_tensor<W: Write>(mut w: W, tensor: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&DTYPE_F32.to_le_bytes())?;
    let rank = u32::try_from(tensor.shape().len())
        .map_err(|_| Error::Format("rank does not fit in u32".into()))?;
    w.write_all(&rank.to_le_bytes())?;
    for &extent in tensor.shape() {
        let e = u32::try_from(extent)
            .map_err(|_| Error::Format(format!("extent {extent} does not fit in u32")))?;
        w.write_all(&e.to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(tensor.len() * 4);
    for v in tensor.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dtype = read_u32(&mut r)?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {dtype}")));
    }
    let rank = read_u32(&mut r)? as usize;
    let shape = (0..rank)
        .map(|_| read_u32(&mut r).map(|e| e as usize))
        .collect::<Result<Vec<_>>>()?;
    let n = numel(&shape);
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload)
        .map_err(|e| Error::Format(format!("truncated payload: {e}")))?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub fn save(path: &Path, tensor: &Tensor) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor(&mut w, tensor)?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(BufReader::new(file))
}
