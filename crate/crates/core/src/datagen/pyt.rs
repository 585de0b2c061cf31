//! On-disk tensor format: magic "PYT1", rank as u32 LE, dims as u32 LE,
//! payload as f32 LE. Storage precision is 32-bit; compute is 64-bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PYT_MAGIC: &[u8; 4] = b"PYT1";

#[derive(Debug, Clone, PartialEq)]
pub struct F32Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl F32Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "dims {:?} vs {} elements",
                dims,
                data.len()
            )));
        }
        Ok(F32Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        F32Tensor { dims, data: vec![0.0; n] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

pub fn encode_pyt(t: &F32Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.dims.len() + 4 * t.data.len());
    out.extend_from_slice(PYT_MAGIC);
    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decode one tensor from the front of `bytes`; returns the tensor and
/// the number of bytes consumed. `name` labels format errors.
pub fn decode_pyt(bytes: &[u8], name: &str) -> Result<(F32Tensor, usize)> {
    if bytes.len() < 8 {
        return Err(Error::format(name, "truncated header"));
    }
    if &bytes[..4] != PYT_MAGIC {
        return Err(Error::format(name, "bad magic bytes"));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::format(name, format!("implausible rank {rank}")));
    }
    let head = 8 + 4 * rank;
    if bytes.len() < head {
        return Err(Error::format(name, "truncated dims"));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let numel: usize = dims.iter().product();
    let end = head + numel * 4;
    if bytes.len() < end {
        return Err(Error::format(name, "truncated payload"));
    }
    let data = bytes[head..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((F32Tensor { dims, data }, end))
}

pub fn write_pyt(path: &Path, t: &F32Tensor) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_pyt(t))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_pyt(path: &Path) -> Result<F32Tensor> {
    let name = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(name.clone(), e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(&name, "truncated header"))?;
    if &magic != PYT_MAGIC {
        return Err(Error::format(&name, "bad magic bytes"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)
        .map_err(|_| Error::format(&name, "truncated rank"))?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::format(&name, format!("implausible rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut u32buf)
            .map_err(|_| Error::format(&name, "truncated dims"))?;
        dims.push(u32::from_le_bytes(u32buf) as usize);
    }
    let numel: usize = dims.iter().product();
    let mut payload = vec![0u8; numel * 4];
    r.read_exact(&mut payload)
        .map_err(|_| Error::format(&name, "truncated payload"))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(&name, e))? != 0 {
        return Err(Error::format(&name, "trailing bytes after payload"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(F32Tensor { dims, data })
}
