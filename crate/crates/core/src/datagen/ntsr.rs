//! NTSR: a little-endian binary tensor file.
//!
//! Layout: magic "NTSR", version u8 (= 1), dtype u8 (1 = f32, 2 = f64,
//! 3 = u8), rank u8, pad u8 (= 0), then `rank` u64 little-endian extents,
//! then the row-major payload in little-endian element order. The format is
//! LE-only; there is no byte-order mark to negotiate.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::tensor::Storage;
use crate::numerics::{DType, Tensor};

pub const NTSR_MAGIC: &[u8; 4] = b"NTSR";
pub const NTSR_VERSION: u8 = 1;

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 1,
        DType::F64 => 2,
        DType::U8 => 3,
    }
}

fn code_dtype(c: u8) -> Option<DType> {
    match c {
        1 => Some(DType::F32),
        2 => Some(DType::F64),
        3 => Some(DType::U8),
        _ => None,
    }
}

/// Serialize a tensor to NTSR bytes.
pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.dims().len() + t.len() * t.dtype().size_bytes());
    out.extend_from_slice(NTSR_MAGIC);
    out.push(NTSR_VERSION);
    out.push(dtype_code(t.dtype()));
    out.push(t.dims().len() as u8);
    out.push(0);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match t.storage() {
        Storage::F32(v) => {
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Storage::F64(v) => {
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Storage::U8(v) => out.extend_from_slice(v),
    }
    out
}

/// Parse one NTSR blob. `source` names the origin in errors; `base` offsets
/// reported positions (for blobs embedded in a container). Returns the
/// tensor and the number of bytes consumed.
pub fn from_bytes_at(bytes: &[u8], source: &str, base: u64) -> Result<(Tensor, usize)> {
    let err = |offset: usize, detail: String| Error::format(source, base + offset as u64, detail);
    if bytes.len() < 8 {
        return Err(err(bytes.len(), "truncated header".into()));
    }
    if &bytes[0..4] != NTSR_MAGIC {
        return Err(err(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    if bytes[4] != NTSR_VERSION {
        return Err(err(4, format!("unsupported version {}", bytes[4])));
    }
    let dtype = code_dtype(bytes[5]).ok_or_else(|| err(5, format!("unknown dtype code {}", bytes[5])))?;
    let rank = bytes[6] as usize;
    if rank == 0 {
        return Err(err(6, "rank must be >= 1".into()));
    }
    if bytes[7] != 0 {
        return Err(err(7, format!("nonzero pad byte {}", bytes[7])));
    }
    let dims_end = 8 + 8 * rank;
    if bytes.len() < dims_end {
        return Err(err(bytes.len(), "truncated dims".into()));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut count: u64 = 1;
    for i in 0..rank {
        let off = 8 + 8 * i;
        let d = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        if d == 0 {
            return Err(err(off, "zero extent".into()));
        }
        count = count
            .checked_mul(d)
            .ok_or_else(|| err(off, format!("element count overflow at extent {d}")))?;
        dims.push(d as usize);
    }
    const MAX_ELEMENTS: u64 = 1 << 33;
    if count > MAX_ELEMENTS {
        return Err(err(8, format!("element count {count} exceeds limit")));
    }
    let payload_len = count as usize * dtype.size_bytes();
    let end = dims_end + payload_len;
    if bytes.len() < end {
        return Err(err(
            bytes.len(),
            format!(
                "truncated payload: need {payload_len} bytes at offset {dims_end}, have {}",
                bytes.len() - dims_end
            ),
        ));
    }
    let payload = &bytes[dims_end..end];
    let tensor = match dtype {
        DType::F32 => {
            let v: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_f32(&dims, v)
        }
        DType::F64 => {
            let v: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_f64(&dims, v)
        }
        DType::U8 => Tensor::from_u8(&dims, payload.to_vec()),
    }
    .map_err(|e| err(dims_end, e.to_string()))?;
    Ok((tensor, end))
}

/// Parse a standalone NTSR blob, requiring it to span the whole buffer.
pub fn from_bytes(bytes: &[u8], source: &str) -> Result<Tensor> {
    let (t, used) = from_bytes_at(bytes, source, 0)?;
    if used != bytes.len() {
        return Err(Error::format(
            source,
            used as u64,
            format!("{} trailing bytes after payload", bytes.len() - used),
        ));
    }
    Ok(t)
}

pub fn write_file(path: &Path, t: &Tensor) -> Result<()> {
    super::write_atomic(path, &to_bytes(t))
}

pub fn read_file(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes, &path.display().to_string())
}
