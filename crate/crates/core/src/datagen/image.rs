//! Binary PGM (P5) and PPM (P6) emission for generated images.
//!
//! Pixel values are `round(255 * clamp(v, 0, 1))`. Single-channel tensors
//! become PGM, three-channel tensors PPM.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::ops::image_dims;
use crate::numerics::Tensor;

fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Encode a (1, r, r) or (3, r, r) tensor as PGM/PPM bytes.
pub fn to_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let [c, r] = image_dims("image-emit", t)?;
    let vals = t.to_f64_vec();
    let mut out = Vec::with_capacity(32 + c * r * r);
    match c {
        1 => out.extend_from_slice(format!("P5\n{r} {r}\n255\n").as_bytes()),
        3 => out.extend_from_slice(format!("P6\n{r} {r}\n255\n").as_bytes()),
        _ => {
            return Err(Error::invalid(format!(
                "image emission supports 1 or 3 channels, got {c}"
            )))
        }
    }
    // Interleave channels per pixel (planar tensor -> packed file).
    for i in 0..r {
        for j in 0..r {
            for ch in 0..c {
                out.push(quantize(vals[ch * r * r + i * r + j]));
            }
        }
    }
    Ok(out)
}

pub fn write_file(path: &Path, t: &Tensor) -> Result<()> {
    super::write_atomic(path, &to_bytes(t)?)
}
