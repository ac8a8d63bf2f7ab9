//! Dense row-major tensors.
//!
//! A [`Tensor`] is an immutable value: once constructed its buffer never
//! changes. Storage is reference-counted so clones (and registering the same
//! parameter on many tapes) are cheap. Serialization to the little-endian
//! NTSR format lives in `datagen`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Storage {
    F32(Arc<Vec<f32>>),
    F64(Arc<Vec<f64>>),
    U8(Arc<Vec<u8>>),
}

impl Storage {
    fn len(&self) -> usize {
        match self {
            Storage::F32(v) => v.len(),
            Storage::F64(v) => v.len(),
            Storage::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Storage,
}

fn check_dims(dims: &[usize], len: usize) -> Result<()> {
    if dims.is_empty() {
        return Err(Error::invalid("tensor dims must be non-empty"));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!(
            "tensor extents must be >= 1, got {dims:?}"
        )));
    }
    let count: usize = dims.iter().product();
    if count != len {
        return Err(Error::invalid(format!(
            "dims {dims:?} imply {count} elements but buffer holds {len}"
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn from_f32(dims: &[usize], data: Vec<f32>) -> Result<Tensor> {
        check_dims(dims, data.len())?;
        Ok(Tensor {
            dims: dims.to_vec(),
            data: Storage::F32(Arc::new(data)),
        })
    }

    pub fn from_f64(dims: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_dims(dims, data.len())?;
        Ok(Tensor {
            dims: dims.to_vec(),
            data: Storage::F64(Arc::new(data)),
        })
    }

    pub fn from_u8(dims: &[usize], data: Vec<u8>) -> Result<Tensor> {
        check_dims(dims, data.len())?;
        Ok(Tensor {
            dims: dims.to_vec(),
            data: Storage::U8(Arc::new(data)),
        })
    }

    pub fn scalar_f32(v: f32) -> Tensor {
        Tensor::from_f32(&[1], vec![v]).unwrap()
    }

    pub fn scalar_f64(v: f64) -> Tensor {
        Tensor::from_f64(&[1], vec![v]).unwrap()
    }

    pub fn zeros(dims: &[usize], dtype: DType) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        match dtype {
            DType::F32 => Tensor::from_f32(dims, vec![0.0; n]),
            DType::F64 => Tensor::from_f64(dims, vec![0.0; n]),
            DType::U8 => Tensor::from_u8(dims, vec![0; n]),
        }
    }

    pub fn full(dims: &[usize], dtype: DType, value: f64) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        match dtype {
            DType::F32 => Tensor::from_f32(dims, vec![value as f32; n]),
            DType::F64 => Tensor::from_f64(dims, vec![value; n]),
            DType::U8 => Tensor::from_u8(dims, vec![value as u8; n]),
        }
    }

    /// Standard-normal draws in row-major order.
    pub fn randn(dims: &[usize], dtype: DType, rng: &mut impl Rng) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        match dtype {
            DType::F32 => {
                let data: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                Tensor::from_f32(dims, data)
            }
            DType::F64 => {
                let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                Tensor::from_f64(dims, data)
            }
            DType::U8 => Err(Error::invalid("randn is undefined for u8 tensors")),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // extents are >= 1 by construction
    }

    pub fn dtype(&self) -> DType {
        match &self.data {
            Storage::F32(_) => DType::F32,
            Storage::F64(_) => DType::F64,
            Storage::U8(_) => DType::U8,
        }
    }

    pub fn f32s(&self) -> Result<&[f32]> {
        match &self.data {
            Storage::F32(v) => Ok(v),
            _ => Err(Error::invalid(format!(
                "expected f32 tensor, got {:?}",
                self.dtype()
            ))),
        }
    }

    pub fn f64s(&self) -> Result<&[f64]> {
        match &self.data {
            Storage::F64(v) => Ok(v),
            _ => Err(Error::invalid(format!(
                "expected f64 tensor, got {:?}",
                self.dtype()
            ))),
        }
    }

    pub fn u8s(&self) -> Result<&[u8]> {
        match &self.data {
            Storage::U8(v) => Ok(v),
            _ => Err(Error::invalid(format!(
                "expected u8 tensor, got {:?}",
                self.dtype()
            ))),
        }
    }

    /// The single value of a one-element float tensor, widened to f64.
    pub fn item(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(Error::invalid(format!(
                "item() on tensor of {} elements",
                self.len()
            )));
        }
        self.value_at(0)
    }

    /// Element at flat index, widened to f64.
    pub fn value_at(&self, i: usize) -> Result<f64> {
        match &self.data {
            Storage::F32(v) => Ok(v[i] as f64),
            Storage::F64(v) => Ok(v[i]),
            Storage::U8(v) => Ok(v[i] as f64),
        }
    }

    /// All elements widened to f64 (copies).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            Storage::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Storage::F64(v) => v.as_ref().clone(),
            Storage::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    /// Same buffer, new dims. Element count must match.
    pub fn reshaped(&self, dims: &[usize]) -> Result<Tensor> {
        check_dims(dims, self.len())?;
        Ok(Tensor {
            dims: dims.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Cast to another float dtype (identity if already there).
    pub fn cast(&self, dtype: DType) -> Result<Tensor> {
        match (self.dtype(), dtype) {
            (a, b) if a == b => Ok(self.clone()),
            (_, DType::F32) => {
                let v: Vec<f32> = self.to_f64_vec().into_iter().map(|x| x as f32).collect();
                Tensor::from_f32(&self.dims, v)
            }
            (_, DType::F64) => Tensor::from_f64(&self.dims, self.to_f64_vec()),
            (_, DType::U8) => Err(Error::invalid("cast to u8 is not supported")),
        }
    }

    /// Exact bit equality (dims, dtype, and every element's bit pattern).
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        if self.dims != other.dims {
            return false;
        }
        match (&self.data, &other.data) {
            (Storage::F32(a), Storage::F32(b)) => {
                a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Storage::F64(a), Storage::F64(b)) => {
                a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Storage::U8(a), Storage::U8(b)) => a == b,
            _ => false,
        }
    }

    /// Rows/cols view of the tensor treating the last dim as columns.
    /// A rank-1 tensor is a single row.
    pub fn row_shape(&self) -> (usize, usize) {
        let cols = *self.dims.last().unwrap();
        (self.len() / cols, cols)
    }

    pub(crate) fn storage(&self) -> &Storage {
        &self.data
    }

    /// In-place elementwise `self[i] += other[i]` in the tensor's own
    /// arithmetic; reuses the buffer when uniquely owned.
    pub(crate) fn zip_assign(&mut self, op: &'static str, other: &Tensor) -> Result<()> {
        match (&mut self.data, &other.data) {
            (Storage::F32(a), Storage::F32(b)) => {
                for (x, y) in Arc::make_mut(a).iter_mut().zip(b.iter()) {
                    *x += *y;
                }
                Ok(())
            }
            (Storage::F64(a), Storage::F64(b)) => {
                for (x, y) in Arc::make_mut(a).iter_mut().zip(b.iter()) {
                    *x += *y;
                }
                Ok(())
            }
            _ => Err(Error::DtypeMix {
                op,
                lhs: self.dtype(),
                rhs: other.dtype(),
            }),
        }
    }

    /// In-place `self[i] += c * other[i]` in the tensor's own arithmetic.
    pub(crate) fn zip_assign_scaled(
        &mut self,
        op: &'static str,
        other: &Tensor,
        c: f64,
    ) -> Result<()> {
        match (&mut self.data, &other.data) {
            (Storage::F32(a), Storage::F32(b)) => {
                let c = c as f32;
                for (x, y) in Arc::make_mut(a).iter_mut().zip(b.iter()) {
                    *x += c * *y;
                }
                Ok(())
            }
            (Storage::F64(a), Storage::F64(b)) => {
                for (x, y) in Arc::make_mut(a).iter_mut().zip(b.iter()) {
                    *x += c * *y;
                }
                Ok(())
            }
            _ => Err(Error::DtypeMix {
                op,
                lhs: self.dtype(),
                rhs: other.dtype(),
            }),
        }
    }
}
