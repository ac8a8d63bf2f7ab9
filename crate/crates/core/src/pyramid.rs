//! Resolution-change operators used at stage jumps and when building
//! training pairs.
//!
//! Downsampling is block-mean (area averaging), upsampling is
//! nearest-neighbor replication. With power-of-two factors the pair is
//! exactly inverse in one direction: Down(Up(x, f), f) == x bitwise, since
//! a block mean of f*f identical values sums to a power-of-two multiple and
//! divides back exactly. Downsampling unit-variance white noise divides the
//! per-pixel variance by f^2, which is what makes the bridge's regression
//! well-posed.

use crate::error::{Error, Result};
use crate::numerics::ops::{dispatch1, image_dims, Element};
use crate::numerics::tensor::{Storage, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMode {
    DownArea,
    UpNearest,
}

/// A resampling request; factors are powers of two.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResampleSpec {
    pub mode: ResampleMode,
    pub factor: usize,
}

impl ResampleSpec {
    pub fn new(mode: ResampleMode, factor: usize) -> Result<ResampleSpec> {
        if factor < 2 || !factor.is_power_of_two() {
            return Err(Error::invalid(format!(
                "resample factor must be a power of two >= 2, got {factor}"
            )));
        }
        Ok(ResampleSpec { mode, factor })
    }
}

/// Area-mean downsampling of a (C, r, r) image by `factor`.
/// A factor of 1 is the identity.
pub fn downsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    let [c, r] = image_dims("downsample", x)?;
    if factor == 1 {
        return Ok(x.clone());
    }
    if factor == 0 || r % factor != 0 {
        return Err(Error::shape(
            "downsample",
            format!("factor {factor} does not divide resolution {r}"),
        ));
    }
    let out_r = r / factor;
    dispatch1!("downsample", x, &[c, out_r, out_r], |v: &[_]| {
        down_area(v, c, r, factor)
    })
}

fn down_area<S: Element>(v: &[S], c: usize, r: usize, f: usize) -> Vec<S> {
    let out_r = r / f;
    let inv = S::from_f64(1.0 / (f * f) as f64);
    let mut out = vec![S::from_f64(0.0); c * out_r * out_r];
    let mut block = vec![S::from_f64(0.0); f * f];
    for ch in 0..c {
        for oi in 0..out_r {
            for oj in 0..out_r {
                for di in 0..f {
                    let row = ch * r * r + (oi * f + di) * r + oj * f;
                    block[di * f..(di + 1) * f].copy_from_slice(&v[row..row + f]);
                }
                out[ch * out_r * out_r + oi * out_r + oj] = tree_sum(&mut block) * inv;
            }
        }
    }
    out
}

/// Deterministic pairwise reduction. On a block of f*f identical values
/// (f a power of two) every partial sum is an exact doubling, so the block
/// mean reproduces the value bitwise; that is what makes Down(Up(x)) == x.
fn tree_sum<S: Element>(buf: &mut [S]) -> S {
    let mut n = buf.len();
    while n > 1 {
        let half = n / 2;
        for i in 0..half {
            buf[i] = buf[2 * i] + buf[2 * i + 1];
        }
        if n % 2 == 1 {
            buf[half] = buf[n - 1];
            n = half + 1;
        } else {
            n = half;
        }
    }
    buf[0]
}

/// Nearest-neighbor upsampling of a (C, r, r) image by `factor`.
/// A factor of 1 is the identity.
pub fn upsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    let [c, r] = image_dims("upsample", x)?;
    if factor == 1 {
        return Ok(x.clone());
    }
    if factor == 0 {
        return Err(Error::invalid("upsample factor must be >= 1"));
    }
    let out_r = r * factor;
    dispatch1!("upsample", x, &[c, out_r, out_r], |v: &[_]| {
        up_nearest(v, c, r, factor)
    })
}

fn up_nearest<S: Element>(v: &[S], c: usize, r: usize, f: usize) -> Vec<S> {
    let out_r = r * f;
    let mut out = vec![S::from_f64(0.0); c * out_r * out_r];
    for ch in 0..c {
        for i in 0..out_r {
            for j in 0..out_r {
                out[ch * out_r * out_r + i * out_r + j] = v[ch * r * r + (i / f) * r + (j / f)];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::DType;
    use crate::rng::{stream, StreamDomain};

    #[test]
    fn block_mean_small() {
        let x = Tensor::from_f32(&[1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let d = downsample(&x, 2).unwrap();
        assert_eq!(d.dims(), &[1, 1, 1]);
        assert_eq!(d.f32s().unwrap(), &[4.0]);
    }

    #[test]
    fn constants_survive_downsampling() {
        let x = Tensor::full(&[2, 8, 8], DType::F32, 0.37).unwrap();
        let d = downsample(&x, 4).unwrap();
        assert!(d.bits_eq(&Tensor::full(&[2, 2, 2], DType::F32, 0.37).unwrap()));
    }

    #[test]
    fn replication_small() {
        let x = Tensor::from_f32(&[1, 1, 1], vec![4.0]).unwrap();
        let u = upsample(&x, 2).unwrap();
        assert_eq!(u.dims(), &[1, 2, 2]);
        assert_eq!(u.f32s().unwrap(), &[4.0; 4]);
    }

    #[test]
    fn down_of_up_is_bitwise_identity() {
        let mut rng = stream(9, StreamDomain::Data, 0, 0);
        let x = Tensor::randn(&[2, 8, 8], DType::F32, &mut rng).unwrap();
        for f in [2usize, 4] {
            let roundtrip = downsample(&upsample(&x, f).unwrap(), f).unwrap();
            assert!(roundtrip.bits_eq(&x), "factor {f}");
        }
    }

    #[test]
    fn upsample_preserves_channel_mean() {
        let mut rng = stream(10, StreamDomain::Data, 0, 0);
        let x = Tensor::randn(&[1, 4, 4], DType::F64, &mut rng).unwrap();
        let u = upsample(&x, 2).unwrap();
        let mean = |t: &Tensor| t.to_f64_vec().iter().sum::<f64>() / t.len() as f64;
        assert!((mean(&x) - mean(&u)).abs() < 1e-15);
    }

    #[test]
    fn operators_are_linear() {
        let mut rng = stream(11, StreamDomain::Data, 0, 0);
        let x = Tensor::randn(&[1, 8, 8], DType::F32, &mut rng).unwrap();
        let y = Tensor::randn(&[1, 8, 8], DType::F32, &mut rng).unwrap();
        let (a, b) = (1.7f64, -0.3f64);
        for op in [downsample, upsample] {
            let combo = crate::numerics::ops::add(
                &crate::numerics::ops::scalar_mul(&x, a).unwrap(),
                &crate::numerics::ops::scalar_mul(&y, b).unwrap(),
            )
            .unwrap();
            let lhs = op(&combo, 2).unwrap();
            let rhs = crate::numerics::ops::add(
                &crate::numerics::ops::scalar_mul(&op(&x, 2).unwrap(), a).unwrap(),
                &crate::numerics::ops::scalar_mul(&op(&y, 2).unwrap(), b).unwrap(),
            )
            .unwrap();
            for (l, r) in lhs.to_f64_vec().iter().zip(rhs.to_f64_vec()) {
                assert!((l - r).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn white_noise_variance_drops_by_factor_squared() {
        // Monte-Carlo oracle: the mean of 4 iid unit normals has variance 1/4.
        let mut rng = stream(12, StreamDomain::Data, 0, 0);
        let samples = 100_000;
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for _ in 0..samples / 16 {
            let x = Tensor::randn(&[1, 8, 8], DType::F64, &mut rng).unwrap();
            let d = downsample(&x, 2).unwrap();
            for v in d.to_f64_vec() {
                acc += v * v;
                count += 1;
            }
        }
        let var = acc / count as f64;
        assert!((var - 0.25).abs() < 0.25 * 0.02, "var = {var}");
    }

    #[test]
    fn invalid_factors_rejected() {
        let x = Tensor::from_f32(&[1, 6, 6], vec![0.0; 36]).unwrap();
        assert!(downsample(&x, 4).is_err());
        assert!(ResampleSpec::new(ResampleMode::DownArea, 3).is_err());
        assert!(ResampleSpec::new(ResampleMode::UpNearest, 2).is_ok());
    }
}
