//! Squared maximum mean discrepancy with an RBF kernel (biased estimator).
//!
//! Stands in for feature-space distribution metrics at desk scale: it needs
//! no pretrained network, has exact small-case behavior (identical sample
//! sets give 0), and is symmetric and permutation-invariant.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Median pairwise Euclidean distance over the pooled samples.
    MedianHeuristic,
    Fixed(f64),
}

fn flatten(set: &[Tensor], which: &str) -> Result<Vec<Vec<f64>>> {
    if set.len() < 2 {
        return Err(Error::invalid(format!(
            "{which} needs at least 2 samples, got {}",
            set.len()
        )));
    }
    let dim = set[0].len();
    set.iter()
        .map(|t| {
            if t.len() != dim {
                return Err(Error::shape(
                    "mmd2",
                    format!("sample of {} elements in a set of {dim}-element samples", t.len()),
                ));
            }
            Ok(t.to_f64_vec())
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Biased MMD^2: mean k(X,X) + mean k(Y,Y) - 2 mean k(X,Y), with
/// k(a,b) = exp(-|a-b|^2 / (2 h^2)).
pub fn mmd2(xs: &[Tensor], ys: &[Tensor], bandwidth: Bandwidth) -> Result<f64> {
    let x = flatten(xs, "X")?;
    let y = flatten(ys, "Y")?;
    if x[0].len() != y[0].len() {
        return Err(Error::shape(
            "mmd2",
            format!("X samples have {} elements, Y samples {}", x[0].len(), y[0].len()),
        ));
    }

    let h = match bandwidth {
        Bandwidth::Fixed(h) if h > 0.0 => h,
        Bandwidth::Fixed(h) => {
            return Err(Error::invalid(format!("bandwidth {h} must be positive")))
        }
        Bandwidth::MedianHeuristic => {
            let pooled: Vec<&Vec<f64>> = x.iter().chain(y.iter()).collect();
            let mut dists = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
            for i in 0..pooled.len() {
                for j in (i + 1)..pooled.len() {
                    dists.push(sq_dist(pooled[i], pooled[j]).sqrt());
                }
            }
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = dists[dists.len() / 2];
            if med > 0.0 {
                med
            } else {
                1.0 // all samples identical; any bandwidth gives MMD^2 = 0
            }
        }
    };
    let denom = 2.0 * h * h;
    let kernel_mean = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
        let mut s = 0.0;
        for ai in a {
            for bj in b {
                s += (-sq_dist(ai, bj) / denom).exp();
            }
        }
        s / (a.len() * b.len()) as f64
    };
    Ok(kernel_mean(&x, &x) + kernel_mean(&y, &y) - 2.0 * kernel_mean(&x, &y))
}
