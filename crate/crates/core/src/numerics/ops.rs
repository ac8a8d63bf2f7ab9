//! Tensor primitives: forward kernels shared by the tape and by plain
//! (non-differentiated) callers.
//!
//! All reductions run left-to-right so results are bit-identical across
//! runs. Binary float ops require matching dtypes; mixing f32 and f64 is
//! rejected, as is arithmetic on u8 tensors.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::numerics::tensor::{Storage, Tensor};

pub(crate) const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_C1: f64 = 0.044_715;

/// Float element type with GEMM and transcendental kernels.
///
/// exp_fast/tanh_fast exist because the training path evaluates millions
/// of transcendentals per step: f32 tanh goes through exp (several times
/// faster than libm tanhf), f64 keeps plain libm so full-precision gradient
/// checks are unaffected.
pub(crate) trait Element: Float + Send + Sync + 'static {
    /// `c = alpha * op(a) op(b)` where `ta`/`tb` transpose the operands;
    /// `m, k, n` are the shapes after transposition. Transposes are stride
    /// tricks inside the GEMM, never copies.
    #[allow(clippy::too_many_arguments)]
    fn gemm_alpha(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[Self],
        ta: bool,
        b: &[Self],
        tb: bool,
        c: &mut [Self],
    );
    fn from_f64(v: f64) -> Self;
    fn exp_fast(self) -> Self;
    fn tanh_fast(self) -> Self;
}

impl Element for f32 {
    fn gemm_alpha(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[Self],
        ta: bool,
        b: &[Self],
        tb: bool,
        c: &mut [Self],
    ) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
        let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha as f32, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn exp_fast(self) -> Self {
        self.exp()
    }

    fn tanh_fast(self) -> Self {
        // libm tanhf is several times slower than this identity on glibc.
        let e = (2.0 * self).exp();
        1.0 - 2.0 / (e + 1.0)
    }
}

impl Element for f64 {
    fn gemm_alpha(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[Self],
        ta: bool,
        b: &[Self],
        tb: bool,
        c: &mut [Self],
    ) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
        let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    fn exp_fast(self) -> Self {
        self.exp()
    }

    fn tanh_fast(self) -> Self {
        self.tanh()
    }
}


/// Run a typed kernel on one float tensor, producing a float tensor of the
/// same dtype. `$f` is instantiated once per float type.
macro_rules! dispatch1 {
    ($op:literal, $a:expr, $dims:expr, $f:expr) => {
        match $a.storage() {
            Storage::F32(x) => Tensor::from_f32($dims, $f(x.as_slice())),
            Storage::F64(x) => Tensor::from_f64($dims, $f(x.as_slice())),
            Storage::U8(_) => Err(Error::invalid(concat!($op, " is undefined for u8 tensors"))),
        }
    };
}

/// Same for two tensors; rejects f32/f64 mixes and u8 operands.
macro_rules! dispatch2 {
    ($op:literal, $a:expr, $b:expr, $dims:expr, $f:expr) => {
        match ($a.storage(), $b.storage()) {
            (Storage::F32(x), Storage::F32(y)) => {
                Tensor::from_f32($dims, $f(x.as_slice(), y.as_slice()))
            }
            (Storage::F64(x), Storage::F64(y)) => {
                Tensor::from_f64($dims, $f(x.as_slice(), y.as_slice()))
            }
            (Storage::U8(_), _) | (_, Storage::U8(_)) => {
                Err(Error::invalid(concat!($op, " is undefined for u8 tensors")))
            }
            _ => Err(Error::DtypeMix {
                op: $op,
                lhs: $a.dtype(),
                rhs: $b.dtype(),
            }),
        }
    };
}

pub(crate) use dispatch1;
pub(crate) use dispatch2;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.dims(), b.dims()),
        ));
    }
    Ok(())
}

/// `b` must be rank-1 matching the last dim of `a`.
fn row_compatible(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    let (_, cols) = a.row_shape();
    if b.dims().len() != 1 || b.dims()[0] != cols {
        return Err(Error::shape(
            op,
            format!("{:?} rows vs vector {:?}", a.dims(), b.dims()),
        ));
    }
    Ok(())
}

/// In-place `a += b` (same shape, same dtype). Reuses `a`'s buffer when
/// uniquely owned.
pub fn add_assign(a: &mut Tensor, b: &Tensor) -> Result<()> {
    same_shape("add", a, b)?;
    a.zip_assign("add", b)
}

/// In-place `acc += c * x`.
pub fn axpy_assign(acc: &mut Tensor, x: &Tensor, c: f64) -> Result<()> {
    same_shape("add", acc, x)?;
    acc.zip_assign_scaled("add", x, c)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    dispatch2!("add", a, b, a.dims(), |x: &[_], y: &[_]| {
        x.iter().zip(y).map(|(&p, &q)| p + q).collect::<Vec<_>>()
    })
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    dispatch2!("sub", a, b, a.dims(), |x: &[_], y: &[_]| {
        x.iter().zip(y).map(|(&p, &q)| p - q).collect::<Vec<_>>()
    })
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    dispatch2!("mul", a, b, a.dims(), |x: &[_], y: &[_]| {
        x.iter().zip(y).map(|(&p, &q)| p * q).collect::<Vec<_>>()
    })
}

/// Broadcast add of a rank-1 vector to every row of `a`.
pub fn add_row(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    row_compatible("add", a, b)?;
    let (_, cols) = a.row_shape();
    dispatch2!("add", a, b, a.dims(), |x: &[_], y: &[_]| {
        x.chunks_exact(cols)
            .flat_map(|row| row.iter().zip(y).map(|(&p, &q)| p + q))
            .collect::<Vec<_>>()
    })
}

/// Broadcast multiply of a rank-1 vector into every row of `a`.
pub fn mul_row(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    row_compatible("mul", a, b)?;
    let (_, cols) = a.row_shape();
    dispatch2!("mul", a, b, a.dims(), |x: &[_], y: &[_]| {
        x.chunks_exact(cols)
            .flat_map(|row| row.iter().zip(y).map(|(&p, &q)| p * q))
            .collect::<Vec<_>>()
    })
}

pub fn scalar_mul(a: &Tensor, c: f64) -> Result<Tensor> {
    dispatch1!("scalar-mul", a, a.dims(), |x: &[_]| scale_slice(x, c))
}

pub(crate) fn scale_slice<S: Element>(x: &[S], c: f64) -> Vec<S> {
    let c = S::from_f64(c);
    x.iter().map(|&p| p * c).collect()
}

/// `w*a + (1-w)*b`, the straight-line interpolation kernel. Shared by the
/// global path and the per-window path so both produce bit-identical values
/// for the same operands.
pub fn lerp(a: &Tensor, b: &Tensor, w: f64) -> Result<Tensor> {
    same_shape("lerp", a, b)?;
    dispatch2!("lerp", a, b, a.dims(), |x: &[_], y: &[_]| lerp_slice(x, y, w))
}

pub(crate) fn lerp_slice<S: Element>(a: &[S], b: &[S], w: f64) -> Vec<S> {
    let wa = S::from_f64(w);
    let wb = S::from_f64(1.0 - w);
    a.iter()
        .zip(b)
        .map(|(&p, &q)| wa * p + wb * q)
        .collect()
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_scaled(a, b, 1.0)
}

/// `alpha * (a @ b)`, scale fused into the GEMM.
pub fn matmul_scaled(a: &Tensor, b: &Tensor, alpha: f64) -> Result<Tensor> {
    if a.dims().len() != 2 || b.dims().len() != 2 {
        return Err(Error::shape(
            "matmul",
            format!("expects rank-2 operands, got {:?} and {:?}", a.dims(), b.dims()),
        ));
    }
    let (m, k) = (a.dims()[0], a.dims()[1]);
    let (k2, n) = (b.dims()[0], b.dims()[1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.dims(), b.dims()),
        ));
    }
    dispatch2!("matmul", a, b, &[m, n], |x: &[_], y: &[_]| {
        let mut out = vec![Element::from_f64(0.0); m * n];
        Element::gemm_alpha(m, k, n, alpha, x, false, y, false, &mut out);
        out
    })
}

/// `alpha * (a @ b^T)` for a (m, k) and b (n, k), computed with strided
/// GEMM (no transpose copy); the scale rides along in the GEMM call.
pub fn matmul_nt_scaled(a: &Tensor, b: &Tensor, alpha: f64) -> Result<Tensor> {
    if a.dims().len() != 2 || b.dims().len() != 2 {
        return Err(Error::shape(
            "matmul",
            format!("expects rank-2 operands, got {:?} and {:?}", a.dims(), b.dims()),
        ));
    }
    let (m, k) = (a.dims()[0], a.dims()[1]);
    let (n, k2) = (b.dims()[0], b.dims()[1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}^T", a.dims(), b.dims()),
        ));
    }
    dispatch2!("matmul", a, b, &[m, n], |x: &[_], y: &[_]| {
        let mut out = vec![Element::from_f64(0.0); m * n];
        Element::gemm_alpha(m, k, n, alpha, x, false, y, true, &mut out);
        out
    })
}

/// `a @ b^T` without scaling.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_nt_scaled(a, b, 1.0)
}

/// `alpha * (a^T @ b)` for a (k, m) and b (k, n), with strided GEMM.
pub fn matmul_tn_scaled(a: &Tensor, b: &Tensor, alpha: f64) -> Result<Tensor> {
    if a.dims().len() != 2 || b.dims().len() != 2 {
        return Err(Error::shape(
            "matmul",
            format!("expects rank-2 operands, got {:?} and {:?}", a.dims(), b.dims()),
        ));
    }
    let (k, m) = (a.dims()[0], a.dims()[1]);
    let (k2, n) = (b.dims()[0], b.dims()[1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("{:?}^T x {:?}", a.dims(), b.dims()),
        ));
    }
    dispatch2!("matmul", a, b, &[m, n], |x: &[_], y: &[_]| {
        let mut out = vec![Element::from_f64(0.0); m * n];
        Element::gemm_alpha(m, k, n, alpha, x, true, y, false, &mut out);
        out
    })
}

/// `a^T @ b` without scaling.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_tn_scaled(a, b, 1.0)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.dims().len() != 2 {
        return Err(Error::shape(
            "transpose",
            format!("expects rank-2 operand, got {:?}", a.dims()),
        ));
    }
    let (r, c) = (a.dims()[0], a.dims()[1]);
    dispatch1!("transpose", a, &[c, r], |x: &[_]| transpose_slice(x, r, c))
}

pub(crate) fn transpose_slice<S: Element>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::from_f64(0.0); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

pub fn concat_last(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::invalid("concat-last-dim of zero tensors"));
    }
    let lead = &parts[0].dims()[..parts[0].dims().len() - 1];
    for p in parts {
        if &p.dims()[..p.dims().len() - 1] != lead {
            return Err(Error::shape(
                "concat-last-dim",
                format!("leading dims differ: {:?} vs {:?}", parts[0].dims(), p.dims()),
            ));
        }
    }
    let widths: Vec<usize> = parts.iter().map(|p| *p.dims().last().unwrap()).collect();
    let total: usize = widths.iter().sum();
    let rows = parts[0].row_shape().0;
    let mut dims = lead.to_vec();
    dims.push(total);

    // All parts must share a dtype; delegate the mix check to pairwise add
    // semantics by checking against the first part.
    for p in &parts[1..] {
        if p.dtype() != parts[0].dtype() {
            return Err(Error::DtypeMix {
                op: "concat-last-dim",
                lhs: parts[0].dtype(),
                rhs: p.dtype(),
            });
        }
    }
    match parts[0].storage() {
        Storage::F32(_) => {
            let slices: Vec<&[f32]> = parts.iter().map(|p| p.f32s().unwrap()).collect();
            Tensor::from_f32(&dims, concat_rows(&slices, &widths, rows))
        }
        Storage::F64(_) => {
            let slices: Vec<&[f64]> = parts.iter().map(|p| p.f64s().unwrap()).collect();
            Tensor::from_f64(&dims, concat_rows(&slices, &widths, rows))
        }
        Storage::U8(_) => Err(Error::invalid("concat-last-dim is undefined for u8 tensors")),
    }
}

fn concat_rows<S: Copy>(slices: &[&[S]], widths: &[usize], rows: usize) -> Vec<S> {
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (s, &w) in slices.iter().zip(widths) {
            out.extend_from_slice(&s[r * w..(r + 1) * w]);
        }
    }
    out
}

pub fn slice_last(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (rows, cols) = a.row_shape();
    if len == 0 || start + len > cols {
        return Err(Error::shape(
            "slice",
            format!("[{start}, {}) of last dim {cols}", start + len),
        ));
    }
    let mut dims = a.dims().to_vec();
    *dims.last_mut().unwrap() = len;
    dispatch1!("slice", a, &dims, |x: &[_]| {
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&x[r * cols + start..r * cols + start + len]);
        }
        out
    })
}

pub fn softmax_last(a: &Tensor) -> Result<Tensor> {
    let (rows, cols) = a.row_shape();
    dispatch1!("softmax-last-dim", a, a.dims(), |x: &[_]| {
        softmax_rows(x, rows, cols)
    })
}

pub(crate) fn softmax_rows<S: Element>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::from_f64(0.0); rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let orow = &mut out[r * cols..(r + 1) * cols];
        // Separate max / exp / sum / scale passes: the exp pass has no
        // loop-carried dependency this way. max and sum use the fixed
        // 8-lane reduction, which is deterministic.
        let m = lane_max(row);
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - m).exp_fast();
        }
        let sum = lane_sum(orow);
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    out
}

/// Maximum via 8 independent lanes then a left-to-right fold. Float max is
/// exact selection, so any association gives the bit-identical answer for
/// non-NaN data; the lanes only exist to let the loop vectorize.
pub(crate) fn lane_max<S: Element>(x: &[S]) -> S {
    let mut lanes = [x[0]; 8];
    let mut iter = x.chunks_exact(8);
    for c in &mut iter {
        for (l, &v) in lanes.iter_mut().zip(c) {
            if v > *l {
                *l = v;
            }
        }
    }
    let mut m = lanes[0];
    for &l in &lanes[1..] {
        if l > m {
            m = l;
        }
    }
    for &v in iter.remainder() {
        if v > m {
            m = v;
        }
    }
    m
}

/// Sum via 8 fixed lanes folded left-to-right: a deterministic tree
/// reduction (stride-8 association), chosen so the loop vectorizes.
pub(crate) fn lane_sum<S: Element>(x: &[S]) -> S {
    let mut lanes = [S::from_f64(0.0); 8];
    let mut iter = x.chunks_exact(8);
    for c in &mut iter {
        for (l, &v) in lanes.iter_mut().zip(c) {
            *l = *l + v;
        }
    }
    let mut s = S::from_f64(0.0);
    for &l in &lanes {
        s = s + l;
    }
    for &v in iter.remainder() {
        s = s + v;
    }
    s
}

/// Normalize each row to zero mean / unit variance (population variance,
/// stabilized by `eps`), then apply optional per-column gain and bias.
pub fn layernorm_last(
    a: &Tensor,
    gain: Option<&Tensor>,
    bias: Option<&Tensor>,
    eps: f64,
) -> Result<Tensor> {
    let (rows, cols) = a.row_shape();
    if let Some(g) = gain {
        row_compatible("layernorm-last-dim", a, g)?;
        if g.dtype() != a.dtype() {
            return Err(Error::DtypeMix {
                op: "layernorm-last-dim",
                lhs: a.dtype(),
                rhs: g.dtype(),
            });
        }
    }
    if let Some(b) = bias {
        row_compatible("layernorm-last-dim", a, b)?;
        if b.dtype() != a.dtype() {
            return Err(Error::DtypeMix {
                op: "layernorm-last-dim",
                lhs: a.dtype(),
                rhs: b.dtype(),
            });
        }
    }
    let out = dispatch1!("layernorm-last-dim", a, a.dims(), |x: &[_]| {
        layernorm_rows(x, rows, cols, eps)
    })?;
    let out = match gain {
        Some(g) => mul_row(&out, g)?,
        None => out,
    };
    match bias {
        Some(b) => add_row(&out, b),
        None => Ok(out),
    }
}

pub(crate) fn layernorm_rows<S: Element>(x: &[S], rows: usize, cols: usize, eps: f64) -> Vec<S> {
    let mut out = vec![S::from_f64(0.0); rows * cols];
    let n = S::from_f64(cols as f64);
    let eps = S::from_f64(eps);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut mean = S::from_f64(0.0);
        for &v in row {
            mean = mean + v;
        }
        mean = mean / n;
        let mut var = S::from_f64(0.0);
        for &v in row {
            let d = v - mean;
            var = var + d * d;
        }
        var = var / n;
        let rstd = S::from_f64(1.0) / (var + eps).sqrt();
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - mean) * rstd;
        }
    }
    out
}

/// GELU, tanh approximation.
pub fn gelu(a: &Tensor) -> Result<Tensor> {
    dispatch1!("gelu", a, a.dims(), |x: &[_]| {
        x.iter().map(|&v| gelu_scalar(v)).collect::<Vec<_>>()
    })
}

pub(crate) fn gelu_scalar<S: Element>(x: S) -> S {
    let half = S::from_f64(0.5);
    let one = S::from_f64(1.0);
    let c0 = S::from_f64(GELU_C0);
    let c1 = S::from_f64(GELU_C1);
    half * x * (one + (c0 * (x + c1 * x * x * x)).tanh_fast())
}

pub(crate) fn gelu_grad_scalar<S: Element>(x: S) -> S {
    let half = S::from_f64(0.5);
    let one = S::from_f64(1.0);
    let three = S::from_f64(3.0);
    let c0 = S::from_f64(GELU_C0);
    let c1 = S::from_f64(GELU_C1);
    let t = (c0 * (x + c1 * x * x * x)).tanh_fast();
    half * (one + t) + half * x * (one - t * t) * c0 * (one + three * c1 * x * x)
}

/// Gather rows of a rank-2 table by index.
pub fn gather_rows(table: &Tensor, indices: &[usize]) -> Result<Tensor> {
    if table.dims().len() != 2 {
        return Err(Error::shape(
            "embedding-gather",
            format!("table must be rank-2, got {:?}", table.dims()),
        ));
    }
    let (v, d) = (table.dims()[0], table.dims()[1]);
    if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
        return Err(Error::invalid(format!(
            "embedding-gather index {bad} out of range for table of {v} rows"
        )));
    }
    dispatch1!("embedding-gather", table, &[indices.len(), d], |x: &[_]| {
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&x[i * d..(i + 1) * d]);
        }
        out
    })
}

/// Sum of all elements, as a one-element tensor.
pub fn sum(a: &Tensor) -> Result<Tensor> {
    dispatch1!("sum", a, &[1], |x: &[_]| vec![sum_slice(x)])
}

pub(crate) fn sum_slice<S: Element>(x: &[S]) -> S {
    let mut acc = S::from_f64(0.0);
    for &v in x {
        acc = acc + v;
    }
    acc
}

/// Mean of all elements, as a one-element tensor.
pub fn mean(a: &Tensor) -> Result<Tensor> {
    dispatch1!("mean", a, &[1], |x: &[_]| vec![mean_slice(x)])
}

pub(crate) fn mean_slice<S: Element>(x: &[S]) -> S {
    sum_slice(x) / S::from_f64(x.len() as f64)
}

pub fn square(a: &Tensor) -> Result<Tensor> {
    dispatch1!("square", a, a.dims(), |x: &[_]| {
        x.iter().map(|&v| v * v).collect::<Vec<_>>()
    })
}

/// Split a (C, r, r) image into non-overlapping p x p patches, flattened
/// row-major: token (gi, gj) holds feature ((pi*p + pj)*C + c).
pub fn patchify(a: &Tensor, p: usize) -> Result<Tensor> {
    let [c, r] = image_dims("patchify", a)?;
    if p == 0 || r % p != 0 {
        return Err(Error::shape(
            "patchify",
            format!("patch {p} does not divide resolution {r}"),
        ));
    }
    let g = r / p;
    let n = g * g;
    let fdim = p * p * c;
    dispatch1!("patchify", a, &[n, fdim], |x: &[_]| {
        let mut out = vec![Element::from_f64(0.0); n * fdim];
        for gi in 0..g {
            for gj in 0..g {
                let t = gi * g + gj;
                for pi in 0..p {
                    for pj in 0..p {
                        for ch in 0..c {
                            let src = ch * r * r + (gi * p + pi) * r + (gj * p + pj);
                            let dst = t * fdim + (pi * p + pj) * c + ch;
                            out[dst] = x[src];
                        }
                    }
                }
            }
        }
        out
    })
}

/// Inverse of [`patchify`].
pub fn unpatchify(a: &Tensor, p: usize, c: usize, r: usize) -> Result<Tensor> {
    let g = r / p;
    let n = g * g;
    let fdim = p * p * c;
    if p == 0 || r % p != 0 || a.dims() != [n, fdim] {
        return Err(Error::shape(
            "unpatchify",
            format!(
                "tokens {:?} do not unpatchify to ({c}, {r}, {r}) with patch {p}",
                a.dims()
            ),
        ));
    }
    dispatch1!("unpatchify", a, &[c, r, r], |x: &[_]| {
        let mut out = vec![Element::from_f64(0.0); c * r * r];
        for gi in 0..g {
            for gj in 0..g {
                let t = gi * g + gj;
                for pi in 0..p {
                    for pj in 0..p {
                        for ch in 0..c {
                            let dst = ch * r * r + (gi * p + pi) * r + (gj * p + pj);
                            let src = t * fdim + (pi * p + pj) * c + ch;
                            out[dst] = x[src];
                        }
                    }
                }
            }
        }
        out
    })
}

pub(crate) fn image_dims(op: &'static str, a: &Tensor) -> Result<[usize; 2]> {
    if a.dims().len() != 3 || a.dims()[1] != a.dims()[2] {
        return Err(Error::shape(
            op,
            format!("expects (C, r, r) tensor, got {:?}", a.dims()),
        ));
    }
    Ok([a.dims()[0], a.dims()[1]])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t32(dims: &[usize], v: Vec<f32>) -> Tensor {
        Tensor::from_f32(dims, v).unwrap()
    }

    #[test]
    fn matmul_small() {
        let a = t32(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t32(&[2, 1], vec![1.0, 1.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.dims(), &[2, 1]);
        assert_eq!(c.f32s().unwrap(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_dims() {
        let a = t32(&[2, 3], vec![0.0; 6]);
        let b = t32(&[2, 2], vec![0.0; 4]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn dtype_mix_rejected() {
        let a = t32(&[2], vec![1.0, 2.0]);
        let b = Tensor::from_f64(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(add(&a, &b), Err(Error::DtypeMix { .. })));
    }

    #[test]
    fn softmax_symmetry() {
        let a = t32(&[2], vec![0.0, 0.0]);
        let s = softmax_last(&a).unwrap();
        assert_eq!(s.f32s().unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn layernorm_hand_oracle() {
        // (x - mu) / sigma with mu = 2, sigma = 1 (population variance, eps 0).
        let a = Tensor::from_f64(&[2], vec![1.0, 3.0]).unwrap();
        let y = layernorm_last(&a, None, None, 0.0).unwrap();
        assert_eq!(y.f64s().unwrap(), &[-1.0, 1.0]);
    }

    #[test]
    fn transpose_roundtrip_is_identity() {
        let a = t32(&[2, 3], (0..6).map(|i| i as f32).collect());
        let back = transpose(&transpose(&a).unwrap()).unwrap();
        assert!(back.bits_eq(&a));
    }

    #[test]
    fn patchify_roundtrip_and_counts() {
        let x = t32(&[1, 4, 4], (0..16).map(|i| i as f32).collect());
        let tokens = patchify(&x, 2).unwrap();
        assert_eq!(tokens.dims(), &[4, 4]);
        let back = unpatchify(&tokens, 2, 1, 4).unwrap();
        assert!(back.bits_eq(&x));

        let x8 = t32(&[1, 8, 8], (0..64).map(|i| i as f32).collect());
        let tok8 = patchify(&x8, 2).unwrap();
        assert_eq!(tok8.dims(), &[16, 4]);
    }

    #[test]
    fn concat_and_slice_invert() {
        let a = t32(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t32(&[2, 1], vec![5.0, 6.0]);
        let c = concat_last(&[&a, &b]).unwrap();
        assert_eq!(c.dims(), &[2, 3]);
        assert_eq!(c.f32s().unwrap(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert!(slice_last(&c, 0, 2).unwrap().bits_eq(&a));
        assert!(slice_last(&c, 2, 1).unwrap().bits_eq(&b));
        assert!(slice_last(&c, 2, 2).is_err());
    }

    #[test]
    fn lerp_endpoints_are_exact() {
        let data = t32(&[3], vec![2.0, -1.0, 0.0]);
        let noise = t32(&[3], vec![0.5, 3.0, -7.0]);
        assert!(lerp(&noise, &data, 0.0).unwrap().bits_eq(&data));
        assert!(lerp(&noise, &data, 1.0).unwrap().bits_eq(&noise));
        let mid = lerp(&noise, &data, 0.5).unwrap();
        assert_eq!(mid.f32s().unwrap(), &[1.25, 1.0, -3.5]);
    }

    #[test]
    fn gather_rows_bounds() {
        let table = t32(&[3, 2], vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]);
        let g = gather_rows(&table, &[2, 0]).unwrap();
        assert_eq!(g.f32s().unwrap(), &[20.0, 21.0, 0.0, 1.0]);
        assert!(gather_rows(&table, &[3]).is_err());
    }

    #[test]
    fn mean_and_sum() {
        let a = t32(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(sum(&a).unwrap().item().unwrap(), 10.0);
        assert_eq!(mean(&a).unwrap().item().unwrap(), 2.5);
    }
}
