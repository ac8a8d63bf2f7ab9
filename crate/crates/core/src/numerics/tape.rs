//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Forward ops append records in execution order; `backward` replays them in
//! reverse, accumulating vector-Jacobian products. Gradient accumulation
//! follows record order, so gradients are bit-identical across runs.
//!
//! A tape built with `Tape::no_grad()` evaluates the same forward kernels
//! without recording, for inference.


use crate::error::{Error, Result};
use crate::numerics::ops::{self, dispatch1, dispatch2, Element};
use crate::numerics::tensor::{Storage, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

struct Node {
    value: Tensor,
    tracked: bool,
}

enum Op {
    Add { a: NodeId, b: NodeId },
    AddRow { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    MulRow { a: NodeId, b: NodeId },
    ScalarMul { a: NodeId, c: f64 },
    Matmul { a: NodeId, b: NodeId },
    /// alpha * (a @ b^T) with b stored untransposed.
    MatmulNT { a: NodeId, b: NodeId, alpha: f64 },
    Transpose { a: NodeId },
    Reshape { a: NodeId },
    ConcatLast { parts: Vec<NodeId> },
    SliceLast { a: NodeId, start: usize, len: usize },
    SoftmaxLast { a: NodeId },
    /// Plain row normalization; affine gain/bias are separate records.
    LayerNormLast { a: NodeId, eps: f64 },
    Gelu { a: NodeId },
    Gather { table: NodeId, indices: Vec<usize> },
    Sum { a: NodeId },
    Mean { a: NodeId },
    Square { a: NodeId },
    Patchify { a: NodeId, p: usize },
    Unpatchify { a: NodeId, p: usize },
}

struct Record {
    op: Op,
    out: NodeId,
}

pub struct Tape {
    grad_enabled: bool,
    nodes: Vec<Node>,
    records: Vec<Record>,
    spent: bool,
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            grad_enabled: true,
            nodes: Vec::new(),
            records: Vec::new(),
            spent: false,
        }
    }

    /// Forward-only tape: same kernels, nothing recorded.
    pub fn no_grad() -> Tape {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Register a differentiable leaf (an input or parameter whose gradient
    /// is wanted).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, true)
    }

    /// Register a non-differentiated input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, tracked: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            tracked: tracked && self.grad_enabled,
        });
        id
    }

    fn emit(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = self.push(value, false);
        if self.grad_enabled {
            self.records.push(Record { op, out: id });
        }
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::add(self.value(a), self.value(b))?;
        Ok(self.emit(v, Op::Add { a, b }))
    }

    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::add_row(self.value(a), self.value(b))?;
        Ok(self.emit(v, Op::AddRow { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::sub(self.value(a), self.value(b))?;
        Ok(self.emit(v, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::mul(self.value(a), self.value(b))?;
        Ok(self.emit(v, Op::Mul { a, b }))
    }

    pub fn mul_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::mul_row(self.value(a), self.value(b))?;
        Ok(self.emit(v, Op::MulRow { a, b }))
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = ops::scalar_mul(self.value(a), c)?;
        Ok(self.emit(v, Op::ScalarMul { a, c }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.emit(v, Op::Matmul { a, b }))
    }

    /// `alpha * (a @ b^T)`; the transpose is a stride trick, not a copy,
    /// and the scale rides in the GEMM call.
    pub fn matmul_nt_scaled(&mut self, a: NodeId, b: NodeId, alpha: f64) -> Result<NodeId> {
        let v = ops::matmul_nt_scaled(self.value(a), self.value(b), alpha)?;
        Ok(self.emit(v, Op::MatmulNT { a, b, alpha }))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::transpose(self.value(a))?;
        Ok(self.emit(v, Op::Transpose { a }))
    }

    pub fn reshape(&mut self, a: NodeId, dims: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshaped(dims)?;
        Ok(self.emit(v, Op::Reshape { a }))
    }

    pub fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::concat_last(&tensors)?;
        Ok(self.emit(
            v,
            Op::ConcatLast {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn slice_last(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = ops::slice_last(self.value(a), start, len)?;
        Ok(self.emit(v, Op::SliceLast { a, start, len }))
    }

    pub fn softmax_last(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::softmax_last(self.value(a))?;
        Ok(self.emit(v, Op::SoftmaxLast { a }))
    }

    /// Layer norm over the last dim with optional affine gain/bias nodes.
    pub fn layernorm_last(
        &mut self,
        a: NodeId,
        gain: Option<NodeId>,
        bias: Option<NodeId>,
        eps: f64,
    ) -> Result<NodeId> {
        let v = ops::layernorm_last(self.value(a), None, None, eps)?;
        let mut out = self.emit(v, Op::LayerNormLast { a, eps });
        if let Some(g) = gain {
            out = self.mul_row(out, g)?;
        }
        if let Some(b) = bias {
            out = self.add_row(out, b)?;
        }
        Ok(out)
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::gelu(self.value(a))?;
        Ok(self.emit(v, Op::Gelu { a }))
    }

    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let v = ops::gather_rows(self.value(table), indices)?;
        Ok(self.emit(
            v,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::sum(self.value(a))?;
        Ok(self.emit(v, Op::Sum { a }))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::mean(self.value(a))?;
        Ok(self.emit(v, Op::Mean { a }))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::square(self.value(a))?;
        Ok(self.emit(v, Op::Square { a }))
    }

    pub fn patchify(&mut self, a: NodeId, p: usize) -> Result<NodeId> {
        let v = ops::patchify(self.value(a), p)?;
        Ok(self.emit(v, Op::Patchify { a, p }))
    }

    pub fn unpatchify(&mut self, a: NodeId, p: usize, c: usize, r: usize) -> Result<NodeId> {
        let v = ops::unpatchify(self.value(a), p, c, r)?;
        Ok(self.emit(v, Op::Unpatchify { a, p }))
    }

    /// Reverse pass from a scalar loss. Returns one gradient per tracked
    /// leaf (zero tensors for leaves the loss does not reach). A tape can be
    /// differentiated once.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::invalid("backward on a no-grad tape"));
        }
        if self.spent {
            return Err(Error::invalid(
                "backward called twice on the same tape without reset",
            ));
        }
        self.spent = true;
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::invalid(format!(
                "loss must be scalar, got shape {:?}",
                loss_value.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&[1], loss_value.dtype(), 1.0)?);

        for rec in self.records.iter().rev() {
            let d_out = match &grads[rec.out.0] {
                Some(d) => d.clone(),
                None => continue,
            };
            self.backward_record(rec, &d_out, &mut grads)?;
        }

        // Leaves the loss never touched still report a zero gradient.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.tracked && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.dims(), node.value.dtype())?);
            } else if !node.tracked {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_record(
        &self,
        rec: &Record,
        d: &Tensor,
        grads: &mut Vec<Option<Tensor>>,
    ) -> Result<()> {
        match &rec.op {
            Op::Add { a, b } => {
                accumulate(grads, *a, d.clone())?;
                accumulate(grads, *b, d.clone())?;
            }
            Op::AddRow { a, b } => {
                accumulate(grads, *a, d.clone())?;
                accumulate(grads, *b, col_sum(d)?)?;
            }
            Op::Sub { a, b } => {
                accumulate(grads, *a, d.clone())?;
                accumulate(grads, *b, ops::scalar_mul(d, -1.0)?)?;
            }
            Op::Mul { a, b } => {
                accumulate(grads, *a, ops::mul(d, self.value(*b))?)?;
                accumulate(grads, *b, ops::mul(d, self.value(*a))?)?;
            }
            Op::MulRow { a, b } => {
                accumulate(grads, *a, ops::mul_row(d, self.value(*b))?)?;
                accumulate(grads, *b, col_sum(&ops::mul(d, self.value(*a))?)?)?;
            }
            Op::ScalarMul { a, c } => {
                accumulate(grads, *a, ops::scalar_mul(d, *c)?)?;
            }
            Op::Matmul { a, b } => {
                accumulate(grads, *a, ops::matmul_nt(d, self.value(*b))?)?;
                accumulate(grads, *b, ops::matmul_tn(self.value(*a), d)?)?;
            }
            Op::MatmulNT { a, b, alpha } => {
                // out = alpha a b^T: da = alpha (d b), db = alpha (d^T a).
                accumulate(grads, *a, ops::matmul_scaled(d, self.value(*b), *alpha)?)?;
                accumulate(grads, *b, ops::matmul_tn_scaled(d, self.value(*a), *alpha)?)?;
            }
            Op::Transpose { a } => {
                accumulate(grads, *a, ops::transpose(d)?)?;
            }
            Op::Reshape { a } => {
                accumulate(grads, *a, d.reshaped(self.value(*a).dims())?)?;
            }
            Op::ConcatLast { parts } => {
                let mut start = 0;
                for &p in parts {
                    let w = *self.value(p).dims().last().unwrap();
                    accumulate(grads, p, ops::slice_last(d, start, w)?)?;
                    start += w;
                }
            }
            Op::SliceLast { a, start, len } => {
                accumulate(grads, *a, pad_slice_grad(d, self.value(*a), *start, *len)?)?;
            }
            Op::SoftmaxLast { a } => {
                accumulate(grads, *a, softmax_backward(self.value(rec.out), d)?)?;
            }
            Op::LayerNormLast { a, eps } => {
                accumulate(
                    grads,
                    *a,
                    layernorm_backward(self.value(*a), self.value(rec.out), d, *eps)?,
                )?;
            }
            Op::Gelu { a } => {
                accumulate(grads, *a, gelu_backward(self.value(*a), d)?)?;
            }
            Op::Gather { table, indices } => {
                accumulate(grads, *table, scatter_add(self.value(*table), indices, d)?)?;
            }
            Op::Sum { a } => {
                let x = self.value(*a);
                accumulate(grads, *a, Tensor::full(x.dims(), x.dtype(), d.item()?)?)?;
            }
            Op::Mean { a } => {
                let x = self.value(*a);
                let g = d.item()? / x.len() as f64;
                accumulate(grads, *a, Tensor::full(x.dims(), x.dtype(), g)?)?;
            }
            Op::Square { a } => {
                let two_x = ops::scalar_mul(self.value(*a), 2.0)?;
                accumulate(grads, *a, ops::mul(d, &two_x)?)?;
            }
            Op::Patchify { a, p } => {
                let x = self.value(*a);
                let (c, r) = (x.dims()[0], x.dims()[1]);
                accumulate(grads, *a, ops::unpatchify(d, *p, c, r)?)?;
            }
            Op::Unpatchify { a, p } => {
                accumulate(grads, *a, ops::patchify(d, *p)?)?;
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a node; `None` for untracked nodes.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for a tracked leaf; errors if the node was not tracked.
    pub fn of(&self, id: NodeId) -> Result<&Tensor> {
        self.get(id)
            .ok_or_else(|| Error::invalid("gradient requested for an untracked node"))
    }
}

fn accumulate(grads: &mut Vec<Option<Tensor>>, id: NodeId, g: Tensor) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => ops::add_assign(existing, &g)?,
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

/// Sum a (rows, cols) gradient down to a (cols,) vector, rows in order.
fn col_sum(d: &Tensor) -> Result<Tensor> {
    let (rows, cols) = d.row_shape();
    dispatch1!("col-sum", d, &[cols], |x: &[_]| col_sum_rows(x, rows, cols))
}

fn col_sum_rows<S: Element>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::from_f64(0.0); cols];
    for r in 0..rows {
        for (o, &v) in out.iter_mut().zip(&x[r * cols..(r + 1) * cols]) {
            *o = *o + v;
        }
    }
    out
}

fn pad_slice_grad(d: &Tensor, input: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (rows, cols) = input.row_shape();
    dispatch1!("slice", d, input.dims(), |x: &[_]| {
        pad_rows(x, rows, cols, start, len)
    })
}

fn pad_rows<S: Element>(x: &[S], rows: usize, cols: usize, start: usize, len: usize) -> Vec<S> {
    let mut out = vec![S::from_f64(0.0); rows * cols];
    for r in 0..rows {
        out[r * cols + start..r * cols + start + len].copy_from_slice(&x[r * len..(r + 1) * len]);
    }
    out
}

fn softmax_backward(y: &Tensor, d: &Tensor) -> Result<Tensor> {
    let (rows, cols) = y.row_shape();
    dispatch2!("softmax-last-dim", y, d, y.dims(), |yv: &[_], dv: &[_]| {
        softmax_backward_rows(yv, dv, rows, cols)
    })
}

fn softmax_backward_rows<S: Element>(y: &[S], d: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::from_f64(0.0); rows * cols];
    for r in 0..rows {
        let ys = &y[r * cols..(r + 1) * cols];
        let ds = &d[r * cols..(r + 1) * cols];
        let mut dot = S::from_f64(0.0);
        for (&yi, &di) in ys.iter().zip(ds) {
            dot = dot + yi * di;
        }
        for ((o, &yi), &di) in out[r * cols..(r + 1) * cols].iter_mut().zip(ys).zip(ds) {
            *o = yi * (di - dot);
        }
    }
    out
}

fn layernorm_backward(x: &Tensor, y: &Tensor, d: &Tensor, eps: f64) -> Result<Tensor> {
    let (rows, cols) = x.row_shape();
    let n = cols as f64;
    dispatch2!("layernorm-last-dim", y, d, x.dims(), |yv: &[_], dv: &[_]| {
        layernorm_backward_rows(x, yv, dv, rows, cols, n, eps)
    })
}

fn layernorm_backward_rows<S: Element>(
    x: &Tensor,
    y: &[S],
    d: &[S],
    rows: usize,
    cols: usize,
    n: f64,
    eps: f64,
) -> Vec<S> {
    // rstd is recomputed from the input row; cheaper than caching and still
    // deterministic. x shares the dtype of y, so this copy is bit-exact.
    let xs: Vec<S> = match x.storage() {
        Storage::F32(v) => v.iter().map(|&f| S::from_f64(f as f64)).collect(),
        Storage::F64(v) => v.iter().map(|&f| S::from_f64(f)).collect(),
        Storage::U8(_) => unreachable!("layernorm rejects u8 on the forward pass"),
    };
    let nn = S::from_f64(n);
    let epss = S::from_f64(eps);
    let mut out = vec![S::from_f64(0.0); rows * cols];
    for r in 0..rows {
        let xr = &xs[r * cols..(r + 1) * cols];
        let yr = &y[r * cols..(r + 1) * cols];
        let dr = &d[r * cols..(r + 1) * cols];
        let mut mean = S::from_f64(0.0);
        for &v in xr {
            mean = mean + v;
        }
        mean = mean / nn;
        let mut var = S::from_f64(0.0);
        for &v in xr {
            let dd = v - mean;
            var = var + dd * dd;
        }
        var = var / nn;
        let rstd = S::from_f64(1.0) / (var + epss).sqrt();

        let mut dmean = S::from_f64(0.0);
        let mut dynorm = S::from_f64(0.0);
        for (&di, &yi) in dr.iter().zip(yr) {
            dmean = dmean + di;
            dynorm = dynorm + di * yi;
        }
        dmean = dmean / nn;
        dynorm = dynorm / nn;
        for ((o, &di), &yi) in out[r * cols..(r + 1) * cols].iter_mut().zip(dr).zip(yr) {
            *o = rstd * (di - dmean - yi * dynorm);
        }
    }
    out
}

fn gelu_backward(x: &Tensor, d: &Tensor) -> Result<Tensor> {
    dispatch2!("gelu", x, d, x.dims(), |xv: &[_], dv: &[_]| {
        xv.iter()
            .zip(dv)
            .map(|(&xi, &di)| di * ops::gelu_grad_scalar(xi))
            .collect::<Vec<_>>()
    })
}

fn scatter_add(table: &Tensor, indices: &[usize], d: &Tensor) -> Result<Tensor> {
    let (v, cols) = (table.dims()[0], table.dims()[1]);
    dispatch1!("embedding-gather", d, table.dims(), |dv: &[_]| {
        scatter_add_rows(dv, indices, v, cols)
    })
}

fn scatter_add_rows<S: Element>(d: &[S], indices: &[usize], v: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::from_f64(0.0); v * cols];
    for (row, &idx) in indices.iter().enumerate() {
        for (o, &g) in out[idx * cols..(idx + 1) * cols]
            .iter_mut()
            .zip(&d[row * cols..(row + 1) * cols])
        {
            *o = *o + g;
        }
    }
    out
}
