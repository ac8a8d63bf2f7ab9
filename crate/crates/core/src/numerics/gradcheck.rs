//! Finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::numerics::tape::{NodeId, Tape};
use crate::numerics::tensor::Tensor;

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences at `point`, coordinate by coordinate. Returns the
/// maximum over coordinates of
/// `|analytic - central| / max(1, |central|)`.
///
/// `f` receives a tape and the node holding the point and must return the
/// scalar loss node. Use f64 points; f32 finite differences are too coarse
/// to say anything.
pub fn gradcheck<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let loss = f(&mut tape, x)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::invalid("gradcheck requires a scalar-valued function"));
    }
    let grads = tape.backward(loss)?;
    let analytic = grads.of(x)?.to_f64_vec();

    let base = point.to_f64_vec();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let eval = |delta: f64| -> Result<f64> {
            let mut shifted = base.clone();
            shifted[i] += delta;
            let t = Tensor::from_f64(point.dims(), shifted)?.cast(point.dtype())?;
            let mut tape = Tape::no_grad();
            let x = tape.leaf(t);
            let loss = f(&mut tape, x)?;
            tape.value(loss).item()
        };
        let central = (eval(h)? - eval(-h)?) / (2.0 * h);
        let err = (analytic[i] - central).abs() / central.abs().max(1.0);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}
