//! Bias-corrected Adam.
//!
//! State is lazy per parameter slot: a parameter untouched by a step keeps
//! its moments (and its value) frozen, so optimizing a loss that only
//! reaches a prefix of the model never moves the rest.

use crate::error::{Error, Result};
use crate::numerics::ops::dispatch2;
use crate::numerics::tensor::{Storage, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct SlotState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Optimizer over a fixed number of parameter slots.
pub struct Adam {
    cfg: AdamConfig,
    slots: Vec<Option<SlotState>>,
}

impl Adam {
    pub fn new(num_slots: usize, cfg: AdamConfig) -> Adam {
        Adam {
            cfg,
            slots: (0..num_slots).map(|_| None).collect(),
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    /// One update for one parameter. `name` labels numerical failures.
    /// Moments are kept in f64 regardless of the parameter dtype.
    pub fn step(
        &mut self,
        slot: usize,
        name: &str,
        param: &Tensor,
        grad: &Tensor,
        lr: f64,
    ) -> Result<Tensor> {
        if param.dims() != grad.dims() {
            return Err(Error::shape(
                "adam-step",
                format!(
                    "param `{name}` {:?} vs grad {:?}",
                    param.dims(),
                    grad.dims()
                ),
            ));
        }
        let gvals = grad.to_f64_vec();
        if gvals.iter().any(|g| g.is_nan()) {
            return Err(Error::numerical(format!(
                "NaN gradient for parameter `{name}`; step aborted"
            )));
        }
        let state = self.slots[slot].get_or_insert_with(|| SlotState {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
            step: 0,
        });
        if state.m.len() != param.len() {
            return Err(Error::shape(
                "adam-step",
                format!("state for `{name}` holds {} moments, param has {} elements",
                    state.m.len(), param.len()),
            ));
        }
        state.step += 1;
        let t = state.step as i32;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);

        let mut delta = vec![0.0f64; param.len()];
        for i in 0..param.len() {
            let g = gvals[i];
            state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
            state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
            let mhat = state.m[i] / bc1;
            let vhat = state.v[i] / bc2;
            delta[i] = -lr * mhat / (vhat.sqrt() + self.cfg.eps);
        }
        let delta_t = Tensor::from_f64(param.dims(), delta)?.cast(param.dtype())?;
        apply_delta(param, &delta_t)
    }

    /// Moment tensors for checkpointing (zeros when the slot is untouched).
    pub fn moments(&self, slot: usize, like: &Tensor) -> (Tensor, Tensor, u64) {
        match &self.slots[slot] {
            Some(s) => (
                Tensor::from_f64(like.dims(), s.m.clone()).unwrap(),
                Tensor::from_f64(like.dims(), s.v.clone()).unwrap(),
                s.step,
            ),
            None => (
                Tensor::zeros(like.dims(), crate::numerics::DType::F64).unwrap(),
                Tensor::zeros(like.dims(), crate::numerics::DType::F64).unwrap(),
                0,
            ),
        }
    }

    /// Restore one slot from checkpointed moments.
    pub fn restore(&mut self, slot: usize, m: &Tensor, v: &Tensor, step: u64) -> Result<()> {
        if m.dims() != v.dims() {
            return Err(Error::invalid("adam restore: m/v shape mismatch"));
        }
        self.slots[slot] = if step == 0 {
            None
        } else {
            Some(SlotState {
                m: m.to_f64_vec(),
                v: v.to_f64_vec(),
                step,
            })
        };
        Ok(())
    }
}

fn apply_delta(param: &Tensor, delta: &Tensor) -> Result<Tensor> {
    dispatch2!("adam-step", param, delta, param.dims(), |p: &[_], d: &[_]| {
        p.iter().zip(d).map(|(&a, &b)| a + b).collect::<Vec<_>>()
    })
}
