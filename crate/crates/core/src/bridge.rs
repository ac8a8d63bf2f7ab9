//! The stage bridge: a per-channel affine map `W[c]*x + B[c]` that aligns
//! the upsampled end of one stage with the start distribution of the next,
//! plus its MSE pretraining and a closed-form least-squares oracle.
//!
//! Training pairs are coupled: the pair's input is the target seen through
//! Down then Up, using the target's own noise draw. With an independent
//! noise draw the regression could only fit conditional means; the coupled
//! pair makes the optimum sharp and gives Down(input) == Down(target)
//! exactly.

use rand::Rng;

use crate::error::{Error, Result};
use crate::flowcore::{interpolate, WindowSchedule};
use crate::numerics::ops::{dispatch1, image_dims};
use crate::numerics::tensor::{Storage, Tensor};
use crate::numerics::DType;
use crate::pyramid::{downsample, upsample};
use crate::rng::{stream, StreamDomain};

/// Per-channel affine connector between adjacent stages. `stage_pair` is
/// `(k, k+1)`: the bridge is applied to stage k's upsampled output to start
/// stage k+1. `boundary_u` is the noise level the stages share.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeParams {
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
    pub stage_pair: (usize, usize),
    pub boundary_u: f64,
}

impl BridgeParams {
    pub fn identity(channels: usize, stage_pair: (usize, usize), boundary_u: f64) -> BridgeParams {
        BridgeParams {
            scale: vec![1.0; channels],
            bias: vec![0.0; channels],
            stage_pair,
            boundary_u,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn is_finite(&self) -> bool {
        self.scale.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// Apply `out[c,i,j] = W[c]*x[c,i,j] + B[c]` in the tensor's dtype.
pub fn bridge_apply(params: &BridgeParams, x: &Tensor) -> Result<Tensor> {
    let [c, r] = image_dims("bridge-apply", x)?;
    if c != params.channels() {
        return Err(Error::shape(
            "bridge-apply",
            format!("{c} channels vs {} bridge channels", params.channels()),
        ));
    }
    dispatch1!("bridge-apply", x, x.dims(), |v: &[_]| {
        apply_channels(v, c, r, &params.scale, &params.bias)
    })
}

fn apply_channels<S: crate::numerics::ops::Element>(
    v: &[S],
    c: usize,
    r: usize,
    scale: &[f64],
    bias: &[f64],
) -> Vec<S> {
    let mut out = Vec::with_capacity(v.len());
    for ch in 0..c {
        let w = S::from_f64(scale[ch]);
        let b = S::from_f64(bias[ch]);
        for &p in &v[ch * r * r..(ch + 1) * r * r] {
            out.push(w * p + b);
        }
    }
    out
}

/// Build one coupled pretraining pair at resolution r_k:
/// `target = interpolate(data, noise, boundary_u)` and
/// `input = Up(Down(target, 2), 2)`.
pub fn bridge_training_pair(
    data: &Tensor,
    noise: &Tensor,
    boundary_u: f64,
) -> Result<(Tensor, Tensor)> {
    let [_, r] = image_dims("bridge-training-pair", data)?;
    if r < 2 {
        return Err(Error::invalid(format!(
            "bridge pair needs resolution >= 2, got {r}"
        )));
    }
    if !(0.0 < boundary_u && boundary_u < 1.0) {
        return Err(Error::invalid(format!(
            "stage boundary {boundary_u} must lie strictly inside (0, 1)"
        )));
    }
    let target = interpolate(data, noise, boundary_u)?.value;
    let input = upsample(&downsample(&target, 2)?, 2)?;
    Ok((input, target))
}

/// Streaming per-channel least-squares accumulator for the affine fit.
#[derive(Debug, Clone)]
pub struct AffineAccumulator {
    channels: usize,
    n: f64,
    sum_x: Vec<f64>,
    sum_y: Vec<f64>,
    sum_xx: Vec<f64>,
    sum_xy: Vec<f64>,
}

impl AffineAccumulator {
    pub fn new(channels: usize) -> AffineAccumulator {
        AffineAccumulator {
            channels,
            n: 0.0,
            sum_x: vec![0.0; channels],
            sum_y: vec![0.0; channels],
            sum_xx: vec![0.0; channels],
            sum_xy: vec![0.0; channels],
        }
    }

    pub fn push(&mut self, input: &Tensor, target: &Tensor) -> Result<()> {
        if input.dims() != target.dims() {
            return Err(Error::shape(
                "closed-form-affine",
                format!("{:?} vs {:?}", input.dims(), target.dims()),
            ));
        }
        let [c, r] = image_dims("closed-form-affine", input)?;
        if c != self.channels {
            return Err(Error::shape(
                "closed-form-affine",
                format!("{c} channels vs accumulator of {}", self.channels),
            ));
        }
        let xin = input.to_f64_vec();
        let yin = target.to_f64_vec();
        let per = r * r;
        for ch in 0..c {
            for i in 0..per {
                let x = xin[ch * per + i];
                let y = yin[ch * per + i];
                self.sum_x[ch] += x;
                self.sum_y[ch] += y;
                self.sum_xx[ch] += x * x;
                self.sum_xy[ch] += x * y;
            }
        }
        self.n += per as f64;
        Ok(())
    }

    pub fn samples_per_channel(&self) -> f64 {
        self.n
    }

    /// MSE-optimal per-channel fit: `W = Cov(x,y)/Var(x)`,
    /// `B = mean(y) - W*mean(x)`. Channels with zero input variance are
    /// flagged degenerate and get `W = 0`, `B = mean(y)`.
    pub fn solve(&self, stage_pair: (usize, usize), boundary_u: f64) -> Result<ClosedFormFit> {
        if self.n < 2.0 {
            return Err(Error::invalid(
                "closed-form affine fit needs at least 2 samples per channel",
            ));
        }
        let mut scale = vec![0.0; self.channels];
        let mut bias = vec![0.0; self.channels];
        let mut degenerate = vec![false; self.channels];
        for ch in 0..self.channels {
            let mx = self.sum_x[ch] / self.n;
            let my = self.sum_y[ch] / self.n;
            let var = self.sum_xx[ch] / self.n - mx * mx;
            let cov = self.sum_xy[ch] / self.n - mx * my;
            if var <= 0.0 {
                scale[ch] = 0.0;
                bias[ch] = my;
                degenerate[ch] = true;
            } else {
                scale[ch] = cov / var;
                bias[ch] = my - scale[ch] * mx;
            }
        }
        Ok(ClosedFormFit {
            params: BridgeParams {
                scale,
                bias,
                stage_pair,
                boundary_u,
            },
            degenerate,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ClosedFormFit {
    pub params: BridgeParams,
    /// Per-channel flag: input variance was zero, so W is meaningless.
    pub degenerate: Vec<bool>,
}

/// Closed-form least-squares fit over a list of coupled pairs.
pub fn closed_form_affine(
    inputs: &[Tensor],
    targets: &[Tensor],
    stage_pair: (usize, usize),
    boundary_u: f64,
) -> Result<ClosedFormFit> {
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(Error::invalid(format!(
            "{} inputs vs {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    let [c, _] = image_dims("closed-form-affine", &inputs[0])?;
    let mut acc = AffineAccumulator::new(c);
    for (x, y) in inputs.iter().zip(targets) {
        acc.push(x, y)?;
    }
    acc.solve(stage_pair, boundary_u)
}

/// Settings for bridge pretraining. Defaults follow the 10k-step, lr 1e-3
/// regime; the returned parameters are the tail average of the Adam
/// iterates, which removes the stationary optimizer wobble around the
/// quadratic optimum.
#[derive(Debug, Clone)]
pub struct BridgeTrainConfig {
    pub lr: f64,
    pub steps: u64,
    pub batch: usize,
    pub seed: u64,
    /// Fraction of final steps whose iterates are averaged into the result.
    pub tail_average: f64,
}

impl Default for BridgeTrainConfig {
    fn default() -> Self {
        BridgeTrainConfig {
            lr: 1e-3,
            steps: 10_000,
            batch: 256,
            seed: 0,
            tail_average: 0.25,
        }
    }
}

/// Pretrain the bridge between `stage` and `stage + 1` by Adam on the MSE
/// of the per-channel affine map over coupled pairs drawn from `images`.
///
/// `images` must be at the schedule's base resolution; pairs are built at
/// stage `stage + 1`'s resolution.
pub fn pretrain_bridge(
    images: &[Tensor],
    schedule: &WindowSchedule,
    stage: usize,
    cfg: &BridgeTrainConfig,
) -> Result<BridgeParams> {
    if stage == 0 || stage >= schedule.stages() {
        return Err(Error::invalid(format!(
            "bridge stage {stage} outside 1..={}",
            schedule.stages() - 1
        )));
    }
    if images.is_empty() {
        return Err(Error::invalid("bridge pretraining needs a dataset"));
    }
    let [c, img_r] = image_dims("pretrain-bridge", &images[0])?;
    let r_next = schedule.stage_resolution(stage + 1)?;
    if img_r < r_next {
        return Err(Error::invalid(format!(
            "dataset resolution {img_r} below stage resolution {r_next}"
        )));
    }
    let (boundary_u, _) = schedule.stage_window(stage)?;

    let mut adam = crate::numerics::Adam::new(2, crate::numerics::AdamConfig::default());
    let mut w = Tensor::full(&[c], DType::F64, 1.0)?;
    let mut b = Tensor::zeros(&[c], DType::F64)?;
    let mut tail_w = vec![0.0f64; c];
    let mut tail_b = vec![0.0f64; c];
    let mut tail_n = 0.0f64;
    let tail_start = ((cfg.steps as f64) * (1.0 - cfg.tail_average)) as u64;

    for step in 0..cfg.steps {
        let mut rng = stream(cfg.seed, StreamDomain::Bridge, stage as u64, step);
        // Per-channel gradient accumulators for the batch.
        let mut gw = vec![0.0f64; c];
        let mut gb = vec![0.0f64; c];
        let mut loss = 0.0f64;
        let mut count = 0.0f64;
        let wv = w.f64s()?.to_vec();
        let bv = b.f64s()?.to_vec();
        for _ in 0..cfg.batch {
            let idx = rng.gen_range(0..images.len());
            let data = downsample(&images[idx], img_r / r_next)?;
            let noise = Tensor::randn(&[c, r_next, r_next], DType::F32, &mut rng)?;
            let (input, target) = bridge_training_pair(&data, &noise, boundary_u)?;
            let xin = input.to_f64_vec();
            let yin = target.to_f64_vec();
            let per = r_next * r_next;
            for ch in 0..c {
                for i in 0..per {
                    let x = xin[ch * per + i];
                    let resid = wv[ch] * x + bv[ch] - yin[ch * per + i];
                    gw[ch] += 2.0 * resid * x;
                    gb[ch] += 2.0 * resid;
                    loss += resid * resid;
                }
            }
            count += per as f64;
        }
        let scale = 1.0 / (count * c as f64);
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::numerical(format!(
                "bridge pretraining diverged at step {step} (loss = {loss})"
            )));
        }
        let per_channel = 1.0 / count;
        let gw_t = Tensor::from_f64(&[c], gw.iter().map(|g| g * per_channel).collect())?;
        let gb_t = Tensor::from_f64(&[c], gb.iter().map(|g| g * per_channel).collect())?;
        w = adam.step(0, "bridge.scale", &w, &gw_t, cfg.lr)?;
        b = adam.step(1, "bridge.bias", &b, &gb_t, cfg.lr)?;

        if step >= tail_start {
            for ch in 0..c {
                tail_w[ch] += w.f64s()?[ch];
                tail_b[ch] += b.f64s()?[ch];
            }
            tail_n += 1.0;
        }
    }

    let (scale, bias) = if tail_n > 0.0 {
        (
            tail_w.iter().map(|v| v / tail_n).collect(),
            tail_b.iter().map(|v| v / tail_n).collect(),
        )
    } else {
        (w.f64s()?.to_vec(), b.f64s()?.to_vec())
    };
    let params = BridgeParams {
        scale,
        bias,
        stage_pair: (stage, stage + 1),
        boundary_u,
    };
    if !params.is_finite() {
        return Err(Error::numerical("bridge pretraining produced non-finite parameters"));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowcore::make_schedule;
    use crate::numerics::ops;

    #[test]
    fn identity_and_affine_inverse() {
        let x = Tensor::from_f32(&[1, 2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let id = BridgeParams::identity(1, (1, 2), 0.5);
        assert!(bridge_apply(&id, &x).unwrap().bits_eq(&x));

        let p = BridgeParams {
            scale: vec![2.0],
            bias: vec![1.0],
            stage_pair: (1, 2),
            boundary_u: 0.5,
        };
        let y = bridge_apply(&p, &Tensor::from_f32(&[1, 1, 1], vec![1.0]).unwrap()).unwrap();
        assert_eq!(y.f32s().unwrap(), &[3.0]);

        let inv = BridgeParams {
            scale: vec![0.5],
            bias: vec![-0.5],
            stage_pair: (1, 2),
            boundary_u: 0.5,
        };
        let mut rng = stream(1, StreamDomain::Bridge, 0, 0);
        let z = Tensor::randn(&[1, 4, 4], DType::F32, &mut rng).unwrap();
        let round = bridge_apply(&inv, &bridge_apply(&p, &z).unwrap()).unwrap();
        for (a, b) in round.to_f64_vec().iter().zip(z.to_f64_vec()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let p = BridgeParams::identity(2, (1, 2), 0.5);
        let x = Tensor::from_f32(&[1, 2, 2], vec![0.0; 4]).unwrap();
        assert!(bridge_apply(&p, &x).is_err());
    }

    #[test]
    fn bridge_apply_is_linear_in_x() {
        let p = BridgeParams {
            scale: vec![1.3],
            bias: vec![0.0],
            stage_pair: (1, 2),
            boundary_u: 0.5,
        };
        let mut rng = stream(2, StreamDomain::Bridge, 0, 0);
        let x = Tensor::randn(&[1, 4, 4], DType::F64, &mut rng).unwrap();
        let y = Tensor::randn(&[1, 4, 4], DType::F64, &mut rng).unwrap();
        let lhs = bridge_apply(&p, &ops::add(&x, &y).unwrap()).unwrap();
        // With zero bias, apply(x + y) == apply(x) + apply(y).
        let rhs = ops::add(&bridge_apply(&p, &x).unwrap(), &bridge_apply(&p, &y).unwrap()).unwrap();
        for (a, b) in lhs.to_f64_vec().iter().zip(rhs.to_f64_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn coupled_pair_is_downsample_consistent() {
        let mut rng = stream(3, StreamDomain::Bridge, 0, 0);
        let data = Tensor::randn(&[1, 8, 8], DType::F32, &mut rng).unwrap();
        let noise = Tensor::randn(&[1, 8, 8], DType::F32, &mut rng).unwrap();
        let (input, target) = bridge_training_pair(&data, &noise, 1.0 / 3.0).unwrap();
        assert!(downsample(&input, 2)
            .unwrap()
            .bits_eq(&downsample(&target, 2).unwrap()));
    }

    #[test]
    fn constant_data_at_zero_noise_roundtrips() {
        // Down then Up is exact on constants, so input == target.
        let data = Tensor::full(&[1, 4, 4], DType::F32, 0.7).unwrap();
        let noise = Tensor::zeros(&[1, 4, 4], DType::F32).unwrap();
        let (input, target) = bridge_training_pair(&data, &noise, 1e-9).unwrap();
        for (a, b) in input.to_f64_vec().iter().zip(target.to_f64_vec()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn closed_form_exact_linear_fit() {
        let mk = |v: f32| Tensor::from_f32(&[1, 1, 1], vec![v]).unwrap();
        let fit = closed_form_affine(
            &[mk(1.0), mk(2.0), mk(3.0)],
            &[mk(3.0), mk(5.0), mk(7.0)],
            (1, 2),
            0.5,
        )
        .unwrap();
        assert!((fit.params.scale[0] - 2.0).abs() < 1e-9);
        assert!((fit.params.bias[0] - 1.0).abs() < 1e-9);
        assert!(!fit.degenerate[0]);
    }

    #[test]
    fn closed_form_identity_when_target_equals_input() {
        let mut rng = stream(4, StreamDomain::Bridge, 0, 0);
        let xs: Vec<Tensor> = (0..8)
            .map(|_| Tensor::randn(&[1, 4, 4], DType::F32, &mut rng).unwrap())
            .collect();
        let fit = closed_form_affine(&xs, &xs, (1, 2), 0.5).unwrap();
        assert!((fit.params.scale[0] - 1.0).abs() < 1e-9);
        assert!(fit.params.bias[0].abs() < 1e-9);
    }

    #[test]
    fn closed_form_degenerate_flagged() {
        let mk = |v: f32| Tensor::from_f32(&[1, 1, 1], vec![v]).unwrap();
        let fit = closed_form_affine(
            &[mk(2.0), mk(2.0), mk(2.0)],
            &[mk(1.0), mk(3.0), mk(5.0)],
            (1, 2),
            0.5,
        )
        .unwrap();
        assert!(fit.degenerate[0]);
        assert_eq!(fit.params.scale[0], 0.0);
        assert!((fit.params.bias[0] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn pretrain_identity_task_converges_to_identity() {
        // When boundary noise is almost zero and data is structureless,
        // input almost equals target and the fit should be near (1, 0). Use
        // a tiny run to keep the unit test fast; the full 10k-step regime is
        // exercised by the acceptance suite.
        let mut rng = stream(5, StreamDomain::Bridge, 7, 0);
        let images: Vec<Tensor> = (0..32)
            .map(|_| {
                let x = Tensor::randn(&[1, 8, 8], DType::F32, &mut rng).unwrap();
                upsample(&x, 2).unwrap() // piecewise-constant at factor 2
            })
            .collect();
        let schedule = make_schedule(2, &[999.0, 1.0], 16).unwrap();
        // Stage 1's window is [1/1000, 1], so the stage boundary sits at a
        // u where noise barely matters; Up(Down(.)) is then exact on these
        // piecewise-constant images up to the noise term.
        let cfg = BridgeTrainConfig {
            steps: 800,
            batch: 16,
            ..BridgeTrainConfig::default()
        };
        let params = pretrain_bridge(&images, &schedule, 1, &cfg).unwrap();
        assert!(
            (params.scale[0] - 1.0).abs() < 0.05,
            "scale = {}",
            params.scale[0]
        );
        assert!(params.bias[0].abs() < 0.05, "bias = {}", params.bias[0]);
    }
}
