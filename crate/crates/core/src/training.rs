//! Multi-resolution joint training.
//!
//! Every step composes a mixed-resolution batch (stage assignment by
//! multinomial draw with phase-scheduled ratios), builds one coupled
//! window pair per element, evaluates the stage prefix on the interpolated
//! state, and applies one Adam update to the union of touched parameters.
//! Bridge parameters are inputs to pair construction only and never
//! receive gradients.
//!
//! Reproducibility: the batch at step s draws from stream(seed, Batch, s),
//! and element i of that batch from stream(seed, Element, s, i), in the
//! fixed order noise image, noise level, condition drop. Gradients
//! accumulate in element order. Resuming from a checkpoint therefore
//! replays the exact run.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::bridge::{bridge_apply, BridgeParams};
use crate::datagen::{nckp::Checkpoint, Dataset};
use crate::error::{Error, Result};
use crate::flowcore::{
    interpolate, local_coordinate, sample_noise_level, velocity_target, window_interpolate,
    LogitNormalParams, WindowEndpoints, WindowSchedule,
};
use crate::numerics::{Adam, Tape, Tensor};
use crate::progmodel::{Conditioning, ParamId, ProgressiveModel};
use crate::pyramid::{downsample, upsample};
use crate::rng::{stream, StreamDomain};

/// One phase of the mix schedule: per-stage sampling ratios, step count,
/// learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub ratios: Vec<f64>,
    pub steps: u64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub schedule: WindowSchedule,
    /// Logit-normal parameters per stage.
    pub lognorm: Vec<LogitNormalParams>,
    pub phases: Vec<Phase>,
    pub batch_size: usize,
    pub cfg_drop_prob: f64,
    /// Per-stage loss weights; `None` ties them to the active phase's mix
    /// ratios. Either way they are renormalized to sum to 1.
    pub loss_weights: Option<Vec<f64>>,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl TrainConfig {
    /// Desk-scale default mirroring the three-phase shape: coarse-heavy
    /// 4:2:1 for 8k steps, 2:4:1 for 6k, then fine-heavy 1:2:4 with the
    /// learning rate dropped to 5e-5 for 6k.
    pub fn toy(schedule: WindowSchedule, seed: u64) -> TrainConfig {
        TrainConfig {
            schedule,
            lognorm: vec![LogitNormalParams::default(); 3],
            phases: vec![
                Phase {
                    ratios: vec![4.0, 2.0, 1.0],
                    steps: 8000,
                    lr: 1e-4,
                },
                Phase {
                    ratios: vec![2.0, 4.0, 1.0],
                    steps: 6000,
                    lr: 1e-4,
                },
                Phase {
                    ratios: vec![1.0, 2.0, 4.0],
                    steps: 6000,
                    lr: 5e-5,
                },
            ],
            batch_size: 32,
            cfg_drop_prob: 0.1,
            loss_weights: None,
            seed,
            checkpoint_every: 1000,
            grad_clip: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.schedule.stages();
        if self.lognorm.len() != k {
            return Err(Error::invalid(format!(
                "{} logit-normal settings for {k} stages",
                self.lognorm.len()
            )));
        }
        if self.phases.is_empty() {
            return Err(Error::invalid("at least one phase required"));
        }
        for (i, p) in self.phases.iter().enumerate() {
            if p.ratios.len() != k {
                return Err(Error::invalid(format!(
                    "phase {} has {} ratios for {k} stages",
                    i + 1,
                    p.ratios.len()
                )));
            }
            if p.ratios.iter().any(|&r| r < 0.0) || p.ratios.iter().sum::<f64>() <= 0.0 {
                return Err(Error::invalid(format!(
                    "phase {} ratios must be nonnegative with positive sum",
                    i + 1
                )));
            }
            if !(p.lr > 0.0) {
                return Err(Error::invalid(format!("phase {} lr must be positive", i + 1)));
            }
        }
        if let Some(w) = &self.loss_weights {
            if w.len() != k || w.iter().any(|&x| x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::invalid("bad loss weight override"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.cfg_drop_prob) {
            return Err(Error::invalid(format!(
                "cfg drop probability {} outside [0, 1)",
                self.cfg_drop_prob
            )));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.phases.iter().map(|p| p.steps).sum()
    }

    /// Phase owning a global step index (1-based phase number).
    pub fn phase_of(&self, step: u64) -> (usize, &Phase) {
        let mut acc = 0;
        for (i, p) in self.phases.iter().enumerate() {
            acc += p.steps;
            if step < acc {
                return (i + 1, p);
            }
        }
        (self.phases.len(), self.phases.last().unwrap())
    }

    /// Stage loss weights for a phase, renormalized to sum to 1.
    pub fn stage_weights(&self, phase: &Phase) -> Vec<f64> {
        let raw = self.loss_weights.as_ref().unwrap_or(&phase.ratios);
        let total: f64 = raw.iter().sum();
        raw.iter().map(|&w| w / total).collect()
    }
}

/// One training element: a stage, its coupled window endpoints, the sampled
/// noise level, and the conditioning.
#[derive(Debug, Clone)]
pub struct WindowPair {
    pub stage: usize,
    pub endpoints: WindowEndpoints,
    pub u: f64,
    pub class_id: usize,
    pub drop: bool,
}

/// Build the coupled pair for one element. The same noise draw serves both
/// endpoints; stage 1's start is that pure noise itself (its window ends at
/// u = 1), deeper stages bridge the upsampled coarse view of the noisy
/// boundary. Draw order: noise image, noise level, drop flag.
#[allow(clippy::too_many_arguments)]
pub fn build_window_pair(
    image: &Tensor,
    class_id: usize,
    stage: usize,
    schedule: &WindowSchedule,
    bridges: &[BridgeParams],
    lognorm: &LogitNormalParams,
    drop_prob: f64,
    rng: &mut impl Rng,
) -> Result<WindowPair> {
    let r_k = schedule.stage_resolution(stage)?;
    let dims = image.dims();
    if dims.len() != 3 || dims[1] < r_k {
        return Err(Error::invalid(format!(
            "image of shape {dims:?} cannot serve stage {stage} at resolution {r_k}"
        )));
    }
    let channels = dims[0];
    let data = downsample(image, dims[1] / r_k)?;
    let noise = Tensor::randn(&[channels, r_k, r_k], image.dtype(), rng)?;
    let (lo, hi) = schedule.stage_window(stage)?;

    let end = interpolate(&data, &noise, lo)?;
    let start = if stage == 1 {
        // The noisiest window ends at u = 1, where the path is pure noise.
        crate::flowcore::FlowState::new(noise.clone(), hi)?
    } else {
        let params = bridges
            .iter()
            .find(|b| b.stage_pair == (stage - 1, stage))
            .ok_or_else(|| {
                Error::invalid(format!("no bridge parameters for stage pair ({}, {stage})", stage - 1))
            })?;
        let at_hi = interpolate(&data, &noise, hi)?;
        let coarse = upsample(&downsample(&at_hi.value, 2)?, 2)?;
        crate::flowcore::FlowState::new(bridge_apply(params, &coarse)?, hi)?
    };
    let endpoints = WindowEndpoints::new(start, end)?;
    let u = sample_noise_level(lognorm, lo, hi, rng)?;
    let drop = drop_prob > 0.0 && rng.gen_bool(drop_prob);
    Ok(WindowPair {
        stage,
        endpoints,
        u,
        class_id,
        drop,
    })
}

/// Compose a batch: each element gets a stage by multinomial draw over
/// `ratios` (1-based stage index) and an image drawn uniformly with
/// replacement. Returns (image index, stage) pairs.
pub fn make_batch(
    dataset_len: usize,
    ratios: &[f64],
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(usize, usize)>> {
    if dataset_len == 0 {
        return Err(Error::invalid("cannot draw batches from an empty dataset"));
    }
    if ratios.iter().any(|&r| r < 0.0) {
        return Err(Error::invalid("stage ratios must be nonnegative"));
    }
    let total: f64 = ratios.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("stage ratios sum to zero"));
    }
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let x: f64 = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut stage = ratios.len();
        for (i, &r) in ratios.iter().enumerate() {
            acc += r;
            if x < acc {
                stage = i + 1;
                break;
            }
        }
        let img = rng.gen_range(0..dataset_len);
        out.push((img, stage));
    }
    Ok(out)
}

/// Per-stage mean losses of one step plus the weighted total.
#[derive(Debug, Clone)]
pub struct StepLosses {
    /// (stage, mean loss over that stage's elements), stages ascending.
    pub stage_losses: Vec<(usize, f64)>,
    pub total: f64,
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
/// A `max_norm` of 0 disables clipping. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0f64;
    for (_, g) in grads.iter() {
        match g.dtype() {
            crate::numerics::DType::F32 => {
                for &v in g.f32s()? {
                    sq += (v as f64) * (v as f64);
                }
            }
            _ => {
                for &v in g.f64s()? {
                    sq += v * v;
                }
            }
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            *g = crate::numerics::ops::scalar_mul(g, scale)?;
        }
    }
    Ok(norm)
}

/// Evaluate the weighted multi-window loss on prebuilt pairs and apply one
/// Adam update. `weights` has one entry per stage and is assumed
/// normalized. Bridge parameters are not inputs here and cannot move.
pub fn step_on_pairs(
    model: &mut ProgressiveModel,
    adam: &mut Adam,
    pairs: &[WindowPair],
    weights: &[f64],
    lr: f64,
    grad_clip: f64,
) -> Result<StepLosses> {
    let k = model.config().stages;
    if weights.len() != k {
        return Err(Error::invalid(format!("{} weights for {k} stages", weights.len())));
    }
    let mut stage_counts = vec![0usize; k];
    for p in pairs {
        if p.stage == 0 || p.stage > k {
            return Err(Error::invalid(format!("pair stage {} outside 1..={k}", p.stage)));
        }
        stage_counts[p.stage - 1] += 1;
    }

    let mut grand: Vec<Option<Tensor>> = vec![None; model.params().len()];
    let mut stage_loss_sums = vec![0.0f64; k];

    for pair in pairs {
        let (lo, hi) = pair.endpoints.window();
        let sigma = local_coordinate(pair.u, lo, hi)?;
        let x_t = window_interpolate(&pair.endpoints, sigma)?;
        let target = velocity_target(&pair.endpoints)?;

        let mut tape = Tape::new();
        let mut binding = model.bind();
        let x_node = tape.constant(x_t.value.clone());
        let v = model.stage_forward(
            &mut tape,
            &mut binding,
            pair.stage,
            x_node,
            &Conditioning {
                u: pair.u,
                class_id: pair.class_id,
                drop: pair.drop,
            },
        )?;
        let t_node = tape.constant(target);
        let loss_node = crate::flowcore::cfm_loss_on_tape(&mut tape, v, t_node)?;
        let loss = tape.value(loss_node).item()?;
        if !loss.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite loss {loss} on stage {} element",
                pair.stage
            )));
        }
        stage_loss_sums[pair.stage - 1] += loss;

        let grads = tape.backward(loss_node)?;
        let factor = weights[pair.stage - 1] / stage_counts[pair.stage - 1] as f64;
        for &pid in binding.touched() {
            let node = binding.node_of(pid).unwrap();
            let g = grads.of(node)?;
            match &mut grand[pid] {
                Some(acc) => crate::numerics::ops::axpy_assign(acc, g, factor)?,
                slot @ None => {
                    let mut zero = Tensor::zeros(g.dims(), g.dtype())?;
                    crate::numerics::ops::axpy_assign(&mut zero, g, factor)?;
                    *slot = Some(zero);
                }
            }
        }
    }

    // Collect in canonical id order, clip, and update.
    let mut grads: Vec<(ParamId, Tensor)> = grand
        .into_iter()
        .enumerate()
        .filter_map(|(id, g)| g.map(|g| (id, g)))
        .collect();
    clip_global_norm(&mut grads, grad_clip)?;
    for (id, g) in &grads {
        let name = model.params().name(*id).to_string();
        let updated = adam.step(*id, &name, model.params().get(*id), g, lr)?;
        model.params_mut().set(*id, updated)?;
    }

    let mut stage_losses = Vec::new();
    let mut total = 0.0;
    for s in 0..k {
        if stage_counts[s] > 0 {
            let mean = stage_loss_sums[s] / stage_counts[s] as f64;
            stage_losses.push((s + 1, mean));
            total += weights[s] * mean;
        }
    }
    Ok(StepLosses { stage_losses, total })
}

/// One full training step at global index `step`: draw the batch, build
/// pairs from per-element streams, evaluate, update.
pub fn train_step(
    model: &mut ProgressiveModel,
    adam: &mut Adam,
    bridges: &[BridgeParams],
    dataset: &Dataset,
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepLosses> {
    let (_, phase) = cfg.phase_of(step);
    let assignments = make_batch(
        dataset.len(),
        &phase.ratios,
        cfg.batch_size,
        &mut stream(cfg.seed, StreamDomain::Batch, step, 0),
    )?;
    let mut pairs = Vec::with_capacity(assignments.len());
    for (i, &(img, stage)) in assignments.iter().enumerate() {
        let mut rng = stream(cfg.seed, StreamDomain::Element, step, i as u64);
        pairs.push(
            build_window_pair(
                &dataset.images[img],
                dataset.labels[img] as usize,
                stage,
                &cfg.schedule,
                bridges,
                &cfg.lognorm[stage - 1],
                cfg.cfg_drop_prob,
                &mut rng,
            )
            .map_err(|e| Error::invalid(format!("step {step}, element {i}: {e}")))?,
        );
    }
    let weights = cfg.stage_weights(phase);
    step_on_pairs(model, adam, &pairs, &weights, phase.lr, cfg.grad_clip)
        .map_err(|e| match e {
            Error::Numerical(m) => Error::numerical(format!("step {step}: {m}")),
            other => other,
        })
}

pub const CHECKPOINT_NAME: &str = "checkpoint.nckp";
pub const LOSS_LOG_NAME: &str = "loss_log.csv";

/// Serialize model, bridges, optimizer state, and the step counter,
/// plus caller-supplied metadata entries (config text and the like).
pub fn build_checkpoint(
    model: &ProgressiveModel,
    adam: &Adam,
    bridges: &[BridgeParams],
    step: u64,
    meta: &[(String, Tensor)],
) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::new();
    for (name, tensor) in meta {
        ckpt.insert(name.clone(), tensor.clone())?;
    }
    for (_, name, tensor) in model.params().iter() {
        ckpt.insert(name, tensor.clone())?;
    }
    for b in bridges {
        let k = b.stage_pair.0;
        ckpt.insert(
            format!("bridge.{k}.scale"),
            Tensor::from_f64(&[b.channels()], b.scale.clone())?,
        )?;
        ckpt.insert(
            format!("bridge.{k}.bias"),
            Tensor::from_f64(&[b.channels()], b.bias.clone())?,
        )?;
    }
    for (id, name, tensor) in model.params().iter() {
        let (m, v, t) = adam.moments(id, tensor);
        if t > 0 {
            ckpt.insert(format!("adam.{name}.m"), m)?;
            ckpt.insert(format!("adam.{name}.v"), v)?;
            ckpt.insert(format!("adam.{name}.t"), Tensor::scalar_f64(t as f64))?;
        }
    }
    ckpt.insert("trainer.step", Tensor::scalar_f64(step as f64))?;
    Ok(ckpt)
}

/// Restore model parameters, optimizer state, and the step counter from a
/// checkpoint produced by [`build_checkpoint`].
pub fn restore_checkpoint(
    model: &mut ProgressiveModel,
    adam: &mut Adam,
    ckpt: &Checkpoint,
) -> Result<u64> {
    let ids: Vec<(ParamId, String)> = model
        .params()
        .iter()
        .map(|(id, name, _)| (id, name.to_string()))
        .collect();
    for (id, name) in &ids {
        let t = ckpt.require(name)?;
        let t = t.cast(model.dtype())?;
        model.params_mut().set(*id, t)?;
        if let Some(tt) = ckpt.get(&format!("adam.{name}.t")) {
            let m = ckpt.require(&format!("adam.{name}.m"))?;
            let v = ckpt.require(&format!("adam.{name}.v"))?;
            adam.restore(*id, m, v, tt.item()? as u64)?;
        }
    }
    Ok(ckpt.require("trainer.step")?.item()? as u64)
}

/// Read bridge parameters for a schedule out of a checkpoint.
pub fn bridges_from_checkpoint(
    ckpt: &Checkpoint,
    schedule: &WindowSchedule,
) -> Result<Vec<BridgeParams>> {
    let mut out = Vec::new();
    for k in 1..schedule.stages() {
        let scale = ckpt.require(&format!("bridge.{k}.scale"))?;
        let bias = ckpt.require(&format!("bridge.{k}.bias"))?;
        let (boundary_u, _) = schedule.stage_window(k)?;
        out.push(BridgeParams {
            scale: scale.to_f64_vec(),
            bias: bias.to_f64_vec(),
            stage_pair: (k, k + 1),
            boundary_u,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub steps_run: u64,
    pub final_losses: Vec<(usize, f64)>,
}

/// Execute the full phase schedule, appending one CSV row per stage per
/// step (`step,phase,stage,loss,lr`) and checkpointing every
/// `checkpoint_every` steps plus at the end. With `resume`, training
/// continues from the checkpoint in `out_dir` and appends to the log.
pub fn run_schedule(
    model: &mut ProgressiveModel,
    adam: &mut Adam,
    bridges: &[BridgeParams],
    dataset: &Dataset,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: bool,
    meta: &[(String, Tensor)],
) -> Result<RunReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let ckpt_path = out_dir.join(CHECKPOINT_NAME);
    let log_path = out_dir.join(LOSS_LOG_NAME);

    let mut start_step = 0u64;
    if resume {
        let ckpt = Checkpoint::read_file(&ckpt_path)?;
        start_step = restore_checkpoint(model, adam, &ckpt)?;
    }
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    if !resume {
        // Fresh run: truncate and write the header.
        log = std::fs::File::create(&log_path)?;
        writeln!(log, "step,phase,stage,loss,lr")?;
    }

    let total = cfg.total_steps();
    let mut last_losses = Vec::new();
    for step in start_step..total {
        let (phase_idx, phase) = cfg.phase_of(step);
        let losses = train_step(model, adam, bridges, dataset, cfg, step)?;
        for &(stage, loss) in &losses.stage_losses {
            writeln!(log, "{step},{phase_idx},{stage},{loss},{}", phase.lr)?;
        }
        last_losses = losses.stage_losses;
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            build_checkpoint(model, adam, bridges, step + 1, meta)?.write_file(&ckpt_path)?;
        }
    }
    log.flush()?;
    build_checkpoint(model, adam, bridges, total, meta)?.write_file(&ckpt_path)?;
    Ok(RunReport {
        steps_run: total.saturating_sub(start_step),
        final_losses: last_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowcore::make_schedule;
    use crate::numerics::{AdamConfig, DType};
    use crate::progmodel::ModelConfig;

    fn tiny_model(seed: u64) -> ProgressiveModel {
        let cfg = ModelConfig {
            stages: 3,
            depths: vec![1, 1, 1],
            width: 16,
            heads: 2,
            patch: 2,
            channels: 1,
            num_classes: 3,
            base_resolution: 16,
        };
        ProgressiveModel::init(cfg, DType::F32, &mut stream(seed, StreamDomain::Init, 0, 0)).unwrap()
    }

    fn tiny_dataset(n: usize, r: usize) -> Dataset {
        let spec = crate::datagen::SyntheticSpec::new(n, r, 77);
        let images: Vec<Tensor> = (0..n)
            .map(|i| crate::datagen::render_spec_image(&spec, i).unwrap().0)
            .collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 3) as u8).collect();
        Dataset {
            images,
            labels,
            resolution: r,
            channels: 1,
            classes: vec!["circle".into(), "square".into(), "triangle".into()],
            seed: 77,
        }
    }

    fn identity_bridges(schedule: &WindowSchedule) -> Vec<BridgeParams> {
        (1..schedule.stages())
            .map(|k| {
                let (b, _) = schedule.stage_window(k).unwrap();
                BridgeParams::identity(1, (k, k + 1), b)
            })
            .collect()
    }

    #[test]
    fn pair_construction_stage1_and_degeneration() {
        let schedule = make_schedule(3, &[1.0, 1.0, 1.0], 16).unwrap();
        let ds = tiny_dataset(4, 16);
        let lg = LogitNormalParams::default();
        let mut rng = stream(1, StreamDomain::Element, 0, 0);
        let pair =
            build_window_pair(&ds.images[0], 0, 1, &schedule, &[], &lg, 0.0, &mut rng).unwrap();
        // Stage 1 start is pure noise at u = 1.
        assert_eq!(pair.endpoints.start.noise_level, 1.0);
        assert_eq!(pair.endpoints.start.resolution, 4);
        assert!(pair.u > 2.0 / 3.0 && pair.u < 1.0);

        // K = 1 reduces to the plain noise-to-data pair.
        let flat = make_schedule(1, &[1.0], 16).unwrap();
        let mut rng = stream(1, StreamDomain::Element, 0, 1);
        let pair = build_window_pair(&ds.images[0], 0, 1, &flat, &[], &lg, 0.0, &mut rng).unwrap();
        assert!(pair.endpoints.end.value.bits_eq(&ds.images[0]));
        assert_eq!(pair.endpoints.end.noise_level, 0.0);
        assert_eq!(pair.endpoints.start.noise_level, 1.0);
    }

    #[test]
    fn pair_construction_deeper_stage_is_downsample_consistent() {
        let schedule = make_schedule(3, &[1.0, 1.0, 1.0], 16).unwrap();
        let ds = tiny_dataset(4, 16);
        let bridges = identity_bridges(&schedule);
        let lg = LogitNormalParams::default();
        let mut rng = stream(2, StreamDomain::Element, 0, 0);
        let pair =
            build_window_pair(&ds.images[1], 1, 2, &schedule, &bridges, &lg, 0.0, &mut rng)
                .unwrap();
        assert_eq!(pair.endpoints.start.resolution, 8);
        // With identity bridges the start is Up(Down(state at hi)), so its
        // own downsampling matches the coarse view bitwise.
        let down_start = downsample(&pair.endpoints.start.value, 2).unwrap();
        let down_up = upsample(&down_start, 2).unwrap();
        assert!(down_up.bits_eq(&pair.endpoints.start.value));

        // Missing bridge parameters are rejected.
        let mut rng = stream(2, StreamDomain::Element, 0, 1);
        assert!(build_window_pair(&ds.images[1], 1, 2, &schedule, &[], &lg, 0.0, &mut rng).is_err());
    }

    #[test]
    fn batch_ratios_degenerate_and_empty() {
        let mut rng = stream(3, StreamDomain::Batch, 0, 0);
        let batch = make_batch(10, &[1.0, 0.0, 0.0], 64, &mut rng).unwrap();
        assert!(batch.iter().all(|&(_, s)| s == 1));
        assert!(make_batch(0, &[1.0], 4, &mut rng).is_err());
    }

    #[test]
    fn batch_mix_tracks_ratios() {
        let mut rng = stream(4, StreamDomain::Batch, 0, 0);
        let n = 300_000;
        let batch = make_batch(10, &[1.0, 1.0, 1.0], n, &mut rng).unwrap();
        for s in 1..=3 {
            let frac = batch.iter().filter(|&&(_, st)| st == s).count() as f64 / n as f64;
            assert!((frac - 1.0 / 3.0).abs() < 0.01, "stage {s}: {frac}");
        }
    }

    #[test]
    fn zero_target_zero_gradient_leaves_params_untouched() {
        // The zero-initialized model predicts zero velocity; a pair whose
        // endpoints coincide in value has a zero target, so the loss is 0
        // and no parameter moves.
        let mut model = tiny_model(5);
        let mut adam = Adam::new(model.params().len(), AdamConfig::default());
        let same = Tensor::full(&[1, 4, 4], DType::F32, 0.25).unwrap();
        let endpoints = WindowEndpoints::new(
            crate::flowcore::FlowState::new(same.clone(), 1.0).unwrap(),
            crate::flowcore::FlowState::new(same, 2.0 / 3.0).unwrap(),
        )
        .unwrap();
        let pair = WindowPair {
            stage: 1,
            endpoints,
            u: 0.8,
            class_id: 0,
            drop: false,
        };
        let before: Vec<Tensor> = model.params().iter().map(|(_, _, t)| t.clone()).collect();
        let losses = step_on_pairs(
            &mut model,
            &mut adam,
            &[pair],
            &[1.0, 0.0, 0.0],
            1e-3,
            1.0,
        )
        .unwrap();
        assert_eq!(losses.total, 0.0);
        for (i, (_, _, t)) in model.params().iter().enumerate() {
            assert!(t.bits_eq(&before[i]));
        }
    }

    #[test]
    fn stage1_batch_never_touches_deeper_groups() {
        let mut model = tiny_model(6);
        let mut adam = Adam::new(model.params().len(), AdamConfig::default());
        let schedule = make_schedule(3, &[1.0, 1.0, 1.0], 16).unwrap();
        let ds = tiny_dataset(6, 16);
        let cfg = TrainConfig {
            schedule,
            lognorm: vec![LogitNormalParams::default(); 3],
            phases: vec![Phase {
                ratios: vec![1.0, 0.0, 0.0],
                steps: 3,
                lr: 1e-3,
            }],
            batch_size: 4,
            cfg_drop_prob: 0.1,
            loss_weights: None,
            seed: 11,
            checkpoint_every: 0,
            grad_clip: 1.0,
        };
        let frozen: Vec<(String, Tensor)> = model
            .params()
            .iter()
            .filter(|(_, name, _)| {
                name.starts_with("model.group2")
                    || name.starts_with("model.group3")
                    || name.starts_with("model.head2")
                    || name.starts_with("model.head3")
            })
            .map(|(_, n, t)| (n.to_string(), t.clone()))
            .collect();
        assert!(!frozen.is_empty());
        for step in 0..3 {
            train_step(&mut model, &mut adam, &[], &ds, &cfg, step).unwrap();
        }
        for (name, before) in &frozen {
            let id = model.params().id_of(name).unwrap();
            assert!(model.params().get(id).bits_eq(before), "{name} moved");
        }
        // And the trained prefix did move.
        let id = model.params().id_of("model.head1.w").unwrap();
        assert!(!model
            .params()
            .get(id)
            .bits_eq(&tiny_model(6).params().get(id).clone()));
    }

    #[test]
    fn stage2_loss_reaches_group1_parameters() {
        let mut model = tiny_model(7);
        let mut adam = Adam::new(model.params().len(), AdamConfig::default());
        let schedule = make_schedule(3, &[1.0, 1.0, 1.0], 16).unwrap();
        let ds = tiny_dataset(6, 16);
        let bridges = identity_bridges(&schedule);
        let cfg = TrainConfig {
            schedule,
            lognorm: vec![LogitNormalParams::default(); 3],
            phases: vec![Phase {
                ratios: vec![0.0, 1.0, 0.0],
                steps: 2,
                lr: 1e-3,
            }],
            batch_size: 4,
            cfg_drop_prob: 0.0,
            loss_weights: None,
            seed: 12,
            checkpoint_every: 0,
            grad_clip: 1.0,
        };
        let name = "model.group1.block1.mod_w";
        let id = model.params().id_of(name).unwrap();
        let before = model.params().get(id).clone();
        for step in 0..2 {
            train_step(&mut model, &mut adam, &bridges, &ds, &cfg, step).unwrap();
        }
        assert!(!model.params().get(id).bits_eq(&before), "{name} frozen");
    }

    #[test]
    fn bridges_are_bitwise_frozen_through_training() {
        let mut model = tiny_model(8);
        let mut adam = Adam::new(model.params().len(), AdamConfig::default());
        let schedule = make_schedule(3, &[1.0, 1.0, 1.0], 16).unwrap();
        let ds = tiny_dataset(6, 16);
        let bridges = identity_bridges(&schedule);
        let snapshot = bridges.clone();
        let cfg = TrainConfig {
            schedule,
            lognorm: vec![LogitNormalParams::default(); 3],
            phases: vec![Phase {
                ratios: vec![1.0, 1.0, 1.0],
                steps: 4,
                lr: 1e-3,
            }],
            batch_size: 6,
            cfg_drop_prob: 0.1,
            loss_weights: None,
            seed: 13,
            checkpoint_every: 0,
            grad_clip: 1.0,
        };
        for step in 0..4 {
            train_step(&mut model, &mut adam, &bridges, &ds, &cfg, step).unwrap();
        }
        assert_eq!(bridges, snapshot);
    }

    #[test]
    fn cfg_drop_fraction_near_requested() {
        let schedule = make_schedule(1, &[1.0], 16).unwrap();
        let ds = tiny_dataset(3, 16);
        let lg = LogitNormalParams::default();
        let n = 100_000;
        let mut dropped = 0usize;
        for i in 0..n {
            let mut rng = stream(21, StreamDomain::Element, 0, i as u64);
            let pair =
                build_window_pair(&ds.images[0], 0, 1, &schedule, &[], &lg, 0.1, &mut rng).unwrap();
            if pair.drop {
                dropped += 1;
            }
        }
        let frac = dropped as f64 / n as f64;
        assert!((frac - 0.1).abs() < 0.005, "drop fraction {frac}");
    }

    #[test]
    fn loss_weights_renormalize() {
        let schedule = make_schedule(3, &[1.0, 1.0, 1.0], 16).unwrap();
        let cfg = TrainConfig::toy(schedule, 1);
        let w = cfg.stage_weights(&cfg.phases[0]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((w[0] - 4.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn run_zero_steps_checkpoint_equals_init() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = tiny_model(9);
        let init: Vec<Tensor> = model.params().iter().map(|(_, _, t)| t.clone()).collect();
        let mut adam = Adam::new(model.params().len(), AdamConfig::default());
        let schedule = make_schedule(3, &[1.0, 1.0, 1.0], 16).unwrap();
        let ds = tiny_dataset(3, 16);
        let cfg = TrainConfig {
            phases: vec![Phase {
                ratios: vec![1.0, 1.0, 1.0],
                steps: 0,
                lr: 1e-4,
            }],
            ..TrainConfig::toy(schedule, 1)
        };
        run_schedule(&mut model, &mut adam, &[], &ds, &cfg, dir.path(), false, &[]).unwrap();
        let ckpt = Checkpoint::read_file(&dir.path().join(CHECKPOINT_NAME)).unwrap();
        for (i, (_, name, _)) in model.params().iter().enumerate() {
            assert!(ckpt.get(name).unwrap().bits_eq(&init[i]), "{name}");
        }
        assert_eq!(ckpt.require("trainer.step").unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn fixed_seed_gives_bit_identical_loss_logs() {
        let schedule = make_schedule(3, &[1.0, 1.0, 1.0], 16).unwrap();
        let ds = tiny_dataset(6, 16);
        let bridges = identity_bridges(&schedule);
        let mut logs = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().unwrap();
            let mut model = tiny_model(10);
            let mut adam = Adam::new(model.params().len(), AdamConfig::default());
            let cfg = TrainConfig {
                phases: vec![Phase {
                    ratios: vec![1.0, 1.0, 1.0],
                    steps: 5,
                    lr: 1e-4,
                }],
                batch_size: 4,
                ..TrainConfig::toy(make_schedule(3, &[1.0, 1.0, 1.0], 16).unwrap(), 42)
            };
            run_schedule(&mut model, &mut adam, &bridges, &ds, &cfg, dir.path(), false, &[]).unwrap();
            logs.push(std::fs::read(dir.path().join(LOSS_LOG_NAME)).unwrap());
        }
        assert_eq!(logs[0], logs[1]);
        let _ = ds;
    }

    #[test]
    fn resume_replays_the_interrupted_run_exactly() {
        let schedule = make_schedule(3, &[1.0, 1.0, 1.0], 16).unwrap();
        let ds = tiny_dataset(6, 16);
        let bridges = identity_bridges(&schedule);
        let mk_cfg = |steps: u64| TrainConfig {
            phases: vec![Phase {
                ratios: vec![1.0, 1.0, 1.0],
                steps,
                lr: 1e-4,
            }],
            batch_size: 4,
            checkpoint_every: 3,
            ..TrainConfig::toy(make_schedule(3, &[1.0, 1.0, 1.0], 16).unwrap(), 99)
        };

        // Uninterrupted 6-step run.
        let full_dir = tempfile::tempdir().unwrap();
        let mut model = tiny_model(11);
        let mut adam = Adam::new(model.params().len(), AdamConfig::default());
        run_schedule(&mut model, &mut adam, &bridges, &ds, &mk_cfg(6), full_dir.path(), false, &[])
            .unwrap();

        // 3 steps, then resume to 6 with the longer schedule.
        let part_dir = tempfile::tempdir().unwrap();
        let mut model2 = tiny_model(11);
        let mut adam2 = Adam::new(model2.params().len(), AdamConfig::default());
        run_schedule(&mut model2, &mut adam2, &bridges, &ds, &mk_cfg(3), part_dir.path(), false, &[])
            .unwrap();
        let mut model3 = tiny_model(11);
        let mut adam3 = Adam::new(model3.params().len(), AdamConfig::default());
        run_schedule(&mut model3, &mut adam3, &bridges, &ds, &mk_cfg(6), part_dir.path(), true, &[])
            .unwrap();

        for (id, name, t) in model.params().iter() {
            assert!(t.bits_eq(model3.params().get(id)), "{name} differs after resume");
        }
        // Logs also agree row for row.
        let full_log = std::fs::read_to_string(full_dir.path().join(LOSS_LOG_NAME)).unwrap();
        let part_log = std::fs::read_to_string(part_dir.path().join(LOSS_LOG_NAME)).unwrap();
        assert_eq!(full_log, part_log);
    }
}
