//! Staged Flow-Euler inference.
//!
//! Generation starts from Gaussian noise at the lowest resolution, runs an
//! Euler integration across stage 1's window, then repeatedly jumps to the
//! next stage through upsampling plus the pretrained bridge, integrating
//! each window in turn. The Euler step works in window-local coordinates:
//! the model is trained to predict `start - end` per window, so one step of
//! size 1/n in sigma subtracts `v/n` directly. Stepping in global noise
//! level would need a division by the window width; do not "fix" that here
//! without retraining the target scale.
//!
//! A monolithic baseline (K = 1, all layers, full resolution) shares this
//! exact code path, so a one-stage schedule degenerates to it bitwise.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::bridge::{bridge_apply, BridgeParams};
use crate::error::{Error, Result};
use crate::flowcore::{make_schedule, FlowState, WindowSchedule};
use crate::numerics::ops::{self, dispatch1};
use crate::numerics::tensor::Storage;
use crate::numerics::Tensor;
use crate::progmodel::ProgressiveModel;
use crate::pyramid::upsample;
use crate::rng::{stream, StreamDomain};

#[derive(Debug, Clone)]
pub struct SampleConfig {
    pub steps_per_stage: usize,
    /// Guidance scale; 1 disables guidance (single conditional forward per
    /// step), any other value combines conditional and unconditional
    /// predictions at two forwards per step.
    pub guidance: f64,
    pub class_id: usize,
    pub seed: u64,
    /// Distinguishes multiple generations under one seed.
    pub sample_index: u64,
}

impl SampleConfig {
    pub fn new(class_id: usize, seed: u64) -> SampleConfig {
        SampleConfig {
            steps_per_stage: 10,
            guidance: 1.0,
            class_id,
            seed,
            sample_index: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps_per_stage == 0 {
            return Err(Error::invalid("steps per stage must be >= 1"));
        }
        if self.guidance < 0.0 {
            return Err(Error::invalid(format!(
                "guidance scale {} must be >= 0",
                self.guidance
            )));
        }
        Ok(())
    }

    pub fn forwards_per_step(&self) -> u64 {
        if self.guidance == 1.0 {
            1
        } else {
            2
        }
    }
}

/// Classifier-free guidance: `v_uncond + g * (v_cond - v_uncond)`.
pub fn cfg_velocity(v_cond: &Tensor, v_uncond: &Tensor, g: f64) -> Result<Tensor> {
    let diff = ops::sub(v_cond, v_uncond)?;
    ops::add(v_uncond, &ops::scalar_mul(&diff, g)?)
}

/// Anything that can predict a window-local velocity for a stage.
pub trait VelocityField {
    fn velocity(&self, stage: usize, x: &FlowState) -> Result<Tensor>;
}

impl<F> VelocityField for F
where
    F: Fn(usize, &FlowState) -> Result<Tensor>,
{
    fn velocity(&self, stage: usize, x: &FlowState) -> Result<Tensor> {
        self(stage, x)
    }
}

/// Model adapter applying classifier-free guidance and counting forwards.
pub struct GuidedModel<'a> {
    model: &'a ProgressiveModel,
    class_id: usize,
    guidance: f64,
    forwards: AtomicU64,
}

impl<'a> GuidedModel<'a> {
    pub fn new(model: &'a ProgressiveModel, class_id: usize, guidance: f64) -> GuidedModel<'a> {
        GuidedModel {
            model,
            class_id,
            guidance,
            forwards: AtomicU64::new(0),
        }
    }

    pub fn forward_count(&self) -> u64 {
        self.forwards.load(Ordering::Relaxed)
    }
}

impl VelocityField for GuidedModel<'_> {
    fn velocity(&self, stage: usize, x: &FlowState) -> Result<Tensor> {
        let v_cond = self.model.velocity(stage, x, self.class_id, false)?;
        self.forwards.fetch_add(1, Ordering::Relaxed);
        if self.guidance == 1.0 {
            return Ok(v_cond);
        }
        let v_uncond = self.model.velocity(stage, x, self.class_id, true)?;
        self.forwards.fetch_add(1, Ordering::Relaxed);
        cfg_velocity(&v_cond, &v_uncond, self.guidance)
    }
}

/// Integrate one window from its noisy edge (sigma = 1) to its clean edge
/// (sigma = 0) in `steps` equal Euler steps. The state must arrive at the
/// window's upper noise level; it leaves at exactly the lower one.
pub fn euler_window(
    field: &impl VelocityField,
    stage: usize,
    x_start: FlowState,
    window: (f64, f64),
    steps: usize,
) -> Result<FlowState> {
    let (lo, hi) = window;
    if !(lo < hi) {
        return Err(Error::invalid(format!("empty window [{lo}, {hi}]")));
    }
    if steps == 0 {
        return Err(Error::invalid("Euler integration needs at least one step"));
    }
    if x_start.noise_level != hi {
        return Err(Error::invalid(format!(
            "state at noise level {} does not sit at the window's upper edge {hi}",
            x_start.noise_level
        )));
    }
    let mut x = x_start;
    let n = steps as f64;
    for i in 0..steps {
        let sigma = (steps - i) as f64 / n;
        x.noise_level = lo + sigma * (hi - lo);
        let v = field.velocity(stage, &x)?;
        if v.dims() != x.value.dims() {
            return Err(Error::shape(
                "euler-window",
                format!("velocity {:?} vs state {:?}", v.dims(), x.value.dims()),
            ));
        }
        x.value = ops::sub(&x.value, &ops::scalar_mul(&v, 1.0 / n)?)?;
    }
    x.noise_level = lo;
    Ok(x)
}

/// Forward-pass census of one generation, the same quantities the analytic
/// cost model consumes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageCensus {
    pub stage: usize,
    pub tokens: usize,
    pub blocks_per_forward: usize,
    pub steps: usize,
    pub forwards: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Census {
    pub stages: Vec<StageCensus>,
    pub bridge_applications: u64,
}

#[derive(Debug, Clone)]
pub struct GenerateOutput {
    /// Final image, clamped to [0, 1].
    pub image: Tensor,
    /// Post-jump states entering stage k+1 (unclamped), keyed by the stage
    /// k that produced them.
    pub snapshots: Vec<(usize, Tensor)>,
    pub census: Census,
}

fn clamp01(t: &Tensor) -> Result<Tensor> {
    dispatch1!("clamp01", t, t.dims(), |v: &[_]| {
        v.iter()
            .map(|&x| num_traits::clamp(x, ops::Element::from_f64(0.0), ops::Element::from_f64(1.0)))
            .collect::<Vec<_>>()
    })
}

/// Generate one image by staged Euler integration with Up+Bridge jumps.
pub fn staged_generate(
    model: &ProgressiveModel,
    bridges: &[BridgeParams],
    schedule: &WindowSchedule,
    cfg: &SampleConfig,
) -> Result<GenerateOutput> {
    cfg.validate()?;
    let mcfg = model.config();
    if schedule.stages() != mcfg.stages || schedule.base_resolution() != mcfg.base_resolution {
        return Err(Error::invalid(format!(
            "schedule ({} stages at {}) does not match model ({} stages at {})",
            schedule.stages(),
            schedule.base_resolution(),
            mcfg.stages,
            mcfg.base_resolution
        )));
    }
    let k_total = schedule.stages();
    for k in 1..k_total {
        if !bridges.iter().any(|b| b.stage_pair == (k, k + 1)) {
            return Err(Error::invalid(format!(
                "no bridge parameters for stage pair ({k}, {})",
                k + 1
            )));
        }
    }

    let r1 = schedule.stage_resolution(1)?;
    let mut rng = stream(cfg.seed, StreamDomain::Sampler, cfg.sample_index, 0);
    let noise = Tensor::randn(&[mcfg.channels, r1, r1], model.dtype(), &mut rng)?;
    let mut x = FlowState::new(noise, 1.0)?;

    let guided = GuidedModel::new(model, cfg.class_id, cfg.guidance);
    let mut census = Census::default();
    let mut snapshots = Vec::new();
    for k in 1..=k_total {
        let window = schedule.stage_window(k)?;
        let before = guided.forward_count();
        x = euler_window(&guided, k, x, window, cfg.steps_per_stage)?;
        census.stages.push(StageCensus {
            stage: k,
            tokens: mcfg.tokens(k),
            blocks_per_forward: mcfg.prefix_blocks(k),
            steps: cfg.steps_per_stage,
            forwards: guided.forward_count() - before,
        });
        if k < k_total {
            let params = bridges.iter().find(|b| b.stage_pair == (k, k + 1)).unwrap();
            let up = upsample(&x.value, 2)?;
            let bridged = bridge_apply(params, &up)?;
            census.bridge_applications += 1;
            x = FlowState::new(bridged, x.noise_level)?;
            snapshots.push((k, x.value.clone()));
        }
    }

    Ok(GenerateOutput {
        image: clamp01(&x.value)?,
        snapshots,
        census,
    })
}

/// Monolithic baseline: a K = 1 model integrating the whole [0, 1] flow at
/// full resolution in `total_steps` Euler steps. This is literally the
/// staged path with a one-stage schedule.
pub fn baseline_generate(
    model: &ProgressiveModel,
    cfg: &SampleConfig,
    total_steps: usize,
) -> Result<GenerateOutput> {
    let mcfg = model.config();
    if mcfg.stages != 1 {
        return Err(Error::invalid(format!(
            "baseline sampling needs a monolithic K = 1 model, got {} stages",
            mcfg.stages
        )));
    }
    let schedule = make_schedule(1, &[1.0], mcfg.base_resolution)?;
    let cfg = SampleConfig {
        steps_per_stage: total_steps,
        ..cfg.clone()
    };
    staged_generate(model, &[], &schedule, &cfg)
}
