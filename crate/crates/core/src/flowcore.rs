//! Rectified-flow mathematics: straight-line interpolation, the stage/window
//! schedule, per-window endpoints and regression targets, logit-normal
//! noise-level sampling, and the flow-matching loss.
//!
//! Conventions. The noise level `u` runs from 1 (pure noise) to 0 (data).
//! Stages are numbered 1..=K from low to high resolution; stage 1 owns the
//! noisiest window, whose upper edge is u = 1, and stage K owns the window
//! touching u = 0. Inside a window, arithmetic uses the local coordinate
//! `sigma` which is 1 at the window's noisy edge and 0 at its clean edge, so
//! interpolation is endpoint-exact and per-window velocity targets stay
//! O(start - end) regardless of window width.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::ops;
use crate::numerics::tape::{NodeId, Tape};
use crate::numerics::Tensor;

/// A point on the probability path: an image-shaped value tagged with its
/// resolution and global noise level.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub value: Tensor,
    pub resolution: usize,
    pub noise_level: f64,
}

impl FlowState {
    pub fn new(value: Tensor, noise_level: f64) -> Result<FlowState> {
        let [_, r] = ops::image_dims("flow-state", &value)?;
        if !(0.0..=1.0).contains(&noise_level) {
            return Err(Error::invalid(format!(
                "noise level {noise_level} outside [0, 1]"
            )));
        }
        Ok(FlowState {
            value,
            resolution: r,
            noise_level,
        })
    }

    pub fn channels(&self) -> usize {
        self.value.dims()[0]
    }
}

/// The partition of [0, 1] into K stage windows plus each stage's
/// resolution. Boundaries are shared values, so adjacent windows meet
/// bitwise and widths sum to exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSchedule {
    boundaries: Vec<f64>,
    base_resolution: usize,
}

impl WindowSchedule {
    pub fn stages(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn base_resolution(&self) -> usize {
        self.base_resolution
    }

    /// Boundary values b_0 = 0 < ... < b_K = 1.
    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    /// `(lo, hi)` of stage k's window; stage 1 owns the noisiest window.
    pub fn stage_window(&self, k: usize) -> Result<(f64, f64)> {
        let kk = self.stages();
        if k == 0 || k > kk {
            return Err(Error::invalid(format!("stage {k} outside 1..={kk}")));
        }
        Ok((self.boundaries[kk - k], self.boundaries[kk - k + 1]))
    }

    /// Resolution of stage k: R / 2^(K-k).
    pub fn stage_resolution(&self, k: usize) -> Result<usize> {
        let kk = self.stages();
        if k == 0 || k > kk {
            return Err(Error::invalid(format!("stage {k} outside 1..={kk}")));
        }
        Ok(self.base_resolution >> (kk - k))
    }

    /// The stage whose window contains `u` (ties at shared boundaries go to
    /// the noisier stage, except u = 0 which belongs to stage K).
    pub fn stage_of(&self, u: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&u) {
            return Err(Error::invalid(format!("noise level {u} outside [0, 1]")));
        }
        for k in 1..=self.stages() {
            let (lo, hi) = self.stage_window(k)?;
            if u > lo && u <= hi {
                return Ok(k);
            }
        }
        Ok(self.stages())
    }
}

/// Build a schedule whose stage window widths are proportional to
/// `ratios[k-1]` (stage order: ratio 1 belongs to the noisiest stage).
pub fn make_schedule(k: usize, ratios: &[f64], base_resolution: usize) -> Result<WindowSchedule> {
    if k == 0 {
        return Err(Error::invalid("schedule needs at least one stage"));
    }
    if ratios.len() != k {
        return Err(Error::invalid(format!(
            "{} window ratios for {k} stages",
            ratios.len()
        )));
    }
    if ratios.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
        return Err(Error::invalid(format!(
            "window ratios must be positive and finite, got {ratios:?}"
        )));
    }
    let min_res = 1usize << (k - 1);
    if base_resolution == 0 || base_resolution % min_res != 0 {
        return Err(Error::invalid(format!(
            "base resolution {base_resolution} not divisible by 2^(K-1) = {min_res}"
        )));
    }
    let total: f64 = ratios.iter().sum();
    // boundaries grow from 0; the first widths consumed belong to the
    // cleanest stage (stage K), since its window starts at u = 0.
    let mut boundaries = vec![0.0f64];
    for i in 1..k {
        let width = ratios[k - i] / total;
        boundaries.push(boundaries[i - 1] + width);
    }
    boundaries.push(1.0);
    for w in boundaries.windows(2) {
        if !(w[0] < w[1]) {
            return Err(Error::invalid(format!(
                "degenerate window boundaries {boundaries:?}"
            )));
        }
    }
    Ok(WindowSchedule {
        boundaries,
        base_resolution,
    })
}

/// The two ends of one stage's window: `start` at the noisy edge
/// (noise level hi), `end` at the clean edge (noise level lo).
#[derive(Debug, Clone)]
pub struct WindowEndpoints {
    pub start: FlowState,
    pub end: FlowState,
}

impl WindowEndpoints {
    pub fn new(start: FlowState, end: FlowState) -> Result<WindowEndpoints> {
        if start.value.dims() != end.value.dims() {
            return Err(Error::shape(
                "window-endpoints",
                format!("{:?} vs {:?}", start.value.dims(), end.value.dims()),
            ));
        }
        if !(start.noise_level > end.noise_level) {
            return Err(Error::invalid(format!(
                "start noise level {} must exceed end noise level {}",
                start.noise_level, end.noise_level
            )));
        }
        Ok(WindowEndpoints { start, end })
    }

    pub fn window(&self) -> (f64, f64) {
        (self.end.noise_level, self.start.noise_level)
    }
}

/// Logit-normal parameters: `u = lo + sigmoid(z)*(hi-lo)`, `z ~ N(m, s)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogitNormalParams {
    pub location: f64,
    pub scale: f64,
}

impl Default for LogitNormalParams {
    fn default() -> Self {
        LogitNormalParams {
            location: 0.0,
            scale: 1.0,
        }
    }
}

/// Straight-line path state at noise level `u`:
/// `value = u*noise + (1-u)*data`.
pub fn interpolate(data: &Tensor, noise: &Tensor, u: f64) -> Result<FlowState> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::invalid(format!("noise level {u} outside [0, 1]")));
    }
    FlowState::new(ops::lerp(noise, data, u)?, u)
}

/// Map a global noise level into a window's local coordinate
/// `sigma = (u - lo) / (hi - lo)`; 1 at the noisy edge.
pub fn local_coordinate(u: f64, lo: f64, hi: f64) -> Result<f64> {
    if !(lo < hi) {
        return Err(Error::invalid(format!("empty window [{lo}, {hi}]")));
    }
    if u < lo || u > hi {
        return Err(Error::invalid(format!(
            "noise level {u} outside window [{lo}, {hi}]"
        )));
    }
    Ok((u - lo) / (hi - lo))
}

/// Window-local interpolation `sigma*start + (1-sigma)*end`, tagged with the
/// corresponding global noise level `lo + sigma*(hi-lo)`.
pub fn window_interpolate(endpoints: &WindowEndpoints, sigma: f64) -> Result<FlowState> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::invalid(format!(
            "local coordinate {sigma} outside [0, 1]"
        )));
    }
    let (lo, hi) = endpoints.window();
    let value = ops::lerp(&endpoints.start.value, &endpoints.end.value, sigma)?;
    FlowState::new(value, lo + sigma * (hi - lo))
}

/// The per-window regression target `start - end`: the constant velocity of
/// the straight path in local coordinates.
pub fn velocity_target(endpoints: &WindowEndpoints) -> Result<Tensor> {
    ops::sub(&endpoints.start.value, &endpoints.end.value)
}

fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    // Keep draws strictly inside the open interval even when the normal
    // tail saturates the sigmoid.
    s.clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

/// Draw a noise level inside (lo, hi): sigmoid of a normal draw, rescaled
/// into the window.
pub fn sample_noise_level(
    params: &LogitNormalParams,
    lo: f64,
    hi: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    if !(params.scale > 0.0) {
        return Err(Error::invalid(format!(
            "logit-normal scale must be positive, got {}",
            params.scale
        )));
    }
    if !(lo < hi) {
        return Err(Error::invalid(format!("empty window [{lo}, {hi}]")));
    }
    let z: f64 = params.location + params.scale * rng.sample::<f64, _>(StandardNormal);
    Ok(lo + sigmoid(z) * (hi - lo))
}

/// Conditional flow-matching loss: mean squared difference.
pub fn cfm_loss(v_pred: &Tensor, v_target: &Tensor) -> Result<Tensor> {
    let diff = ops::sub(v_pred, v_target)?;
    ops::mean(&ops::square(&diff)?)
}

/// Tape version of [`cfm_loss`], for training and gradient checks.
pub fn cfm_loss_on_tape(tape: &mut Tape, v_pred: NodeId, v_target: NodeId) -> Result<NodeId> {
    let diff = tape.sub(v_pred, v_target)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamDomain};
    use crate::numerics::DType;

    fn t(v: Vec<f32>) -> Tensor {
        let n = v.len();
        let r = (n as f64).sqrt() as usize;
        Tensor::from_f32(&[1, r, r], v).unwrap()
    }

    #[test]
    fn interpolation_endpoints_are_exact() {
        let data = t(vec![2.0, -1.0, 0.5, 3.0]);
        let noise = t(vec![0.25, 1.5, -2.0, 0.0]);
        assert!(interpolate(&data, &noise, 0.0).unwrap().value.bits_eq(&data));
        assert!(interpolate(&data, &noise, 1.0).unwrap().value.bits_eq(&noise));
        let mid = interpolate(&t(vec![2.0; 4]), &t(vec![0.0; 4]), 0.5).unwrap();
        assert_eq!(mid.value.f32s().unwrap(), &[1.0; 4]);
        assert_eq!(mid.noise_level, 0.5);
    }

    #[test]
    fn schedule_uniform_thirds() {
        let s = make_schedule(3, &[1.0, 1.0, 1.0], 32).unwrap();
        assert_eq!(s.boundaries(), &[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert_eq!(s.stage_window(1).unwrap(), (2.0 / 3.0, 1.0));
        assert_eq!(s.stage_window(2).unwrap(), (1.0 / 3.0, 2.0 / 3.0));
        assert_eq!(s.stage_window(3).unwrap(), (0.0, 1.0 / 3.0));
        assert_eq!(s.stage_resolution(1).unwrap(), 8);
        assert_eq!(s.stage_resolution(2).unwrap(), 16);
        assert_eq!(s.stage_resolution(3).unwrap(), 32);
    }

    #[test]
    fn schedule_weighted_and_degenerate() {
        let s = make_schedule(3, &[2.0, 1.0, 1.0], 32).unwrap();
        assert_eq!(s.stage_window(1).unwrap(), (0.5, 1.0));
        assert_eq!(s.stage_window(2).unwrap(), (0.25, 0.5));
        assert_eq!(s.stage_window(3).unwrap(), (0.0, 0.25));

        let one = make_schedule(1, &[1.0], 32).unwrap();
        assert_eq!(one.stage_window(1).unwrap(), (0.0, 1.0));
        assert_eq!(one.stage_resolution(1).unwrap(), 32);

        assert!(make_schedule(3, &[1.0, 0.0, 1.0], 32).is_err());
        assert!(make_schedule(3, &[1.0, 1.0, 1.0], 30).is_err());
        assert!(make_schedule(0, &[], 32).is_err());
    }

    #[test]
    fn window_widths_partition_unit_interval() {
        let s = make_schedule(4, &[0.4, 0.2, 0.3, 0.1], 32).unwrap();
        let b = s.boundaries();
        assert_eq!(b[0], 0.0);
        assert_eq!(*b.last().unwrap(), 1.0);
        // Adjacent windows share boundary values bitwise by construction.
        for k in 1..4 {
            let (_, hi_next) = s.stage_window(k + 1).unwrap();
            let (lo, _) = s.stage_window(k).unwrap();
            assert_eq!(lo.to_bits(), hi_next.to_bits());
        }
        let width_sum: f64 = (1..=4)
            .map(|k| {
                let (lo, hi) = s.stage_window(k).unwrap();
                hi - lo
            })
            .sum();
        assert!((width_sum - 1.0).abs() < 1e-15);
    }

    #[test]
    fn local_coordinate_maps_edges() {
        assert_eq!(local_coordinate(1.0, 1.0 / 3.0, 1.0).unwrap(), 1.0);
        assert_eq!(local_coordinate(1.0 / 3.0, 1.0 / 3.0, 1.0).unwrap(), 0.0);
        let mid = local_coordinate(0.5, 1.0 / 3.0, 2.0 / 3.0).unwrap();
        assert!((mid - 0.5).abs() < 1e-15);
        assert!(local_coordinate(0.2, 1.0 / 3.0, 1.0).is_err());
    }

    #[test]
    fn window_interpolate_endpoint_exact() {
        let start = FlowState::new(t(vec![4.0, 8.0, -2.0, 0.0]), 1.0).unwrap();
        let end = FlowState::new(t(vec![0.0, 2.0, 1.0, -1.0]), 2.0 / 3.0).unwrap();
        let ep = WindowEndpoints::new(start.clone(), end.clone()).unwrap();
        assert!(window_interpolate(&ep, 1.0).unwrap().value.bits_eq(&start.value));
        assert!(window_interpolate(&ep, 0.0).unwrap().value.bits_eq(&end.value));

        let quarter = window_interpolate(&ep, 0.25).unwrap();
        assert_eq!(quarter.value.f32s().unwrap()[0], 1.0);
        assert!((quarter.noise_level - (2.0 / 3.0 + 0.25 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn velocity_target_is_start_minus_end() {
        let start = FlowState::new(t(vec![3.0; 4]), 1.0).unwrap();
        let end = FlowState::new(t(vec![1.0; 4]), 0.0).unwrap();
        let ep = WindowEndpoints::new(start, end).unwrap();
        assert_eq!(velocity_target(&ep).unwrap().f32s().unwrap(), &[2.0; 4]);

        let same = t(vec![5.0; 4]);
        let ep0 = WindowEndpoints::new(
            FlowState::new(same.clone(), 1.0).unwrap(),
            FlowState::new(same, 0.0).unwrap(),
        )
        .unwrap();
        assert_eq!(velocity_target(&ep0).unwrap().f32s().unwrap(), &[0.0; 4]);
    }

    #[test]
    fn logit_normal_draws_stay_inside_window() {
        let mut rng = stream(3, StreamDomain::Element, 0, 0);
        let p = LogitNormalParams::default();
        for _ in 0..100_000 {
            let u = sample_noise_level(&p, 1.0 / 3.0, 2.0 / 3.0, &mut rng).unwrap();
            assert!(u > 1.0 / 3.0 && u < 2.0 / 3.0, "u = {u}");
        }
    }

    #[test]
    fn logit_normal_symmetric_mean_is_half() {
        // sigmoid of a symmetric normal has mean 1/2; Monte-Carlo oracle.
        let mut rng = stream(4, StreamDomain::Element, 0, 0);
        let p = LogitNormalParams::default();
        let n = 1_000_000;
        let mean: f64 = (0..n)
            .map(|_| sample_noise_level(&p, 0.0, 1.0, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.5).abs() < 0.005, "mean = {mean}");
    }

    #[test]
    fn logit_normal_location_limit_concentrates_at_lo() {
        let mut rng = stream(5, StreamDomain::Element, 0, 0);
        let p = LogitNormalParams {
            location: -30.0,
            scale: 1.0,
        };
        for _ in 0..1000 {
            let u = sample_noise_level(&p, 0.25, 0.75, &mut rng).unwrap();
            assert!(u > 0.25 && u < 0.26, "u = {u}");
        }
    }

    #[test]
    fn cfm_loss_values_and_gradient() {
        let pred = Tensor::from_f32(&[2], vec![0.0, 0.0]).unwrap();
        let target = Tensor::from_f32(&[2], vec![2.0, 0.0]).unwrap();
        assert_eq!(cfm_loss(&pred, &pred).unwrap().item().unwrap(), 0.0);
        assert_eq!(cfm_loss(&pred, &target).unwrap().item().unwrap(), 2.0);

        // d loss / d pred = 2 (pred - target) / N
        let mut tape = Tape::new();
        let p = tape.leaf(pred.cast(DType::F64).unwrap());
        let tgt = tape.constant(target.cast(DType::F64).unwrap());
        let loss = cfm_loss_on_tape(&mut tape, p, tgt).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.of(p).unwrap().f64s().unwrap(), &[-2.0, 0.0]);
    }

    #[test]
    fn stage_of_locates_windows() {
        let s = make_schedule(3, &[1.0, 1.0, 1.0], 32).unwrap();
        assert_eq!(s.stage_of(1.0).unwrap(), 1);
        assert_eq!(s.stage_of(0.8).unwrap(), 1);
        assert_eq!(s.stage_of(0.5).unwrap(), 2);
        assert_eq!(s.stage_of(0.1).unwrap(), 3);
        assert_eq!(s.stage_of(0.0).unwrap(), 3);
    }
}
