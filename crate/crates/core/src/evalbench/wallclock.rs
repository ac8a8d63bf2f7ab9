//! Wall-clock generation benchmark: staged vs monolithic at a ladder of
//! resolutions. Timing is parameter-value independent, so models are
//! randomly initialized; bridges are identity. Generations run serially to
//! avoid contention skew.

use std::time::Instant;

use crate::bridge::BridgeParams;
use crate::error::Result;
use crate::flowcore::make_schedule;
use crate::numerics::DType;
use crate::progmodel::{ModelConfig, ProgressiveModel};
use crate::rng::{stream, StreamDomain};
use crate::sampling::{baseline_generate, staged_generate, SampleConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub mode: &'static str,
    pub resolution: usize,
    pub stages: usize,
    /// Total Euler steps per generation.
    pub steps: usize,
    pub median_s: f64,
    pub p10_s: f64,
    pub p90_s: f64,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "mode,resolution,K,steps,median_s,p10_s,p90_s";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.mode, self.resolution, self.stages, self.steps, self.median_s, self.p10_s, self.p90_s
        )
    }
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let idx = (p * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx]
}

/// Time staged vs baseline generation at each resolution. The template
/// supplies stage count, depths, width, heads, and patch size; its base
/// resolution is overridden per ladder entry. The baseline model is K = 1
/// with the same total depth. Both run `steps_per_stage * K` total steps.
pub fn bench_wallclock(
    template: &ModelConfig,
    resolutions: &[usize],
    steps_per_stage: usize,
    repetitions: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &r in resolutions {
        let staged_cfg = ModelConfig {
            base_resolution: r,
            ..template.clone()
        };
        staged_cfg.validate()?;
        let baseline_cfg = ModelConfig {
            stages: 1,
            depths: vec![template.depths.iter().sum()],
            base_resolution: r,
            ..template.clone()
        };
        let staged_model = ProgressiveModel::init(
            staged_cfg.clone(),
            DType::F32,
            &mut stream(seed, StreamDomain::Init, r as u64, 0),
        )?;
        let baseline_model = ProgressiveModel::init(
            baseline_cfg,
            DType::F32,
            &mut stream(seed, StreamDomain::Init, r as u64, 1),
        )?;
        let schedule = make_schedule(staged_cfg.stages, &vec![1.0; staged_cfg.stages], r)?;
        let bridges: Vec<BridgeParams> = (1..staged_cfg.stages)
            .map(|k| {
                let (b, _) = schedule.stage_window(k).unwrap();
                BridgeParams::identity(staged_cfg.channels, (k, k + 1), b)
            })
            .collect();
        let total_steps = steps_per_stage * staged_cfg.stages;

        let mut staged_times = Vec::with_capacity(repetitions);
        let mut baseline_times = Vec::with_capacity(repetitions);
        for rep in 0..repetitions {
            let mut cfg = SampleConfig::new(0, seed);
            cfg.steps_per_stage = steps_per_stage;
            cfg.sample_index = rep as u64;
            let t = Instant::now();
            staged_generate(&staged_model, &bridges, &schedule, &cfg)?;
            staged_times.push(t.elapsed().as_secs_f64());

            let t = Instant::now();
            baseline_generate(&baseline_model, &cfg, total_steps)?;
            baseline_times.push(t.elapsed().as_secs_f64());
        }
        staged_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        baseline_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows.push(BenchRow {
            mode: "staged",
            resolution: r,
            stages: staged_cfg.stages,
            steps: total_steps,
            median_s: percentile(&staged_times, 0.5),
            p10_s: percentile(&staged_times, 0.1),
            p90_s: percentile(&staged_times, 0.9),
        });
        rows.push(BenchRow {
            mode: "baseline",
            resolution: r,
            stages: 1,
            steps: total_steps,
            median_s: percentile(&baseline_times, 0.5),
            p10_s: percentile(&baseline_times, 0.1),
            p90_s: percentile(&baseline_times, 0.9),
        });
    }
    Ok(rows)
}
