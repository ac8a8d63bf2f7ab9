//! Analytic inference-cost model for the staged transformer.
//!
//! Per forward pass of one layer on N tokens at width d with MLP ratio m:
//! qkv + output projections cost 8*N*d^2, the MLP 4*m*N*d^2, and the
//! attention score/value matmuls 4*N^2*d (FLOPs, multiply-add = 2).
//! Layernorm/softmax/elementwise terms are omitted as sub-percent at the
//! scales of interest. The staged total sums n_k steps of the stage-k
//! prefix on stage-k tokens; the baseline runs every layer on full-
//! resolution tokens for all steps.
//!
//! The flow-only variant keeps the resolution split but runs the full
//! layer stack at every stage, separating the piecewise-flow saving from
//! the additional model-partition saving.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageCost {
    pub tokens: usize,
    /// Active layers (prefix depth) at this stage.
    pub layers: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostSpec {
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// 2 when classifier-free guidance doubles the forwards, else 1.
    pub cfg_mult: usize,
    pub stages: Vec<StageCost>,
    pub baseline: StageCost,
}

impl CostSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.mlp_ratio == 0 || self.cfg_mult == 0 {
            return Err(Error::invalid("cost spec fields must be positive"));
        }
        if self.stages.is_empty() {
            return Err(Error::invalid("cost spec needs at least one stage"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.tokens == 0 || s.layers == 0 || s.steps == 0 {
                return Err(Error::invalid(format!("stage {} entries must be positive", i + 1)));
            }
            if i > 0 && s.layers < self.stages[i - 1].layers {
                return Err(Error::invalid(
                    "active layers must be nondecreasing across stages",
                ));
            }
        }
        if self.baseline.tokens == 0 || self.baseline.layers == 0 || self.baseline.steps == 0 {
            return Err(Error::invalid("baseline entries must be positive"));
        }
        Ok(())
    }

    /// The 2B-parameter configuration the headline reduction refers to:
    /// width 2048, 22 layers split 9:7:6 (prefixes 9/16/22), stage tokens
    /// 256/1024/4096, 10 steps per stage against a 30-step full-depth
    /// baseline.
    pub fn headline_2b() -> CostSpec {
        CostSpec {
            width: 2048,
            heads: 16,
            mlp_ratio: 4,
            cfg_mult: 1,
            stages: vec![
                StageCost { tokens: 256, layers: 9, steps: 10 },
                StageCost { tokens: 1024, layers: 16, steps: 10 },
                StageCost { tokens: 4096, layers: 22, steps: 10 },
            ],
            baseline: StageCost {
                tokens: 4096,
                layers: 22,
                steps: 30,
            },
        }
    }
}

/// FLOPs of one forward pass of `layers` layers over `tokens` tokens.
pub fn forward_flops(tokens: usize, layers: usize, width: usize, mlp_ratio: usize) -> f64 {
    let n = tokens as f64;
    let d = width as f64;
    let proj = (8 + 4 * mlp_ratio) as f64 * n * d * d;
    let attn = 4.0 * n * n * d;
    layers as f64 * (proj + attn)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    /// FLOPs per stage (all steps, including the CFG multiplier).
    pub per_stage: Vec<f64>,
    pub staged_total: f64,
    pub baseline_total: f64,
    /// 1 - staged/baseline.
    pub reduction: f64,
    /// Same schedule but every stage at full depth.
    pub flow_only_total: f64,
    pub flow_only_reduction: f64,
}

pub fn flops_cost(spec: &CostSpec) -> Result<CostReport> {
    spec.validate()?;
    let cfg = spec.cfg_mult as f64;
    let stage_total = |layers_override: Option<usize>| -> f64 {
        spec.stages
            .iter()
            .map(|s| {
                let layers = layers_override.unwrap_or(s.layers);
                s.steps as f64 * cfg * forward_flops(s.tokens, layers, spec.width, spec.mlp_ratio)
            })
            .sum()
    };
    let per_stage: Vec<f64> = spec
        .stages
        .iter()
        .map(|s| s.steps as f64 * cfg * forward_flops(s.tokens, s.layers, spec.width, spec.mlp_ratio))
        .collect();
    let staged_total = stage_total(None);
    let flow_only_total = stage_total(Some(spec.baseline.layers));
    let baseline_total = spec.baseline.steps as f64
        * cfg
        * forward_flops(spec.baseline.tokens, spec.baseline.layers, spec.width, spec.mlp_ratio);
    Ok(CostReport {
        per_stage,
        staged_total,
        baseline_total,
        reduction: 1.0 - staged_total / baseline_total,
        flow_only_total,
        flow_only_reduction: 1.0 - flow_only_total / baseline_total,
    })
}
