//! Flat `key = value` configuration with a closed key table.
//!
//! Every key has a documented default; unknown keys are hard errors so a
//! typo can never silently fall back to a default. The canonical rendering
//! (all keys in table order with effective values) is what gets hashed
//! into report rows and embedded into checkpoints.

use stageflow_core::error::{Error, Result};
use stageflow_core::evalbench::{CostSpec, StageCost};
use stageflow_core::flowcore::{make_schedule, LogitNormalParams, WindowSchedule};
use stageflow_core::progmodel::ModelConfig;
use stageflow_core::training::{Phase, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Uint,
    Float,
    /// Colon-separated positive numbers, e.g. `4:2:1`.
    Ratio,
    /// Comma-separated unsigned integers, e.g. `256,1024,4096`.
    UintList,
    /// `ratio a:b:c, steps N, lr X; ...`
    Phases,
    /// A ratio list or empty (empty ties loss weights to the phase mix).
    RatioOrEmpty,
}

pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
    kind: Kind,
}

pub const DEFAULT_PHASES: &str =
    "ratio 4:2:1, steps 8000, lr 1e-4; ratio 2:4:1, steps 6000, lr 1e-4; ratio 1:2:4, steps 6000, lr 5e-5";

/// The full key table. `--help` renders this, and the doc-drift test
/// compares that rendering against this table.
pub const KEY_TABLE: &[KeySpec] = &[
    KeySpec { key: "schedule.K", default: "3", kind: Kind::Uint, help: "number of resolution stages / time windows" },
    KeySpec { key: "schedule.ratios", default: "1:1:1", kind: Kind::Ratio, help: "window width ratios, stage 1 (noisiest) first" },
    KeySpec { key: "schedule.base_resolution", default: "32", kind: Kind::Uint, help: "full output resolution in pixels" },
    KeySpec { key: "model.width", default: "64", kind: Kind::Uint, help: "transformer hidden width" },
    KeySpec { key: "model.depths", default: "3:2:1", kind: Kind::Ratio, help: "blocks per group, group 1 first" },
    KeySpec { key: "model.heads", default: "4", kind: Kind::Uint, help: "attention heads" },
    KeySpec { key: "model.patch", default: "2", kind: Kind::Uint, help: "patch edge length in pixels" },
    KeySpec { key: "model.channels", default: "1", kind: Kind::Uint, help: "image channels" },
    KeySpec { key: "model.classes", default: "3", kind: Kind::Uint, help: "number of real classes (a null class is added)" },
    KeySpec { key: "train.phases", default: DEFAULT_PHASES, kind: Kind::Phases, help: "mix phases: `ratio a:b:c, steps N, lr X` separated by `;`" },
    KeySpec { key: "train.batch", default: "32", kind: Kind::Uint, help: "batch size" },
    KeySpec { key: "train.cfg_drop", default: "0.1", kind: Kind::Float, help: "probability of dropping the class condition" },
    KeySpec { key: "train.seed", default: "1", kind: Kind::Uint, help: "master seed for init, batches, and noise" },
    KeySpec { key: "train.lognorm_m", default: "0", kind: Kind::Float, help: "logit-normal location for noise-level sampling" },
    KeySpec { key: "train.lognorm_s", default: "1", kind: Kind::Float, help: "logit-normal scale for noise-level sampling" },
    KeySpec { key: "train.grad_clip", default: "1", kind: Kind::Float, help: "global gradient-norm clip (0 disables)" },
    KeySpec { key: "train.checkpoint_every", default: "1000", kind: Kind::Uint, help: "checkpoint cadence in steps (0 = only at the end)" },
    KeySpec { key: "train.loss_weights", default: "", kind: Kind::RatioOrEmpty, help: "per-stage loss weights; empty ties them to the phase mix" },
    KeySpec { key: "sample.steps_per_stage", default: "10", kind: Kind::Uint, help: "Euler steps per stage" },
    KeySpec { key: "sample.guidance", default: "1", kind: Kind::Float, help: "guidance scale (1 = off)" },
    KeySpec { key: "bridge.lr", default: "1e-3", kind: Kind::Float, help: "bridge pretraining learning rate" },
    KeySpec { key: "bridge.steps", default: "10000", kind: Kind::Uint, help: "bridge pretraining steps" },
    KeySpec { key: "bridge.batch", default: "256", kind: Kind::Uint, help: "bridge pretraining batch size" },
    KeySpec { key: "eval.samples", default: "256", kind: Kind::Uint, help: "generated sample count for eval metrics" },
    KeySpec { key: "bench.resolutions", default: "16,32,64", kind: Kind::UintList, help: "resolutions for wall-clock benchmarking" },
    KeySpec { key: "bench.repetitions", default: "5", kind: Kind::Uint, help: "generations per wall-clock measurement" },
    KeySpec { key: "cost.width", default: "2048", kind: Kind::Uint, help: "FLOPs model: transformer width" },
    KeySpec { key: "cost.heads", default: "16", kind: Kind::Uint, help: "FLOPs model: attention heads" },
    KeySpec { key: "cost.mlp_ratio", default: "4", kind: Kind::Uint, help: "FLOPs model: MLP expansion ratio" },
    KeySpec { key: "cost.cfg_mult", default: "1", kind: Kind::Uint, help: "FLOPs model: forwards per step (2 with guidance)" },
    KeySpec { key: "cost.stage_tokens", default: "256,1024,4096", kind: Kind::UintList, help: "FLOPs model: tokens per stage" },
    KeySpec { key: "cost.stage_layers", default: "9,16,22", kind: Kind::UintList, help: "FLOPs model: active layers (prefix depth) per stage" },
    KeySpec { key: "cost.stage_steps", default: "10,10,10", kind: Kind::UintList, help: "FLOPs model: Euler steps per stage" },
    KeySpec { key: "cost.baseline_tokens", default: "4096", kind: Kind::Uint, help: "FLOPs model: baseline tokens" },
    KeySpec { key: "cost.baseline_layers", default: "22", kind: Kind::Uint, help: "FLOPs model: baseline layers" },
    KeySpec { key: "cost.baseline_steps", default: "30", kind: Kind::Uint, help: "FLOPs model: baseline total steps" },
];

fn spec_of(key: &str) -> Option<&'static KeySpec> {
    KEY_TABLE.iter().find(|s| s.key == key)
}

#[derive(Debug, Clone)]
pub struct Config {
    /// Effective value per table entry, aligned with [`KEY_TABLE`].
    values: Vec<String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: KEY_TABLE.iter().map(|s| s.default.to_string()).collect(),
        }
    }
}

fn check_value(kind: Kind, value: &str) -> std::result::Result<(), String> {
    match kind {
        Kind::Uint => value
            .parse::<u64>()
            .map(|_| ())
            .map_err(|_| format!("`{value}` is not an unsigned integer")),
        Kind::Float => value
            .parse::<f64>()
            .map(|_| ())
            .map_err(|_| format!("`{value}` is not a number")),
        Kind::Ratio => parse_ratio(value).map(|_| ()),
        Kind::RatioOrEmpty => {
            if value.is_empty() {
                Ok(())
            } else {
                parse_ratio(value).map(|_| ())
            }
        }
        Kind::UintList => parse_uint_list(value).map(|_| ()),
        Kind::Phases => parse_phases(value).map(|_| ()),
    }
}

fn parse_ratio(value: &str) -> std::result::Result<Vec<f64>, String> {
    let parts: Vec<&str> = value.split(':').collect();
    if parts.is_empty() || value.is_empty() {
        return Err("empty ratio list".into());
    }
    parts
        .iter()
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| format!("`{p}` is not a number in ratio `{value}`"))
        })
        .collect()
}

fn parse_uint_list(value: &str) -> std::result::Result<Vec<usize>, String> {
    if value.is_empty() {
        return Err("empty list".into());
    }
    value
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| format!("`{p}` is not an unsigned integer in `{value}`"))
        })
        .collect()
}

fn parse_phases(value: &str) -> std::result::Result<Vec<Phase>, String> {
    let mut phases = Vec::new();
    for seg in value.split(';') {
        let seg = seg.trim();
        if seg.is_empty() {
            return Err("empty phase segment".into());
        }
        let (mut ratios, mut steps, mut lr) = (None, None, None);
        for part in seg.split(',') {
            let part = part.trim();
            let (word, rest) = part
                .split_once(char::is_whitespace)
                .ok_or_else(|| format!("expected `<name> <value>` in phase part `{part}`"))?;
            let rest = rest.trim();
            match word {
                "ratio" => ratios = Some(parse_ratio(rest)?),
                "steps" => {
                    steps = Some(rest.parse::<u64>().map_err(|_| {
                        format!("`{rest}` is not an unsigned integer in phase `{seg}`")
                    })?)
                }
                "lr" => {
                    lr = Some(
                        rest.parse::<f64>()
                            .map_err(|_| format!("`{rest}` is not a number in phase `{seg}`"))?,
                    )
                }
                other => return Err(format!("unknown phase field `{other}`")),
            }
        }
        phases.push(Phase {
            ratios: ratios.ok_or_else(|| format!("phase `{seg}` is missing `ratio`"))?,
            steps: steps.ok_or_else(|| format!("phase `{seg}` is missing `steps`"))?,
            lr: lr.ok_or_else(|| format!("phase `{seg}` is missing `lr`"))?,
        });
    }
    Ok(phases)
}

impl Config {
    /// Parse configuration text. Unknown keys and malformed values report
    /// the offending line number.
    pub fn parse(text: &str, source: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = (i + 1) as u64;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::format(source, lineno, format!("expected `key = value`, got `{line}`"))
            })?;
            let key = key.trim();
            let value = value.trim();
            let idx = KEY_TABLE
                .iter()
                .position(|s| s.key == key)
                .ok_or_else(|| Error::format(source, lineno, format!("unknown key `{key}`")))?;
            if !seen.insert(idx) {
                return Err(Error::format(source, lineno, format!("duplicate key `{key}`")));
            }
            check_value(KEY_TABLE[idx].kind, value)
                .map_err(|e| Error::format(source, lineno, format!("key `{key}`: {e}")))?;
            cfg.values[idx] = value.to_string();
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        Config::parse(&text, &path.display().to_string())
    }

    /// All keys in table order with effective values; the hashed form.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for (spec, value) in KEY_TABLE.iter().zip(&self.values) {
            out.push_str(spec.key);
            out.push_str(" = ");
            out.push_str(value);
            out.push('\n');
        }
        out
    }

    pub fn hash(&self) -> String {
        stageflow_core::evalbench::config_hash(&self.canonical_text())
    }

    fn raw(&self, key: &str) -> &str {
        let idx = KEY_TABLE.iter().position(|s| s.key == key).unwrap();
        &self.values[idx]
    }

    pub fn uint(&self, key: &str) -> u64 {
        debug_assert_eq!(spec_of(key).unwrap().kind, Kind::Uint);
        self.raw(key).parse().unwrap()
    }

    pub fn float(&self, key: &str) -> f64 {
        debug_assert_eq!(spec_of(key).unwrap().kind, Kind::Float);
        self.raw(key).parse().unwrap()
    }

    pub fn ratio(&self, key: &str) -> Vec<f64> {
        parse_ratio(self.raw(key)).unwrap()
    }

    pub fn uint_list(&self, key: &str) -> Vec<usize> {
        parse_uint_list(self.raw(key)).unwrap()
    }

    pub fn phases(&self) -> Vec<Phase> {
        parse_phases(self.raw("train.phases")).unwrap()
    }

    pub fn schedule(&self) -> Result<WindowSchedule> {
        let k = self.uint("schedule.K") as usize;
        let ratios = self.ratio("schedule.ratios");
        make_schedule(k, &ratios, self.uint("schedule.base_resolution") as usize)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let depths_f = self.ratio("model.depths");
        let depths: Vec<usize> = depths_f
            .iter()
            .map(|&d| {
                if d.fract() == 0.0 && d >= 1.0 {
                    Ok(d as usize)
                } else {
                    Err(Error::invalid(format!("model.depths entry {d} must be a positive integer")))
                }
            })
            .collect::<Result<_>>()?;
        let cfg = ModelConfig {
            stages: self.uint("schedule.K") as usize,
            depths,
            width: self.uint("model.width") as usize,
            heads: self.uint("model.heads") as usize,
            patch: self.uint("model.patch") as usize,
            channels: self.uint("model.channels") as usize,
            num_classes: self.uint("model.classes") as usize,
            base_resolution: self.uint("schedule.base_resolution") as usize,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let schedule = self.schedule()?;
        let k = schedule.stages();
        let lognorm = vec![
            LogitNormalParams {
                location: self.float("train.lognorm_m"),
                scale: self.float("train.lognorm_s"),
            };
            k
        ];
        let weights_raw = self.raw("train.loss_weights");
        let loss_weights = if weights_raw.is_empty() {
            None
        } else {
            Some(parse_ratio(weights_raw).unwrap())
        };
        let cfg = TrainConfig {
            schedule,
            lognorm,
            phases: self.phases(),
            batch_size: self.uint("train.batch") as usize,
            cfg_drop_prob: self.float("train.cfg_drop"),
            loss_weights,
            seed: self.uint("train.seed"),
            checkpoint_every: self.uint("train.checkpoint_every"),
            grad_clip: self.float("train.grad_clip"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn cost_spec(&self) -> Result<CostSpec> {
        let tokens = self.uint_list("cost.stage_tokens");
        let layers = self.uint_list("cost.stage_layers");
        let steps = self.uint_list("cost.stage_steps");
        if tokens.len() != layers.len() || tokens.len() != steps.len() {
            return Err(Error::invalid(format!(
                "cost.stage_tokens/layers/steps lengths differ: {}/{}/{}",
                tokens.len(),
                layers.len(),
                steps.len()
            )));
        }
        let stages = tokens
            .iter()
            .zip(&layers)
            .zip(&steps)
            .map(|((&tokens, &layers), &steps)| StageCost { tokens, layers, steps })
            .collect();
        let spec = CostSpec {
            width: self.uint("cost.width") as usize,
            heads: self.uint("cost.heads") as usize,
            mlp_ratio: self.uint("cost.mlp_ratio") as usize,
            cfg_mult: self.uint("cost.cfg_mult") as usize,
            stages,
            baseline: StageCost {
                tokens: self.uint("cost.baseline_tokens") as usize,
                layers: self.uint("cost.baseline_layers") as usize,
                steps: self.uint("cost.baseline_steps") as usize,
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = Config::parse("", "mem").unwrap();
        assert_eq!(cfg.uint("schedule.K"), 3);
        assert_eq!(cfg.ratio("schedule.ratios"), vec![1.0, 1.0, 1.0]);
        assert_eq!(cfg.uint("schedule.base_resolution"), 32);
        assert_eq!(cfg.ratio("model.depths"), vec![3.0, 2.0, 1.0]);
        assert_eq!(cfg.uint("model.width"), 64);
        let phases = cfg.phases();
        assert_eq!(phases.len(), 3);
        assert_eq!(phases.iter().map(|p| p.steps).sum::<u64>(), 20_000);
        assert_eq!(phases[2].lr, 5e-5);
    }

    #[test]
    fn table_depths_parse() {
        let cfg = Config::parse("model.depths = 5:4:3\n", "mem").unwrap();
        let mc = cfg.model_config().unwrap();
        assert_eq!(mc.depths, vec![5, 4, 3]);
        assert_eq!(mc.prefix_blocks(3), 12);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = Config::parse("schedule.K = 3\nschedule.qq = 1\n", "mem").unwrap_err();
        match err {
            Error::Format { offset, detail, .. } => {
                assert_eq!(offset, 2);
                assert!(detail.contains("schedule.qq"), "{detail}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn zero_stages_rejected() {
        let cfg = Config::parse("schedule.K = 0\n", "mem").unwrap();
        assert!(cfg.schedule().is_err());
    }

    #[test]
    fn malformed_value_reports_line() {
        let err = Config::parse("\ntrain.batch = lots\n", "mem").unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn canonical_text_reparses_to_itself() {
        let cfg = Config::parse("model.width = 48\nsample.guidance = 3\n", "mem").unwrap();
        let text = cfg.canonical_text();
        let back = Config::parse(&text, "mem").unwrap();
        assert_eq!(back.canonical_text(), text);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn default_cost_spec_is_headline_config() {
        let cfg = Config::default();
        let spec = cfg.cost_spec().unwrap();
        assert_eq!(spec, CostSpec::headline_2b());
    }

    #[test]
    fn phases_grammar_errors() {
        assert!(Config::parse("train.phases = ratio 1:1, steps 5\n", "mem").is_err());
        assert!(Config::parse("train.phases = steps 5, lr 1e-4\n", "mem").is_err());
        assert!(Config::parse("train.phases = ratio 1:1:1, steps 5, lr 1e-4, extra 2\n", "mem").is_err());
    }
}
