//! Subcommand implementations.

use std::path::Path;

use stageflow_core::bridge::{pretrain_bridge, BridgeParams, BridgeTrainConfig};
use stageflow_core::datagen::{self, gen_dataset, Checkpoint, Dataset, SyntheticSpec};
use stageflow_core::error::{Error, Result};
use stageflow_core::evalbench::{
    bench_wallclock, conditional_fidelity, flops_cost, mmd2, Bandwidth, BenchRow, MetricReport,
};
use stageflow_core::flowcore::WindowSchedule;
use stageflow_core::numerics::{Adam, AdamConfig, DType, Tensor};
use stageflow_core::progmodel::ProgressiveModel;
use stageflow_core::rng::{stream, Rng, StreamDomain};
use stageflow_core::sampling::{staged_generate, SampleConfig};
use stageflow_core::training::{self, bridges_from_checkpoint, run_schedule};

use crate::config::Config;

fn config_tensor(cfg: &Config) -> Result<Tensor> {
    let bytes = cfg.canonical_text().into_bytes();
    Tensor::from_u8(&[bytes.len()], bytes)
}

fn config_from_checkpoint(ckpt: &Checkpoint, source: &str) -> Result<Config> {
    let t = ckpt.get("meta.config").ok_or_else(|| {
        Error::invalid(format!("{source} has no embedded configuration (meta.config)"))
    })?;
    let text = String::from_utf8(t.u8s()?.to_vec())
        .map_err(|e| Error::format(source, 0, format!("meta.config is not UTF-8: {e}")))?;
    Config::parse(&text, &format!("{source}:meta.config"))
}

fn check_dataset(ds: &Dataset, cfg: &Config) -> Result<()> {
    let mcfg = cfg.model_config()?;
    if ds.resolution != mcfg.base_resolution {
        return Err(Error::invalid(format!(
            "dataset resolution {} does not match schedule.base_resolution {}",
            ds.resolution, mcfg.base_resolution
        )));
    }
    if ds.channels != mcfg.channels {
        return Err(Error::invalid(format!(
            "dataset has {} channels, model.channels is {}",
            ds.channels, mcfg.channels
        )));
    }
    if ds.num_classes() != mcfg.num_classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes, model.classes is {}",
            ds.num_classes(),
            mcfg.num_classes
        )));
    }
    Ok(())
}

pub fn gen_data(out: &Path, count: usize, res: usize, seed: u64) -> Result<()> {
    let spec = SyntheticSpec::new(count, res, seed);
    gen_dataset(&spec, out)?;
    println!("wrote {count} images at {res}x{res} (seed {seed}) to {}", out.display());
    Ok(())
}

fn pretrain_all_bridges(cfg: &Config, ds: &Dataset) -> Result<(WindowSchedule, Vec<BridgeParams>)> {
    let schedule = cfg.schedule()?;
    let bcfg = BridgeTrainConfig {
        lr: cfg.float("bridge.lr"),
        steps: cfg.uint("bridge.steps"),
        batch: cfg.uint("bridge.batch") as usize,
        seed: cfg.uint("train.seed"),
        ..BridgeTrainConfig::default()
    };
    let mut bridges = Vec::new();
    for k in 1..schedule.stages() {
        let params = pretrain_bridge(&ds.images, &schedule, k, &bcfg)?;
        eprintln!(
            "bridge {k}->{}: scale[0] = {:.6}, bias[0] = {:.6}",
            k + 1,
            params.scale[0],
            params.bias[0]
        );
        bridges.push(params);
    }
    Ok((schedule, bridges))
}

fn bridges_checkpoint(cfg: &Config, bridges: &[BridgeParams]) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::new();
    ckpt.insert("meta.config", config_tensor(cfg)?)?;
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
    Ok(ckpt)
}

pub fn pretrain_bridge_cmd(data: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let ds = Dataset::load(data)?;
    check_dataset(&ds, &cfg)?;
    let (_, bridges) = pretrain_all_bridges(&cfg, &ds)?;
    bridges_checkpoint(&cfg, &bridges)?.write_file(out)?;
    println!("wrote {} bridge parameter sets to {}", bridges.len(), out.display());
    Ok(())
}

pub fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

pub fn train(data: &Path, config: Option<&Path>, out: &Path, resume: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let ds = Dataset::load(data)?;
    check_dataset(&ds, &cfg)?;
    let tcfg = cfg.train_config()?;
    let mcfg = cfg.model_config()?;
    std::fs::create_dir_all(out)?;

    // Bridges are pretrained before the main model and frozen; reuse the
    // ones alongside the run directory when they exist.
    let bridges_path = out.join("bridges.nckp");
    let bridges = if bridges_path.exists() {
        let ckpt = Checkpoint::read_file(&bridges_path)?;
        bridges_from_checkpoint(&ckpt, &tcfg.schedule)?
    } else {
        let (_, bridges) = pretrain_all_bridges(&cfg, &ds)?;
        bridges_checkpoint(&cfg, &bridges)?.write_file(&bridges_path)?;
        bridges
    };

    let seed = cfg.uint("train.seed");
    let mut model = ProgressiveModel::init(
        mcfg,
        DType::F32,
        &mut stream(seed, StreamDomain::Init, 0, 0),
    )?;
    let mut adam = Adam::new(model.params().len(), AdamConfig::default());
    let meta = vec![("meta.config".to_string(), config_tensor(&cfg)?)];
    let report = run_schedule(&mut model, &mut adam, &bridges, &ds, &tcfg, out, resume, &meta)?;
    for (stage, loss) in &report.final_losses {
        println!("final stage {stage} loss: {loss:.6}");
    }
    println!(
        "ran {} steps; checkpoint at {}",
        report.steps_run,
        out.join(training::CHECKPOINT_NAME).display()
    );
    Ok(())
}

struct LoadedModel {
    cfg: Config,
    schedule: WindowSchedule,
    model: ProgressiveModel,
    bridges: Vec<BridgeParams>,
}

fn load_model(ckpt_path: &Path) -> Result<LoadedModel> {
    let ckpt = Checkpoint::read_file(ckpt_path)?;
    let source = ckpt_path.display().to_string();
    let cfg = config_from_checkpoint(&ckpt, &source)?;
    let schedule = cfg.schedule()?;
    let mut model = ProgressiveModel::init(
        cfg.model_config()?,
        DType::F32,
        &mut stream(0, StreamDomain::Init, 0, 0),
    )?;
    let mut adam = Adam::new(model.params().len(), AdamConfig::default());
    training::restore_checkpoint(&mut model, &mut adam, &ckpt)?;
    let bridges = bridges_from_checkpoint(&ckpt, &schedule)?;
    Ok(LoadedModel {
        cfg,
        schedule,
        model,
        bridges,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn sample(
    ckpt: &Path,
    class: usize,
    count: usize,
    seed: u64,
    out: &Path,
    steps_override: Option<usize>,
    guidance_override: Option<f64>,
) -> Result<()> {
    let loaded = load_model(ckpt)?;
    std::fs::create_dir_all(out)?;
    let steps = steps_override.unwrap_or(loaded.cfg.uint("sample.steps_per_stage") as usize);
    let guidance = guidance_override.unwrap_or(loaded.cfg.float("sample.guidance"));
    for i in 0..count {
        let scfg = SampleConfig {
            steps_per_stage: steps,
            guidance,
            class_id: class,
            seed,
            sample_index: i as u64,
        };
        let g = staged_generate(&loaded.model, &loaded.bridges, &loaded.schedule, &scfg)?;
        let base = out.join(format!("sample_{i:04}"));
        datagen::image::write_file(&base.with_extension("pgm"), &g.image)?;
        for (k, snap) in &g.snapshots {
            datagen::image::write_file(
                &out.join(format!("sample_{i:04}.stage{k}.pgm")),
                snap,
            )?;
        }
    }
    println!("wrote {count} samples of class {class} to {}", out.display());
    Ok(())
}

pub fn bench(config: Option<&Path>, mode: &str, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let hash = cfg.hash();
    let mut csv = String::new();
    match mode {
        "flops" => {
            let spec = cfg.cost_spec()?;
            let report = flops_cost(&spec)?;
            csv.push_str("quantity,value,config_hash\n");
            for (i, f) in report.per_stage.iter().enumerate() {
                csv.push_str(&format!("stage{}_flops,{f},{hash}\n", i + 1));
            }
            csv.push_str(&format!("staged_total,{},{hash}\n", report.staged_total));
            csv.push_str(&format!("baseline_total,{},{hash}\n", report.baseline_total));
            csv.push_str(&format!("reduction,{},{hash}\n", report.reduction));
            csv.push_str(&format!("flow_only_total,{},{hash}\n", report.flow_only_total));
            csv.push_str(&format!(
                "flow_only_reduction,{},{hash}\n",
                report.flow_only_reduction
            ));
            println!(
                "flops reduction: {:.4} (flow-only {:.4})",
                report.reduction, report.flow_only_reduction
            );
        }
        "wallclock" => {
            let template = cfg.model_config()?;
            let rows = bench_wallclock(
                &template,
                &cfg.uint_list("bench.resolutions"),
                cfg.uint("sample.steps_per_stage") as usize,
                cfg.uint("bench.repetitions") as usize,
                cfg.uint("train.seed"),
            )?;
            csv.push_str(BenchRow::CSV_HEADER);
            csv.push_str(",config_hash\n");
            for row in &rows {
                csv.push_str(&row.csv_row());
                csv.push_str(&format!(",{hash}\n"));
                println!(
                    "{} @ {}px: median {:.4}s",
                    row.mode, row.resolution, row.median_s
                );
            }
        }
        other => {
            return Err(Error::invalid(format!(
                "unknown bench mode `{other}` (expected flops or wallclock)"
            )))
        }
    }
    datagen::write_atomic(out, csv.as_bytes())?;
    Ok(())
}

pub fn eval(ckpt: &Path, data: &Path, metric: &str, out: &Path) -> Result<()> {
    let loaded = load_model(ckpt)?;
    let ds = Dataset::load(data)?;
    let n = loaded.cfg.uint("eval.samples") as usize;
    let seed = loaded.cfg.uint("train.seed");
    let guidance = loaded.cfg.float("sample.guidance");
    let steps = loaded.cfg.uint("sample.steps_per_stage") as usize;
    let classes = loaded.model.config().num_classes;

    let generate = |pick_random: bool| -> Result<(Vec<Tensor>, Vec<usize>)> {
        let mut images = Vec::with_capacity(n);
        let mut classes_used = Vec::with_capacity(n);
        for i in 0..n {
            let class_id = if pick_random {
                let mut rng = stream(seed, StreamDomain::Eval, i as u64, 0);
                rng.gen_range(0..classes)
            } else {
                i % classes
            };
            let scfg = SampleConfig {
                steps_per_stage: steps,
                guidance,
                class_id,
                seed,
                sample_index: i as u64,
            };
            let g = staged_generate(&loaded.model, &loaded.bridges, &loaded.schedule, &scfg)?;
            images.push(g.image);
            classes_used.push(class_id);
        }
        Ok((images, classes_used))
    };

    let report = match metric {
        "mmd" => {
            // Distribution check: classes drawn as in training data, plain
            // (unguided by default) sampling against the reference set.
            let (images, _) = generate(true)?;
            let m = n.min(ds.len());
            if m < 2 {
                return Err(Error::invalid(format!(
                    "reference dataset has {m} usable images; need at least 2"
                )));
            }
            let reference: Vec<Tensor> = ds.images[..m].to_vec();
            let value = mmd2(&images, &reference, Bandwidth::MedianHeuristic)?;
            MetricReport {
                metric: "mmd2".into(),
                value,
                n_generated: images.len(),
                n_reference: m,
                config_hash: loaded.cfg.hash(),
                seed,
            }
        }
        "fidelity" => {
            let (images, requested) = generate(false)?;
            let value = conditional_fidelity(&images, &requested)?;
            MetricReport {
                metric: "conditional_fidelity".into(),
                value,
                n_generated: images.len(),
                n_reference: 0,
                config_hash: loaded.cfg.hash(),
                seed,
            }
        }
        other => {
            return Err(Error::invalid(format!(
                "unknown metric `{other}` (expected mmd or fidelity)"
            )))
        }
    };
    let csv = format!("{}\n{}\n", MetricReport::CSV_HEADER, report.csv_row());
    datagen::write_atomic(out, csv.as_bytes())?;
    println!("{} = {}", report.metric, report.value);
    Ok(())
}
