//! `stageflow`: staged rectified-flow image generation at desk scale.
//!
//! Subcommands cover the full pipeline: synthetic data generation, bridge
//! pretraining, multi-resolution training, staged sampling, cost/wall-clock
//! benchmarking, and evaluation. Exit codes: 0 success, 1 usage error,
//! 2 data/format error, 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, Command};

use stageflow_cli::{commands, config};
use stageflow_core::{Error, ErrorCategory};

fn config_keys_help() -> String {
    let mut out = String::from("Configuration keys (key = value per line, `#` comments):\n");
    for spec in config::KEY_TABLE {
        let default = if spec.default.len() > 48 {
            format!("{}...", &spec.default[..45])
        } else if spec.default.is_empty() {
            "(empty)".to_string()
        } else {
            spec.default.to_string()
        };
        out.push_str(&format!(
            "  {:<26} default: {:<18} {}\n",
            spec.key, default, spec.help
        ));
    }
    out
}

fn arg_path(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(clap::value_parser!(PathBuf))
        .help(help)
}

fn cli() -> Command {
    Command::new("stageflow")
        .about("Staged rectified-flow image generation: train, sample, benchmark")
        .subcommand_required(true)
        .after_long_help(config_keys_help())
        .subcommand(
            Command::new("gen-data")
                .about("Generate the synthetic labeled shape dataset")
                .arg(arg_path("out", "output dataset directory").required(true))
                .arg(
                    Arg::new("count")
                        .long("count")
                        .value_parser(clap::value_parser!(usize))
                        .default_value("3000")
                        .help("number of images"),
                )
                .arg(
                    Arg::new("res")
                        .long("res")
                        .value_parser(clap::value_parser!(usize))
                        .default_value("32")
                        .help("image resolution"),
                )
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .value_parser(clap::value_parser!(u64))
                        .default_value("1")
                        .help("generation seed"),
                ),
        )
        .subcommand(
            Command::new("pretrain-bridge")
                .about("Fit the affine stage bridges by MSE and save them")
                .arg(arg_path("data", "dataset directory").required(true))
                .arg(arg_path("config", "configuration file (defaults apply if omitted)"))
                .arg(arg_path("out", "output .nckp file").required(true)),
        )
        .subcommand(
            Command::new("train")
                .about("Run multi-resolution joint training")
                .arg(arg_path("data", "dataset directory").required(true))
                .arg(arg_path("config", "configuration file (defaults apply if omitted)"))
                .arg(arg_path("out", "run directory for checkpoints and logs").required(true))
                .arg(
                    Arg::new("resume")
                        .long("resume")
                        .action(ArgAction::SetTrue)
                        .help("continue from the checkpoint in the run directory"),
                ),
        )
        .subcommand(
            Command::new("sample")
                .about("Generate images from a trained checkpoint")
                .arg(arg_path("ckpt", "training checkpoint (.nckp)").required(true))
                .arg(
                    Arg::new("class")
                        .long("class")
                        .value_parser(clap::value_parser!(usize))
                        .required(true)
                        .help("class id to condition on"),
                )
                .arg(
                    Arg::new("count")
                        .long("count")
                        .value_parser(clap::value_parser!(usize))
                        .default_value("1")
                        .help("number of images"),
                )
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .value_parser(clap::value_parser!(u64))
                        .default_value("0")
                        .help("sampling seed"),
                )
                .arg(arg_path("out", "output directory for PGM files").required(true))
                .arg(
                    Arg::new("steps-per-stage")
                        .long("steps-per-stage")
                        .value_parser(clap::value_parser!(usize))
                        .help("override sample.steps_per_stage"),
                )
                .arg(
                    Arg::new("guidance")
                        .long("guidance")
                        .value_parser(clap::value_parser!(f64))
                        .help("override sample.guidance"),
                ),
        )
        .subcommand(
            Command::new("bench")
                .about("Analytic FLOPs model or wall-clock generation benchmark")
                .arg(arg_path("config", "configuration file (defaults apply if omitted)"))
                .arg(
                    Arg::new("mode")
                        .long("mode")
                        .value_parser(["flops", "wallclock"])
                        .required(true)
                        .help("what to measure"),
                )
                .arg(arg_path("out", "output CSV file").required(true)),
        )
        .subcommand(
            Command::new("eval")
                .about("Evaluate a trained checkpoint against a dataset")
                .arg(arg_path("ckpt", "training checkpoint (.nckp)").required(true))
                .arg(arg_path("data", "reference dataset directory").required(true))
                .arg(
                    Arg::new("metric")
                        .long("metric")
                        .value_parser(["mmd", "fidelity"])
                        .required(true)
                        .help("which metric to compute"),
                )
                .arg(arg_path("out", "output CSV file").required(true)),
        )
}

enum CliFailure {
    Help(clap::Error),
    Usage(clap::Error),
    Core(Error),
}

fn run() -> Result<(), CliFailure> {
    let matches = cli().try_get_matches().map_err(|e| {
        use clap::error::ErrorKind;
        match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => CliFailure::Help(e),
            _ => CliFailure::Usage(e),
        }
    })?;

    let result = match matches.subcommand() {
        Some(("gen-data", m)) => commands::gen_data(
            m.get_one::<PathBuf>("out").unwrap(),
            *m.get_one::<usize>("count").unwrap(),
            *m.get_one::<usize>("res").unwrap(),
            *m.get_one::<u64>("seed").unwrap(),
        ),
        Some(("pretrain-bridge", m)) => commands::pretrain_bridge_cmd(
            m.get_one::<PathBuf>("data").unwrap(),
            m.get_one::<PathBuf>("config").map(|p| p.as_path()),
            m.get_one::<PathBuf>("out").unwrap(),
        ),
        Some(("train", m)) => commands::train(
            m.get_one::<PathBuf>("data").unwrap(),
            m.get_one::<PathBuf>("config").map(|p| p.as_path()),
            m.get_one::<PathBuf>("out").unwrap(),
            m.get_flag("resume"),
        ),
        Some(("sample", m)) => commands::sample(
            m.get_one::<PathBuf>("ckpt").unwrap(),
            *m.get_one::<usize>("class").unwrap(),
            *m.get_one::<usize>("count").unwrap(),
            *m.get_one::<u64>("seed").unwrap(),
            m.get_one::<PathBuf>("out").unwrap(),
            m.get_one::<usize>("steps-per-stage").copied(),
            m.get_one::<f64>("guidance").copied(),
        ),
        Some(("bench", m)) => commands::bench(
            m.get_one::<PathBuf>("config").map(|p| p.as_path()),
            m.get_one::<String>("mode").unwrap(),
            m.get_one::<PathBuf>("out").unwrap(),
        ),
        Some(("eval", m)) => commands::eval(
            m.get_one::<PathBuf>("ckpt").unwrap(),
            m.get_one::<PathBuf>("data").unwrap(),
            m.get_one::<String>("metric").unwrap(),
            m.get_one::<PathBuf>("out").unwrap(),
        ),
        _ => unreachable!("subcommand_required"),
    };
    result.map_err(CliFailure::Core)
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliFailure::Help(e)) => {
            // --help / --version land here; print to stdout and succeed.
            print!("{e}");
            ExitCode::SUCCESS
        }
        Err(CliFailure::Usage(e)) => {
            let text = e.to_string();
            let first_line = text.lines().next().unwrap_or("bad arguments");
            eprintln!("error: usage: {first_line}");
            eprintln!("{e}");
            ExitCode::from(1)
        }
        Err(CliFailure::Core(e)) => {
            let (kind, code) = match e.category() {
                ErrorCategory::Data => ("data", 2),
                ErrorCategory::Numerical => ("numerical", 3),
            };
            eprintln!("error: {kind}: {e}");
            ExitCode::from(code)
        }
    }
}
