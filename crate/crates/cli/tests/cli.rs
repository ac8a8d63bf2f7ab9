//! End-to-end tests of the command-line surface: exit codes, stderr
//! contracts, help/config-key drift, determinism, and golden outputs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stageflow"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn stageflow")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn stageflow")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY_CFG: &str = "\
schedule.base_resolution = 16
model.width = 32
model.depths = 2:1:1
model.heads = 2
train.phases = ratio 1:1:1, steps 30, lr 1e-4
train.batch = 8
bridge.steps = 50
bridge.batch = 16
eval.samples = 4
";

/// gen-data + zero-step train in `dir`, leaving data/ and run/.
fn prepare_run(dir: &Path) {
    std::fs::write(dir.join("tiny.cfg"), TINY_CFG).unwrap();
    let o = run_in(dir, &["gen-data", "--out", "data", "--count", "60", "--res", "16", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run_in(dir, &["train", "--data", "data", "--config", "tiny.cfg", "--out", "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn help_lists_every_config_key_and_default() {
    let o = run(&["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for spec in stageflow_cli::config::KEY_TABLE {
        assert!(text.contains(spec.key), "--help is missing key {}", spec.key);
        let needle = if spec.default.is_empty() {
            "(empty)".to_string()
        } else if spec.default.len() > 48 {
            spec.default[..45].to_string()
        } else {
            spec.default.to_string()
        };
        assert!(
            text.contains(&needle),
            "--help is missing default `{needle}` for {}",
            spec.key
        );
    }
    for sub in ["gen-data", "pretrain-bridge", "train", "sample", "bench", "eval"] {
        assert!(text.contains(sub), "--help is missing subcommand {sub}");
    }
}

#[test]
fn unknown_flag_exits_1_with_usage_on_stderr() {
    let o = run(&["gen-data", "--out", "x", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error: usage:"), "{err}");
    assert!(err.to_lowercase().contains("usage"), "{err}");
}

#[test]
fn unknown_subcommand_exits_1() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: usage:"));
}

#[test]
fn missing_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["train", "--data", "nope", "--out", "run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: data:"), "{}", stderr(&o));
}

#[test]
fn bad_config_key_exits_2_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "schedule.K = 3\nmodle.width = 4\n").unwrap();
    let o = run_in(
        dir.path(),
        &["bench", "--config", "bad.cfg", "--mode", "flops", "--out", "x.csv"],
    );
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("modle.width"), "{err}");
    assert!(err.contains("offset 2"), "{err}");
}

#[test]
fn bench_flops_defaults_reproduce_headline_reduction() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["bench", "--mode", "flops", "--out", "flops.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("flops.csv")).unwrap();
    let reduction: f64 = csv
        .lines()
        .find(|l| l.starts_with("reduction,"))
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!((reduction - 0.61).abs() < 0.01, "reduction {reduction}");
    let flow_only: f64 = csv
        .lines()
        .find(|l| l.starts_with("flow_only_reduction,"))
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!(flow_only > 0.0 && flow_only < reduction);
    // Reruns are byte-identical.
    let o2 = run_in(dir.path(), &["bench", "--mode", "flops", "--out", "flops2.csv"]);
    assert!(o2.status.success());
    assert_eq!(
        std::fs::read(dir.path().join("flops.csv")).unwrap(),
        std::fs::read(dir.path().join("flops2.csv")).unwrap()
    );
}

#[test]
fn sampling_is_deterministic_and_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    prepare_run(dir.path());
    for out in ["s1", "s2"] {
        let o = run_in(
            dir.path(),
            &["sample", "--ckpt", "run/checkpoint.nckp", "--class", "1", "--count", "1",
              "--seed", "7", "--out", out, "--steps-per-stage", "3"],
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = std::fs::read(dir.path().join("s1/sample_0000.pgm")).unwrap();
    let b = std::fs::read(dir.path().join("s2/sample_0000.pgm")).unwrap();
    assert_eq!(a, b);
    // Snapshot files exist for the two stage jumps.
    assert!(dir.path().join("s1/sample_0000.stage1.pgm").exists());
    assert!(dir.path().join("s1/sample_0000.stage2.pgm").exists());

    let golden_path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/sample_seed7.pgm");
    let golden = std::fs::read(&golden_path).unwrap();
    assert_eq!(a, golden, "seeded sample drifted from the golden file");
}

#[test]
fn eval_fidelity_runs_on_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    prepare_run(dir.path());
    let o = run_in(
        dir.path(),
        &["eval", "--ckpt", "run/checkpoint.nckp", "--data", "data", "--metric", "fidelity",
          "--out", "fid.csv"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("fid.csv")).unwrap();
    assert!(csv.starts_with("metric,value,n_generated,n_reference,config_hash,seed"));
    assert!(csv.contains("conditional_fidelity"));
}

#[test]
fn sample_on_bogus_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("junk.nckp"), b"NCKPjunk").unwrap();
    let o = run_in(
        dir.path(),
        &["sample", "--ckpt", "junk.nckp", "--class", "0", "--out", "s"],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: data:"));
}
