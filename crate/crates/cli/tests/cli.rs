use std::fs;
use std::path::Path;

use tips_cli::run_command;

fn run(out: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["tips".to_string(), "--out".into(), out.display().to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    run_command(argv)
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(run_command(["tips"]), 1);
    assert_eq!(run_command(["tips", "fly"]), 1);
    assert_eq!(run_command(["tips", "infer", "--mode", "sideways"]), 1);
    assert_eq!(run_command(["tips", "--help"]), 0);
}

#[test]
fn missing_inputs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["train-t2p"]), 2);
    assert_eq!(run(dir.path(), &["eval"]), 2);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, "[render]\nwarp = 9\n").unwrap();
    assert_eq!(run(dir.path(), &["--config", cfg.to_str().unwrap(), "synth-data"]), 2);
}

#[test]
fn real_data_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["synth-data", "--samples", "24", "--test-samples", "8"]), 0);
    assert_eq!(run(dir.path(), &["eval", "--real"]), 0);
    let table = fs::read_to_string(dir.path().join("eval/real.txt")).unwrap();
    let value = |m: &str| -> f64 {
        let line = table.lines().find(|l| l.starts_with(m)).unwrap();
        line.split_whitespace().nth(1).unwrap().parse().unwrap()
    };
    assert_eq!(value("SSIM"), 1.0);
    assert_eq!(value("PCKh"), 1.0);
    assert_eq!(value("GCR"), 1.0);
}

#[test]
fn damaged_checkpoints_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(run(out, &["synth-data", "--samples", "16", "--test-samples", "4"]), 0);
    assert_eq!(run(out, &["train-t2p", "--steps", "2", "--batch-size", "2"]), 0);
    assert_eq!(run(out, &["train-refiner", "--steps", "1"]), 0);
    assert_eq!(run(out, &["train-render", "--steps", "1", "--batch-size", "1", "--max-pairs", "2"]), 0);
    assert_eq!(run(out, &["infer", "--count", "2"]), 0);
    assert!(out.join("infer/partial/pairs.tsv").exists());

    let ckpts = out.join("checkpoints");
    let render = ckpts.join("render.ckpt");
    let bytes = fs::read(&render).unwrap();
    fs::write(&render, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(run(out, &["infer", "--count", "2"]), 2);

    fs::copy(ckpts.join("refiner.ckpt"), &render).unwrap();
    assert_eq!(run(out, &["infer", "--count", "2"]), 2);
}
