use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 10] = [
    "--desk",
    "16",
    "--set",
    "data.n_pairs=12",
    "--set",
    "trainer.batch_size=4",
    "--set",
    "trainer.epochs=2",
    "--set",
    "data.generator.test_fraction=0.25",
];

fn adfseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adfseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let out = adfseg(&["train", "--set", "trainer.epochz=3", "--out", p(dir.path())]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("epochz"), "{}", text(&out.stderr));

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[fusion]\nbase_chanels = 4\n").unwrap();
    let out = adfseg(&["train", "--config", p(&cfg), "--out", p(dir.path())]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("base_chanels"), "{}", text(&out.stderr));
}

#[test]
fn missing_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.safetensors");
    let out = adfseg(&["eval", "--checkpoint", p(&missing), "--out", p(&dir.path().join("e"))]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("nope.safetensors"));
}

#[test]
fn ground_truth_oracle_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["eval", "--oracle"];
    args.extend(TINY);
    let stem = dir.path().join("oracle");
    args.extend(["--out", p(&stem)]);
    let out = adfseg(&args);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("iou 1.0000 dice 1.0000 se 1.0000 gmean 1.0000"));
    assert!(stem.with_extension("json").exists() && stem.with_extension("csv").exists());
}

#[test]
fn synth_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let mut args = vec!["synth-data"];
    args.extend(TINY);
    args.extend(["--out", p(&data)]);
    let out = adfseg(&args);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(data.join("manifest.json").exists());

    let run = dir.path().join("run");
    let mut args = vec!["train"];
    args.extend(TINY);
    args.extend(["--out", p(&run)]);
    let out = adfseg(&args);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(run.join("train_log.csv").exists() && run.join("loss.png").exists());
    let ckpt = run.join("ckpt_epoch0002.safetensors");
    assert!(ckpt.exists());

    let stem = dir.path().join("eval");
    let out = adfseg(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&stem)]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json")).unwrap()).unwrap();
    let hash = report["config_hash"].as_str().unwrap();
    assert!(stdout.contains(hash));
    assert_eq!(report["per_image"].as_array().unwrap().len(), 3);
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate", "--grid", "modalities", "--seeds", "0"];
    args.extend(TINY);
    args.extend(["--set", "trainer.epochs=1", "--out", p(dir.path())]);
    let out = adfseg(&args);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(dir.path().join("grid.png").exists());

    let bad = adfseg(&["ablate", "--grid", "sideways", "--out", p(dir.path())]);
    assert!(!bad.status.success());
}

#[test]
fn losscheck_passes() {
    let out = adfseg(&["losscheck", "--cases", "20"]);
    assert!(out.status.success(), "{}", text(&out.stdout));
    assert!(!text(&out.stdout).contains("FAIL"));
}
