use std::path::Path;
use std::process::{Command, Output};

fn roadclip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roadclip"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_train_eval_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let o = roadclip(&["gen-data", "--out", s(&data), "--seed", "3", "--train", "16", "--val", "4", "--test", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = roadclip(&[
        "train", "--data", s(&data), "--out", s(&run), "--epochs", "1", "--batch-size", "8",
        "--set", "encoder.layers=1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let line: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(line["epoch"], 1);
    assert!(line["val"]["zs_acc"].is_number());

    let ckpt = run.join("checkpoint.bin");
    let metrics = dir.path().join("metrics.jsonl");
    let heat = dir.path().join("heat");
    let o = roadclip(&[
        "eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&metrics),
        "--heatmaps", s(&heat), "--heatmap-count", "2",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(std::fs::read_to_string(&metrics).unwrap().trim()).unwrap();
    assert_eq!(v["split"], "test");
    assert_eq!(v["metrics"]["count"], 4);
    assert_eq!(std::fs::read_dir(&heat).unwrap().count(), 2);

    let o = roadclip(&["inspect", "--checkpoint", s(&ckpt)]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("prototypes"));

    let o = roadclip(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--split", "dev"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn invalid_config_exits_one_and_names_the_field() {
    let o = roadclip(&["gradcheck", "--set", "train.batch_size=0"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("train.batch_size"), "{}", stderr(&o));
    let o = roadclip(&["gradcheck", "--pe", "spiral"]);
    assert_eq!(code(&o), 1);
    let o = roadclip(&["gradcheck", "--set", "train.nope=1"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn missing_inputs_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = roadclip(&["inspect", "--checkpoint", s(&dir.path().join("absent.bin"))]);
    assert_eq!(code(&o), 3);
    let o = roadclip(&["train", "--data", s(&dir.path().join("nodata")), "--out", s(dir.path())]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn corrupt_checkpoint_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.bin");
    std::fs::write(&p, b"not a checkpoint").unwrap();
    let o = roadclip(&["inspect", "--checkpoint", s(&p)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&roadclip(&["frobnicate"])), 1);
    assert_eq!(code(&roadclip(&["--help"])), 0);
}
