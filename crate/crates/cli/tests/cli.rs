use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use importance_core::EvalReport;

fn importance(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_importance"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = importance(args);
    assert!(
        out.status.success(),
        "importance {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A micro config small enough to train in seconds.
fn tiny_config(dir: &Path, epochs: usize) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(
        &path,
        format!(
            "profile = \"micro\"\n\n[train]\nepochs = {epochs}\neval_stride = 1\n\n[synthetic]\nn_clips = 4\nframes_per_scene = 5\n"
        ),
    )
    .unwrap();
    path
}

fn synthetic(dir: &Path, cfg: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    let msg = ok(&["make-synthetic", "--config", s(cfg), "--seed", "3", "--out", s(&data)]);
    assert!(msg.contains("wrote 4 scenes (3 train / 1 test)"), "{msg}");
    data
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 2);
    let data = synthetic(dir.path(), &cfg);
    assert!(data.join("manifest.json").is_file());

    let run = dir.path().join("run");
    let msg = ok(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&run)]);
    assert!(msg.contains("model.safetensors"));
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("epoch,loss,ap,f1,acc,lr"));
    assert_eq!(lines.count(), 2);
    assert!(fs::read_to_string(run.join("config.toml")).unwrap().contains("epochs = 2"));

    let report = dir.path().join("out/report.json");
    let ckpt = run.join("model.safetensors");
    let msg = ok(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--report", s(&report)]);
    assert!(msg.starts_with("AP "), "{msg}");
    let parsed = EvalReport::read_json(&report).unwrap();
    assert!((0.0..=1.0).contains(&parsed.ap));
    assert!(parsed.per_object.iter().all(|o| (0.0..=1.0).contains(&o.score)));
    assert!(dir.path().join("out/report_pr.csv").is_file());
    assert!(dir.path().join("out/report_objects.csv").is_file());

    let scene = data.join(&fs::read_dir(&data).unwrap().filter_map(|e| {
        let e = e.unwrap();
        e.path().is_dir().then(|| e.file_name())
    }).min().unwrap());
    let overlays = dir.path().join("overlays");
    let msg = ok(&["predict", "--clip", s(&scene), "--checkpoint", s(&ckpt), "--overlay-dir", s(&overlays)]);
    assert!(msg.starts_with("track  score   label"), "{msg}");
    let names: Vec<String> = fs::read_dir(&overlays)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert!(names.iter().any(|n| n.ends_with("_000004.png")), "{names:?}");
    assert!(names.iter().any(|n| n.ends_with("_000004_gates.json")), "{names:?}");
}

#[test]
fn interrupted_training_resumes_to_the_same_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 3);
    let data = synthetic(dir.path(), &cfg);

    let straight = dir.path().join("straight");
    ok(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&straight)]);

    let part = dir.path().join("part");
    ok(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&part), "--stop-after", "1"]);
    assert_eq!(fs::read_to_string(part.join("train_log.csv")).unwrap().lines().count(), 2);
    let resumed = dir.path().join("resumed");
    let ckpt = part.join("model.safetensors");
    ok(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&resumed), "--resume", s(&ckpt)]);

    assert_eq!(
        fs::read_to_string(straight.join("train_log.csv")).unwrap(),
        fs::read_to_string(resumed.join("train_log.csv")).unwrap()
    );
}

#[test]
fn ablate_reports_every_preset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 1);
    let data = synthetic(dir.path(), &cfg);
    let out = dir.path().join("ablate");
    let msg = ok(&[
        "ablate", "--data", s(&data), "--config", s(&cfg), "--preset", "bu", "--preset", "bu+trg", "--out", s(&out),
    ]);
    let rows: Vec<&str> = msg.lines().collect();
    assert_eq!(rows.len(), 3, "{msg}");
    assert!(rows[1].starts_with("bu ") && rows[2].starts_with("bu+trg "), "{msg}");
    assert!(out.join("bu/report.json").is_file());
    assert!(out.join("bu+trg/model.safetensors").is_file());
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = importance(&["train", "--data", s(dir.path()), "--profile", "micro", "--out", s(&dir.path().join("x"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest"));

    let out = importance(&["make-synthetic", "--profile", "nonesuch", "--out", s(&dir.path().join("y"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonesuch"));

    let out = importance(&["ablate", "--data", s(dir.path()), "--preset", "everything", "--out", "z"]);
    assert!(!out.status.success());
}
