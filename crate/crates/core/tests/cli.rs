//! End-to-end runs of the `rapa` binary on a small dataset.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMOKE: &str = r#"
seed = 3

[data]
num_identities = 4
clips_per_identity_per_cam = 2
frames_per_clip = 4
image_height = 64
image_width = 32

[model]
stages = [8, 16]
strides = [2, 2]

[train]
ids_per_batch = 2
clip_len = 2
epochs = 2
checkpoint_every = 1

[eval]
clip_len = 2

[gradcheck]
channels = 4
map_height = 4
map_width = 2
"#;

fn rapa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rapa")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("smoke.toml");
    fs::write(&cfg, SMOKE).unwrap();
    let data = dir.path().join("data");
    ok(&rapa(&["synth", "--config", s(&cfg), "--out", s(&data)]));
    assert!(data.join("manifest.json").is_file());
    assert!(data.join("query/id_0/cam_0/clip_0/frame_0.rapt").is_file());
    assert!(data.join("gallery/id_3/cam_1/clip_0/frame_3.rapt").is_file());
    assert!(data.join("train/id_2/cam_1/clip_1/frame_0.rapt").is_file());

    let again = dir.path().join("again");
    ok(&rapa(&["synth", "--config", s(&cfg), "--out", s(&again)]));
    assert_eq!(
        fs::read(data.join("manifest.json")).unwrap(),
        fs::read(again.join("manifest.json")).unwrap()
    );

    let run = dir.path().join("run");
    ok(&rapa(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]));
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(
        lines.next(),
        Some("epoch,step,L_tri_g,L_ce_g,L_tri_p1,L_tri_p2,L_tri_p3,L_ce_p1,L_ce_p2,L_ce_p3,L_reg,L_total")
    );
    // 4 identities at P = 2 give 2 batches per epoch.
    assert_eq!(lines.clone().count(), 4);
    for line in lines {
        let fields: Vec<f64> = line.split(',').map(|f| f.parse().unwrap()).collect();
        assert_eq!(fields.len(), 12);
        assert!(fields.iter().all(|v| v.is_finite()), "{line}");
    }
    assert!(run.join("checkpoint/manifest.json").is_file());
    assert!(run.join("checkpoints/epoch_1/manifest.json").is_file());

    // The echoed config reproduces the run bit for bit.
    let rerun = dir.path().join("rerun");
    let echo = run.join("config.toml");
    ok(&rapa(&["train", "--config", s(&echo), "--data", s(&data), "--out", s(&rerun)]));
    assert_eq!(log, fs::read_to_string(rerun.join("train_log.csv")).unwrap());

    let first = ok(&rapa(&["eval", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]));
    let second = ok(&rapa(&["eval", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]));
    assert_eq!(first, second);
    assert!(first.starts_with("rank,value\n1,"), "{first}");
    assert!(first.contains("\nmAP,"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    for key in ["rank1", "rank5", "rank20", "mAP"] {
        let v = json[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    assert!(run.join("query_embeddings.rapt").is_file());
}

#[test]
fn eval_rejects_checkpoint_of_another_shape() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("smoke.toml");
    fs::write(&cfg, SMOKE).unwrap();
    let data = dir.path().join("data");
    ok(&rapa(&["synth", "--config", s(&cfg), "--out", s(&data)]));
    let run = dir.path().join("run");
    let one_epoch = dir.path().join("one.toml");
    fs::write(&one_epoch, SMOKE.replace("epochs = 2", "epochs = 1")).unwrap();
    ok(&rapa(&["train", "--config", s(&one_epoch), "--data", s(&data), "--out", s(&run)]));

    let wider = dir.path().join("wider.toml");
    fs::write(&wider, SMOKE.replace("stages = [8, 16]", "stages = [8, 32]")).unwrap();
    let out = rapa(&["eval", "--config", s(&wider), "--data", s(&data), "--out", s(&run)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("backbone.conv1.kernel"), "{err}");
}

#[test]
fn config_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("typo.toml");
    fs::write(&cfg, "[train]\nepoch = 3\nlr = 0.1\n[modle]\nreduction = 2\n").unwrap();
    let out = rapa(&["synth", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("modle") && err.contains("train.epoch"), "{err}");

    let out = rapa(&["synth", "--out", s(&dir.path().join("missing/parent/data"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing/parent"));

    let out = rapa(&["train", "--out", s(&dir.path().join("r"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--data"));
}

#[test]
fn gradcheck_passes_and_detects_an_injected_bug() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("smoke.toml");
    fs::write(&cfg, SMOKE).unwrap();
    let report = ok(&rapa(&["gradcheck", "--config", s(&cfg)]));
    for block in ["op.conv2d", "model.backbone", "loss.global", "loss.part1", "loss.part2", "loss.part3", "loss.reg", "loss.total"] {
        assert!(report.lines().any(|l| l.starts_with(block)), "{block} missing:\n{report}");
    }
    assert!(report.contains("PASS"));

    let out = rapa(&["gradcheck", "--config", s(&cfg), "--inject-bug"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}
