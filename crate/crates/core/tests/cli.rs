use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_hvc");

fn hvc(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = hvc(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_data(dir: &Path) {
    std::fs::write(
        dir.join("spec.json"),
        r#"{"classes": 8, "coarse_classes": 3, "visual_dim": 6, "audio_dim": 3, "min_frames": 4, "max_frames": 8}"#,
    )
    .unwrap();
    ok(
        dir,
        &["gen-data", "--spec", "spec.json", "--out", "train.sgv", "--count", "40"],
    );
    ok(
        dir,
        &[
            "gen-data",
            "--spec",
            "spec.json",
            "--out",
            "valid.sgv",
            "--count",
            "12",
            "--skip",
            "5000",
        ],
    );
    std::fs::write(
        dir.join("model.json"),
        r#"{"encoder": {"hidden": 6}, "attention": "single", "head": {"type": "moe", "mixtures": 2},
            "optimizer": {"epochs": 1, "batch_size": 8}}"#,
    )
    .unwrap();
}

#[test]
fn train_predict_eval_and_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_data(d);
    ok(
        d,
        &[
            "train",
            "--config",
            "model.json",
            "--train",
            "train.sgv",
            "--valid",
            "valid.sgv",
            "--out",
            "m.sgc",
            "--report",
            "r.json",
            "--quiet",
        ],
    );
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["epochs"].as_array().unwrap().len(), 1);
    ok(
        d,
        &[
            "predict",
            "--ckpt",
            "m.sgc",
            "--data",
            "valid.sgv",
            "--k",
            "5",
            "--out",
            "p.sgp",
        ],
    );
    let gap: f64 = ok(d, &["eval", "--preds", "p.sgp", "--truth", "valid.sgv", "--k", "5"])
        .trim()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&gap));

    ok(d, &["ensemble", "--out", "e.sgp", "p.sgp"]);
    assert_eq!(
        ok(d, &["eval", "--preds", "e.sgp", "--truth", "valid.sgv", "--k", "5"]),
        ok(d, &["eval", "--preds", "p.sgp", "--truth", "valid.sgv", "--k", "5"]),
    );
}

#[test]
fn eval_prints_one_for_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_data(d);
    let videos = hvc::data::read_records(d.join("valid.sgv")).unwrap();
    let rows: Vec<Vec<f64>> = videos
        .iter()
        .map(|v| {
            (0..8)
                .map(|c| if v.fine_labels.contains(&c) { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let file = hvc::predictions::PredictionFile::from_scores(
        8,
        8,
        videos.iter().map(|v| v.id.as_str()).zip(rows.iter().map(Vec::as_slice)),
    )
    .unwrap();
    file.write(d.join("perfect.sgp")).unwrap();
    assert_eq!(
        ok(
            d,
            &["eval", "--preds", "perfect.sgp", "--truth", "valid.sgv", "--k", "8"]
        )
        .trim(),
        "1.000000"
    );
}

#[test]
fn exit_codes_separate_usage_data_and_numeric_failures() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(hvc(d, &["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(hvc(d, &["show-preset", "no-such-preset"]).status.code(), Some(1));
    std::fs::write(d.join("junk.sgv"), b"not a record file").unwrap();
    assert_eq!(
        hvc(
            d,
            &["predict", "--ckpt", "junk.sgv", "--data", "junk.sgv", "--out", "x"]
        )
        .status
        .code(),
        Some(2)
    );
    assert_eq!(
        hvc(d, &["ensemble", "--out", "x", "missing.sgp"]).status.code(),
        Some(2)
    );
    assert_eq!(
        hvc(d, &["gradcheck", "--preset", "att-bilstm", "--eps", "0.5"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn gradcheck_passes_for_every_preset() {
    let dir = tempfile::tempdir().unwrap();
    let names = ok(dir.path(), &["presets"]);
    for name in names.split_whitespace() {
        ok(dir.path(), &["gradcheck", "--preset", name, "--trials", "8"]);
    }
}
