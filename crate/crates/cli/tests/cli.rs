use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mmcnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmcnn"))
        .args(args)
        .output()
        .expect("spawn mmcnn")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn small_data(dir: &Path) {
    let out = mmcnn(&[
        "gen-data",
        "--out-dir",
        path(dir),
        "--seed",
        "3",
        "--eyes-per-class",
        "8",
        "--val-per-class",
        "2",
        "--test-per-class",
        "2",
        "--image-size",
        "32",
        "--oct-missing-frac",
        "0",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn train_args<'a>(manifest: &'a str, out_dir: &'a str) -> Vec<&'a str> {
    vec![
        "train",
        "--manifest",
        manifest,
        "--out-dir",
        out_dir,
        "--seed",
        "1",
        "--epochs",
        "2",
        "--lr-decay-epochs",
        "1",
        "--width",
        "4",
        "--batch-size",
        "8",
    ]
}

#[test]
fn default_generation_writes_150_eyes() {
    let dir = tempfile::tempdir().unwrap();
    let out = mmcnn(&["gen-data", "--out-dir", path(dir.path()), "--seed", "0"]);
    assert_eq!(code(&out), 0);
    let manifest = fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
    let eyes: std::collections::HashSet<&str> = manifest
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').next())
        .collect();
    assert_eq!(eyes.len(), 150);
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(code(&mmcnn(&[])), 2);
    assert_eq!(code(&mmcnn(&["gen-data", "--out-dir", "x"])), 2);
    assert_eq!(
        code(&mmcnn(&[
            "eval",
            "--checkpoint",
            "a",
            "--manifest",
            "b",
            "--f1",
            "xx"
        ])),
        2
    );

    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("missing.csv");
    let mut args = train_args(path(&manifest), path(dir.path()));
    args.extend(["--modality", "fundus", "--pairing", "loose"]);
    let out = mmcnn(&args);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("pairing"));
}

#[test]
fn missing_files_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("missing.csv");
    let out = mmcnn(&train_args(path(&manifest), path(dir.path())));
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_eval_cam_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_data(&data);
    let manifest = data.join("manifest.csv");
    let run = dir.path().join("run");
    let out = mmcnn(&train_args(path(&manifest), path(&run)));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["best.mmck", "train_log.jsonl", "config.json"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let ckpt = run.join("best.mmck");

    let eval_dir = dir.path().join("eval");
    let out = mmcnn(&[
        "eval",
        "--checkpoint",
        path(&ckpt),
        "--manifest",
        path(&manifest),
        "--split",
        "val",
        "--f1",
        "hm",
        "--out-dir",
        path(&eval_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("macro F1"));
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["overall"]["f1_variant"], "sens_spec");

    let cam_dir = dir.path().join("cam");
    let out = mmcnn(&[
        "cam",
        "--checkpoint",
        path(&ckpt),
        "--manifest",
        path(&manifest),
        "--samples",
        "normal-0000,wetAMD-0001#0",
        "--class",
        "wetAMD",
        "--out-dir",
        path(&cam_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rendered = fs::read_dir(&cam_dir).unwrap().count();
    assert_eq!(rendered, 8, "heatmap and overlay per branch per sample");

    let out = mmcnn(&[
        "cam",
        "--checkpoint",
        path(&ckpt),
        "--manifest",
        path(&manifest),
        "--samples",
        "nobody",
        "--out-dir",
        path(&cam_dir),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn identical_flags_give_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_data(&data);
    let manifest = data.join("manifest.csv");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for run in [&a, &b] {
        assert_eq!(code(&mmcnn(&train_args(path(&manifest), path(run)))), 0);
    }
    assert_eq!(
        fs::read(a.join("best.mmck")).unwrap(),
        fs::read(b.join("best.mmck")).unwrap()
    );
    let losses = |d: &Path| -> Vec<String> {
        fs::read_to_string(d.join("train_log.jsonl"))
            .unwrap()
            .lines()
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                v["train_loss"].to_string()
            })
            .collect()
    };
    assert_eq!(losses(&a), losses(&b));
}
