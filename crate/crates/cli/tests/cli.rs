use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cwgan_dehaze::data::DatasetManifest;
use cwgan_dehaze::dcp::{dcp_dehaze, DcpParams};
use cwgan_dehaze::image::{load_image, save_image};
use cwgan_dehaze::metrics::MetricParams;
use cwgan_dehaze::report::evaluate_set;
use cwgan_dehaze::trainer::TrainLogRecord;

const TINY: &str = r#"preset = "desk"
seed = 3

[train]
batch_size = 2
epochs = 2
image_size = 16
checkpoint_interval = 1

[generator]
base_width = 4
depth = 3

[critic]
widths = [4, 8]

[vgg]
width_divisor = 16
"#;

fn cwgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cwgan")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = cwgan(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn synth(dir: &Path, n: usize) -> PathBuf {
    let out = dir.join("data");
    ok(&["synthesize", "--n", &n.to_string(), "--size", "16", "--seed", "7", "--out", s(&out)]);
    out
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path
}

fn only_entry(dir: &Path) -> PathBuf {
    let entries: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(entries.len(), 1, "{entries:?}");
    entries.into_iter().next().unwrap()
}

fn read_log(run: &Path) -> Vec<TrainLogRecord> {
    fs::read_to_string(run.join("train.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<TrainLogRecord>(l).unwrap().timeless())
        .collect()
}

#[test]
fn synthesize_is_deterministic_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["synthesize", "--n", "10", "--size", "16", "--seed", "7", "--out", s(out)]);
    }
    assert_eq!(tree(&a), tree(&b));
    assert!(a.join("config.toml").is_file());

    let bad = cwgan(&["synthesize", "--n", "0", "--out", s(&dir.path().join("c"))]);
    assert_eq!(bad.status.code(), Some(1));
    assert_eq!(String::from_utf8_lossy(&bad.stderr).trim().lines().count(), 1);
}

#[test]
fn zero_extinction_gives_clear_images() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(&["synthesize", "--n", "4", "--size", "16", "--k-min", "0", "--k-max", "0", "--out", s(&out)]);
    let m = DatasetManifest::load(&out.join("manifest.json")).unwrap();
    for p in &m.pairs {
        assert_eq!(fs::read(&p.hazy).unwrap(), fs::read(p.clear.as_ref().unwrap()).unwrap());
    }
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(cwgan(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cwgan(&["train"]).status.code(), Some(1));
    assert_eq!(cwgan(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_dataset_leaves_no_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let out = cwgan(&["train", "--dataset", s(&dir.path().join("nope")), "--out", s(&runs)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!runs.exists());
}

#[test]
fn split_writes_disjoint_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 10);
    let out = dir.path().join("split");
    ok(&["split", "--dataset", s(&data), "--ratio", "0.2", "--out", s(&out)]);
    let train = DatasetManifest::load(&out.join("train.json")).unwrap();
    let test = DatasetManifest::load(&out.join("test.json")).unwrap();
    assert_eq!((train.len(), test.len()), (8, 2));
    assert!(test.pairs.iter().all(|p| p.hazy.is_file()));
    assert!(test.ids().all(|id| train.get(id).is_none()));
}

#[test]
fn dcp_output_matches_the_library_call() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 3);
    let out = dir.path().join("dcp");
    ok(&["dehaze", "--method", "dcp", "--input", s(&data.join("hazy")), "--out", s(&out)]);
    let m = DatasetManifest::load(&data.join("manifest.json")).unwrap();
    for p in &m.pairs {
        let want = dir.path().join("want.png");
        save_image(&want, &dcp_dehaze(&load_image(&p.hazy).unwrap(), &DcpParams::default()).unwrap()).unwrap();
        assert_eq!(fs::read(out.join(format!("{}.png", p.id))).unwrap(), fs::read(&want).unwrap());
    }
    let missing = cwgan(&["dehaze", "--method", "cwgan", "--input", s(&data.join("hazy")), "--out", s(&out)]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn evaluate_matches_library_and_lays_out_methods_as_columns() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 3);
    let eval = dir.path().join("eval");
    let clear = format!("ref={}", s(&data.join("clear")));
    let hazy = format!("hazy={}", s(&data.join("hazy")));
    let stdout = ok(&["evaluate", "--dataset", s(&data), "--method", &clear, "--method", &hazy, "--out", s(&eval)]).stdout;
    let table = String::from_utf8(stdout).unwrap();
    assert!(table.contains("| Metric | ref | hazy |"));
    assert!(table.contains("| PSNR (dB) | 100.000 ± 0.000 |"));
    assert!(table.contains("| SSIM | 1.000 ± 0.000 |"));

    let m = DatasetManifest::load(&data.join("manifest.json")).unwrap();
    let lib = evaluate_set(&m, &data.join("hazy"), &MetricParams::default(), "hazy").unwrap();
    assert_eq!(fs::read_to_string(eval.join("hazy.csv")).unwrap(), lib.to_csv());

    let combined = dir.path().join("table.md");
    ok(&["report", s(&eval.join("ref.json")), s(&eval.join("hazy.json")), "--out", s(&combined)]);
    assert_eq!(fs::read_to_string(&combined).unwrap(), fs::read_to_string(eval.join("table.md")).unwrap());
}

#[test]
fn train_resume_and_dehaze_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 6);
    let cfg = tiny_config(dir.path());

    let full = dir.path().join("full");
    ok(&["train", "--config", s(&cfg), "--dataset", s(&data), "--max-steps", "4", "--out", s(&full)]);
    let full_run = only_entry(&full);
    assert!(full_run.join("config.toml").is_file());
    let want = read_log(&full_run);
    assert_eq!(want.len(), 24);

    let part = dir.path().join("part");
    ok(&["train", "--config", s(&cfg), "--dataset", s(&data), "--max-steps", "2", "--out", s(&part)]);
    let part_run = only_entry(&part);
    let ckpt = part_run.join("checkpoints/latest.ckpt");
    ok(&["train", "--config", s(&cfg), "--dataset", s(&data), "--max-steps", "4", "--resume", s(&ckpt), "--out", s(&part)]);
    assert_eq!(only_entry(&part), part_run);
    assert_eq!(read_log(&part_run), want);

    let final_ckpt = full_run.join("checkpoints/final.ckpt");
    let out = dir.path().join("gan");
    ok(&["dehaze", "--input", s(&data.join("hazy")), "--checkpoint", s(&final_ckpt), "--out", s(&out)]);
    let first = load_image(&out.join("syn0000.png")).unwrap();
    assert_eq!(first.dims(), (16, 16));

    let other = dir.path().join("other.toml");
    fs::write(&other, TINY.replace("widths = [4, 8]", "widths = [4, 16]")).unwrap();
    let bad = cwgan(&["dehaze", "--config", s(&other), "--input", s(&data.join("hazy")), "--checkpoint", s(&final_ckpt)]);
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("incompatible checkpoint"));

    let tr = dir.path().join("transfer");
    ok(&["transfer", "--config", s(&cfg), "--dataset", s(&data), "--checkpoint", s(&final_ckpt), "--epochs", "1", "--out", s(&tr)]);
    let log = read_log(&only_entry(&tr));
    assert_eq!(log.len(), 18);
    assert_eq!(log[5].generator_step, 5);
}
