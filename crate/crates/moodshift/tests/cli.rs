use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use moodshift::report::Comparison;
use serde_json::Value;

fn moodshift(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moodshift"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("MOODSHIFT_OUTPUT_ROOT")
        .env_remove("MOODSHIFT_THREADS")
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> Value {
    let out = moodshift(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn error_record(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).expect("JSON error record on stderr");
    serde_json::from_str(line).unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const SMALL: [&str; 10] = ["--subjects", "3", "--videos-per-subject", "2", "--frames", "8", "--height", "8", "--width", "8"];

fn synth_small(dir: &Path, name: &str, seed: &str) {
    let mut args = vec!["synth", "--out", name, "--seed", seed];
    args.extend_from_slice(&SMALL);
    ok(&args, dir);
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path(), "a", "5");
    synth_small(dir.path(), "b", "5");
    synth_small(dir.path(), "c", "6");
    let a = tree(&dir.path().join("a"));
    assert_eq!(a.len(), 2 + 3 * 2 * 8);
    assert_eq!(a, tree(&dir.path().join("b")));
    assert_ne!(a, tree(&dir.path().join("c")));
}

#[test]
fn prepare_skips_short_videos() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--out", "d", "--subjects", "2", "--videos-per-subject", "1", "--frames", "4", "--height", "8", "--width", "8"], dir.path());
    let out = moodshift(&["prepare", "--dataset", "d"], dir.path());
    assert!(out.status.success());
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["chunks"], 0);
    assert_eq!(summary["skipped_videos"].as_array().unwrap().len(), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("fewer than the 5-frame window"));
    assert_eq!(fs::read_to_string(dir.path().join("d/chunks.jsonl")).unwrap(), "");
}

#[test]
fn prepare_reports_missing_frames() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path(), "d", "1");
    let victim = fs::read_dir(dir.path().join("d/frames")).unwrap().next().unwrap().unwrap().path();
    fs::remove_file(victim.join("00003.png")).unwrap();
    let out = moodshift(&["prepare", "--dataset", "d"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_record(&out)["error"], "data");
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = moodshift(&["train", "--dataset", "nowhere", "--arch", "5cnn"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["exit_code"], 2);
    let out = moodshift(&["train", "--dataset", "nowhere", "--grid", "single"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    fs::write(dir.path().join("bad.toml"), "sede = 4\n").unwrap();
    let out = moodshift(&["--config", "bad.toml", "train"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = moodshift(&["explain", "--run", "nowhere"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(moodshift(&["--help"], dir.path()).status.code(), Some(0));
    assert_eq!(moodshift(&["frobnicate"], dir.path()).status.code(), Some(2));
    // Validation happens before anything is written.
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn full_pipeline_on_tiny_frames() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&["synth", "--out", "d", "--subjects", "4", "--videos-per-subject", "4", "--frames", "10", "--height", "12", "--width", "12", "--seed", "3"], p);
    ok(&["synth", "--out", "ext", "--subjects", "2", "--videos-per-subject", "1", "--frames", "10", "--height", "12", "--width", "12", "--seed", "9", "--hue-shift", "30"], p);
    ok(&["prepare", "--dataset", "d"], p);
    ok(&["prepare", "--dataset", "ext"], p);
    fs::write(
        p.join("cfg.toml"),
        "seed = 3\n[model]\nframe_size = [12, 12]\ndense_units = 16\n[grid]\npreset = \"single\"\n[train]\nepochs = 2\nfolds = 2\n",
    )
    .unwrap();
    let run = ok(&["--config", "cfg.toml", "train", "--dataset", "d", "--arch", "2cnn", "--attention", "sst", "--lr", "1e-3,1e-4", "--output-root", "runs"], p);
    assert_eq!(run["run"], "runs/2cnn_sst");
    assert_eq!(run["records"].as_array().unwrap().len(), 2);
    let best = run["best_grid_point"].as_str().unwrap().to_string();
    for k in 0..2 {
        let fold = p.join(format!("runs/2cnn_sst/{best}/fold{k}"));
        for f in ["params.bin", "model.json", "metrics.json", "predictions.jsonl"] {
            assert!(fold.join(f).is_file(), "{f}");
        }
    }

    let eval = ok(&["eval", "--run", "runs/2cnn_sst", "--external", "ext", "--plots"], p);
    assert!(eval["external"]["chunk_mean"].is_number());
    let report: Value = serde_json::from_str(&fs::read_to_string(p.join("runs/2cnn_sst/eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["folds"].as_array().unwrap().len(), 2);
    assert_eq!(report["chunk"]["n_items"], 4 * 4 * 6);
    assert!(p.join("runs/2cnn_sst/eval/confusion_video.png").is_file());

    let cam = ok(&["explain", "--run", "runs/2cnn_sst", "--fold", "1", "--chunk", "2", "--layer", "conv1", "--target", "-1", "--out", "cam", "--scale", "2"], p);
    assert_eq!(cam["frames"].as_array().unwrap().len(), 5);
    assert_eq!(cam["target"], -1);
    let img = image::open(p.join("cam/frame_04.png")).unwrap();
    assert_eq!((img.width(), img.height()), (24, 24));
    assert!(p.join("cam/cam.json").is_file());

    let out = moodshift(&["explain", "--run", "runs/2cnn_sst", "--layer", "conv7"], p);
    assert_eq!(out.status.code(), Some(2));

    let cmp: Comparison = serde_json::from_value(ok(&["compare", "runs/2cnn_sst", "runs/2cnn_sst/run_manifest.json", "--out", "cmp.json"], p)).unwrap();
    assert_eq!(cmp.t_test.t, 0.0);
    assert_eq!(cmp.t_test.df, 2);
    assert_eq!(cmp.direction, "a=b");
    assert!(p.join("cmp.json").is_file());
}

#[test]
fn output_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&["synth", "--out", "d", "--subjects", "3", "--videos-per-subject", "4", "--frames", "8", "--height", "8", "--width", "8", "--seed", "2"], p);
    ok(&["prepare", "--dataset", "d"], p);
    let out = Command::new(env!("CARGO_BIN_EXE_moodshift"))
        .args(["train", "--dataset", "d", "--grid", "single", "--epochs", "1", "--folds", "3", "--frame-size", "8x8", "--dense-units", "8"])
        .current_dir(p)
        .env("RUST_LOG", "warn")
        .env("MOODSHIFT_OUTPUT_ROOT", "elsewhere")
        .env("MOODSHIFT_THREADS", "1")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(p.join("elsewhere/1cnn_none/run_manifest.json").is_file());
}
