//! End-to-end checks of the command-line interface, driving the real binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use skelseg::data::{save_labels, save_manifest, save_skel1, DatasetManifest, SkeletonSequence};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_skelseg"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "command {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    entries.sort();
    entries
        .into_iter()
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

fn synth_small(dir: &Path, seed: u64) {
    run_ok(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--k",
        "4",
        "--seqs",
        "20",
        "--seed",
        &seed.to_string(),
    ]);
}

#[test]
fn synth_is_deterministic_and_complete() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        run_ok(&[
            "synth", "--out", d.to_str().unwrap(), "--k", "4", "--seqs", "5", "--seed", "7",
        ]);
    }
    assert_eq!(dir_snapshot(&a), dir_snapshot(&b));

    let manifest = std::fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert!(manifest.starts_with("K=4\n"));
    for line in manifest.lines().skip(1) {
        let skl1 = a.join(line);
        assert!(skl1.exists(), "missing {line}");
        assert!(skl1.with_extension("skll").exists(), "no labels for {line}");
    }
}

#[test]
fn eval_perfect_predictions_score_100() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    run_ok(&[
        "synth", "--out", data.to_str().unwrap(), "--k", "3", "--seqs", "4", "--seed", "3",
        "--fps", "10", "--seg-len-min", "1", "--seg-len-max", "2", "--segs-min", "2",
        "--segs-max", "3",
    ]);
    // Point --pred at the data directory itself: the ground-truth .skll
    // files double as predictions.
    let out = run_ok(&[
        "eval",
        "--data",
        data.join("manifest.txt").to_str().unwrap(),
        "--pred",
        data.to_str().unwrap(),
    ]);
    let json: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("stdout is a JSON report");
    for key in ["mof", "edit", "f1_10", "f1_25", "f1_50"] {
        assert_eq!(json[key], 100.0, "{key} != 100");
    }
}

fn small_config(path: &Path) {
    std::fs::write(
        path,
        "epochs=2\nstages=1\nlayers_per_stage=1\nhidden_dim=8\nlatent_dim=4\npatch_seconds=1.0\n",
    )
    .unwrap();
}

#[test]
fn train_segment_eval_plot_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    run_ok(&[
        "synth", "--out", data.to_str().unwrap(), "--k", "2", "--seqs", "4", "--seed", "5",
        "--fps", "10", "--seg-len-min", "1", "--seg-len-max", "2", "--segs-min", "2",
        "--segs-max", "3",
    ]);
    let manifest = data.join("manifest.txt");
    let cfg = tmp.path().join("run.cfg");
    small_config(&cfg);

    let run_dir = tmp.path().join("run");
    run_ok(&[
        "train",
        "--data",
        manifest.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--lambda",
        "0.01",
    ]);
    assert!(run_dir.join("model.ckpt").exists());
    assert!(run_dir.join("train_log.jsonl").exists());
    let resolved = std::fs::read_to_string(run_dir.join("config.resolved")).unwrap();
    // Flag overrides the file value and lands in the serialized config.
    assert!(resolved.contains("lambda=0.01\n"), "{resolved}");
    assert!(resolved.contains("hidden_dim=8\n"));

    let pred_dir = tmp.path().join("pred");
    run_ok(&[
        "segment",
        "--data",
        manifest.to_str().unwrap(),
        "--checkpoint",
        run_dir.join("model.ckpt").to_str().unwrap(),
        "--out",
        pred_dir.to_str().unwrap(),
    ]);
    let preds: Vec<PathBuf> = std::fs::read_dir(&pred_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().ends_with(".pred.skll"))
        .collect();
    assert_eq!(preds.len(), 4);

    let out = run_ok(&[
        "eval",
        "--data",
        manifest.to_str().unwrap(),
        "--checkpoint",
        run_dir.join("model.ckpt").to_str().unwrap(),
    ]);
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(json["mof"].as_f64().unwrap() >= 0.0);
    assert_eq!(json["scope"], "global");

    // Plot one sequence's prediction against its ground truth.
    let first = std::fs::read_to_string(&manifest)
        .unwrap()
        .lines()
        .nth(1)
        .unwrap()
        .to_string();
    let stem = first.trim_end_matches(".skl1");
    let svg_path = tmp.path().join("timeline.svg");
    run_ok(&[
        "plot",
        "--pred",
        pred_dir.join(format!("{stem}.pred.skll")).to_str().unwrap(),
        "--gt",
        data.join(format!("{stem}.skll")).to_str().unwrap(),
        "--out",
        svg_path.to_str().unwrap(),
    ]);
    let svg = std::fs::read_to_string(&svg_path).unwrap();
    assert!(svg.starts_with("<?xml"));
    assert!(svg.contains("<svg") && svg.trim_end().ends_with("</svg>"));
    assert!(svg.matches("<rect").count() >= 2);
}

#[test]
fn local_scope_forgives_swapped_cluster_ids() {
    // Two sequences whose predictions permute cluster ids inconsistently:
    // local matching scores 100, global cannot.
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    let mut paths = Vec::new();
    for (i, (first, second)) in [(0u16, 1u16), (1, 0)].iter().enumerate() {
        let t = 20usize;
        let values: Vec<f32> = (0..2 * t).map(|x| (x as f32 * 0.37).sin()).collect();
        let gt: Vec<u16> = (0..t).map(|f| if f < 10 { 0 } else { 1 }).collect();
        let seq = SkeletonSequence::new(
            format!("seq_{i}"),
            1,
            t,
            2,
            10.0,
            0,
            values,
            Some(gt),
        )
        .unwrap();
        save_skel1(&seq, data.join(format!("seq_{i}.skl1"))).unwrap();
        save_labels(seq.labels.as_ref().unwrap(), data.join(format!("seq_{i}.skll"))).unwrap();
        let pred: Vec<u16> = (0..t).map(|f| if f < 10 { *first } else { *second }).collect();
        save_labels(&pred, data.join(format!("seq_{i}.pred.skll"))).unwrap();
        paths.push(PathBuf::from(format!("seq_{i}.skl1")));
    }
    save_manifest(&DatasetManifest { k: 2, paths }, data.join("manifest.txt")).unwrap();

    let eval_with = |scope: &str| -> serde_json::Value {
        let out = run_ok(&[
            "eval",
            "--data",
            data.join("manifest.txt").to_str().unwrap(),
            "--pred",
            data.to_str().unwrap(),
            "--scope",
            scope,
        ]);
        serde_json::from_slice(&out.stdout).unwrap()
    };
    let local = eval_with("local");
    let global = eval_with("global");
    assert_eq!(local["mof"], 100.0);
    assert_eq!(local["scope"], "local");
    assert!(global["mof"].as_f64().unwrap() < 100.0);
}

#[test]
fn failures_exit_nonzero_with_error_prefix() {
    let out = bin()
        .args(["train", "--data", "/nonexistent/manifest.txt", "--out", "/tmp/x"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error:"), "stderr: {stderr}");

    let out = bin()
        .args(["eval", "--data", "/nonexistent/manifest.txt"])
        .output()
        .unwrap();
    assert!(!out.status.success());

    // Usage error: missing required flag.
    let out = bin().args(["segment"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn synth_seed_changes_output() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth_small(&a, 1);
    synth_small(&b, 2);
    assert_ne!(dir_snapshot(&a), dir_snapshot(&b));
}
