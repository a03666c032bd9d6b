use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn gelflex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gelflex")).args(args).env("GELFLEX_THREADS", "1").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = gelflex(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Two-epoch schedule so training runs take well under a second.
fn quick_config(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("quick.toml");
    std::fs::write(&cfg, "[schedule]\nepochs = 2\n").unwrap();
    cfg
}

#[test]
fn gen_size_has_200_per_class_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let stdout = ok(&["gen", "--task", "size", "--count", "800", "--seed", "7", "--out", p(&a)]);
    assert!(stdout.contains("manifest.json"));
    let rows: Vec<(usize, usize)> = stdout
        .lines()
        .filter(|l| l.ends_with(|c: char| c.is_ascii_digit()) && l.contains(" in "))
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            (f[f.len() - 2].parse().unwrap(), f[f.len() - 1].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 8, "{stdout}");
    let mut per_size = [0usize; 4];
    for (i, (train, test)) in rows.iter().enumerate() {
        per_size[i % 4] += train + test;
    }
    assert_eq!(per_size, [200; 4]);

    ok(&["gen", "--task", "size", "--count", "800", "--seed", "7", "--out", p(&b)]);
    for f in ["manifest.json", "samples.f32"] {
        assert!(std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn missing_config_file_exits_2() {
    let out = gelflex(&["gen", "--task", "size", "--seed", "1", "--config", "/nonexistent/gelflex.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot read config"));
}

#[test]
fn unknown_config_key_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "sede = 3\n").unwrap();
    let out = gelflex(&["gen", "--task", "size", "--seed", "1", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_is_mandatory() {
    let out = gelflex(&["train", "--task", "tactile", "--count", "40"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
}

#[test]
fn size_on_predicted_angles_needs_a_proprio_checkpoint() {
    let out = gelflex(&["train", "--task", "size", "--seed", "1", "--count", "80"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_is_deterministic_and_stamps_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path());
    let run = |name: &str| {
        let dir = tmp.path().join(name);
        ok(&["train", "--task", "tactile", "--count", "40", "--seed", "3", "--config", p(&cfg), "--out", p(&dir)]);
        dir
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["report.json", "losses.csv", "confusion.csv", "model.ckpt"] {
        assert!(std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let r = read_json(&a.join("report.json"));
    assert_eq!(r["seed"], 3);
    assert_eq!(r["schema_version"], 1);
    assert_eq!(r["split"], "test");
    assert_eq!(r["schedule"]["epochs"], 2);
    let hash = read_json(&a.join("config.json"))["hash"].clone();
    assert_eq!(r["config_hash"], hash);
}

#[test]
fn size_arch_flag_selects_the_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path());
    for arch in ["mlp", "two_path", "incorporator"] {
        let dir = tmp.path().join(arch);
        ok(&[
            "train", "--task", "size", "--arch", arch, "--angles", "ground_truth", "--count", "80", "--seed", "1",
            "--config", p(&cfg), "--out", p(&dir),
        ]);
        assert_eq!(read_json(&dir.join("report.json"))["model"], format!("size_{arch}"));
    }
}

#[test]
fn eval_is_read_only_and_labels_the_split() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path());
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    ok(&["gen", "--task", "tactile", "--count", "40", "--seed", "2", "--out", p(&data)]);
    ok(&["train", "--task", "tactile", "--data", p(&data), "--seed", "2", "--config", p(&cfg), "--out", p(&run)]);
    let listing = |d: &Path| {
        let mut v: Vec<_> = std::fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name()).collect();
        v.sort();
        v
    };
    let (before_data, before_run) = (listing(&data), listing(&run));
    let ckpt = run.join("model.ckpt");
    let stdout = ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--split", "train"]);
    assert!(stdout.contains("on train split"), "{stdout}");
    assert_eq!(listing(&data), before_data);
    assert_eq!(listing(&run), before_run);

    let out = tmp.path().join("eval");
    ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--split", "train", "--out", p(&out)]);
    assert_eq!(read_json(&out.join("report.json"))["split"], "train");
}

#[test]
fn dataset_schema_mismatch_exits_5() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen", "--task", "size", "--count", "80", "--seed", "2", "--out", p(&data)]);
    let mut m = read_json(&data.join("manifest.json"));
    m["schema_version"] = 99.into();
    std::fs::write(data.join("manifest.json"), m.to_string()).unwrap();
    let out = gelflex(&["train", "--task", "size", "--angles", "ground_truth", "--data", p(&data), "--seed", "2"]);
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pipeline_logs_80_trials() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    std::fs::write(&cfg, "[schedule]\nepochs = 1\n").unwrap();
    let train = |task: &str, count: &str, extra: &[&str]| {
        let dir = tmp.path().join(task);
        let mut args = vec!["train", "--task", task, "--count", count, "--seed", "5", "--config", p(&cfg), "--out", p(&dir)];
        args.extend_from_slice(extra);
        ok(&args);
        dir.join("model.ckpt")
    };
    let proprio = train("proprio", "40", &[]);
    let tactile = train("tactile", "40", &[]);
    let size = train("size", "80", &["--proprio", p(&proprio)]);
    let out = tmp.path().join("pipe");
    let stdout = ok(&[
        "pipeline", "--proprio", p(&proprio), "--tactile", p(&tactile), "--size", p(&size), "--trials", "10", "--seed",
        "7", "--out", p(&out),
    ]);
    assert!(stdout.contains("80 grasps"), "{stdout}");
    let log = std::fs::read_to_string(out.join("trials.csv")).unwrap();
    assert_eq!(log.lines().count(), 81);
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["summary"]["trials"], 80);
    assert_eq!(summary["seed"], 7);
    assert!(summary["config_hash"].is_string());
}

#[test]
fn pipeline_rejects_swapped_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path());
    let dir = tmp.path().join("t");
    ok(&["train", "--task", "tactile", "--count", "40", "--seed", "1", "--config", p(&cfg), "--out", p(&dir)]);
    let t = dir.join("model.ckpt");
    let out = gelflex(&["pipeline", "--proprio", p(&t), "--tactile", p(&t), "--size", p(&t), "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_aggregates_three_seeds_and_refuses_mixed_schemas() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path());
    let runs = tmp.path().join("runs");
    let mut acc = Vec::new();
    for seed in ["1", "2", "3"] {
        let dir = runs.join(format!("s{seed}"));
        ok(&[
            "train", "--task", "size", "--angles", "ground_truth", "--count", "80", "--seed", seed, "--config", p(&cfg),
            "--out", p(&dir),
        ]);
        acc.push(read_json(&dir.join("report.json"))["classifier"]["accuracy"].as_f64().unwrap());
    }
    let out = tmp.path().join("summary");
    ok(&["report", p(&runs), "--out", p(&out)]);
    let csv = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "task,model,split,runs,metric,mean,std");
    let row: Vec<&str> = csv.lines().find(|l| l.contains(",accuracy,")).unwrap().split(',').collect();
    assert_eq!(row[3], "3");
    let mean = acc.iter().sum::<f64>() / 3.0;
    let std = (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    assert!((row[5].parse::<f64>().unwrap() - mean).abs() < 1e-12);
    assert!((row[6].parse::<f64>().unwrap() - std).abs() < 1e-12);

    let victim = runs.join("s2/report.json");
    let mut r = read_json(&victim);
    r["schema_version"] = 2.into();
    std::fs::write(&victim, r.to_string()).unwrap();
    let out = gelflex(&["report", p(&runs), "--out", p(&tmp.path().join("again"))]);
    assert_eq!(out.status.code(), Some(5));
}
