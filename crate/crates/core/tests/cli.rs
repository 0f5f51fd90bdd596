use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = "\
seed = 3
way = 3
shot = 1
query = 4
pe_stride = 2
dim = 8

[backbone]
epochs = 1
val_episodes = 10

[pe]
epochs = 1

[matcher]
epochs = 1
episodes = 6
val_episodes = 6

[eval]
episodes = 20
";

fn mtunet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtunet"))
        .args(args)
        .current_dir(dir)
        .env_remove("MTUNET_SEED")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mtunet(dir, args);
    assert!(
        out.status.success(),
        "mtunet {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn gen_tiny(dir: &Path, name: &str, seed: &str) {
    ok(
        dir,
        &[
            "gen-data", "--out", name, "--seed", seed, "--n-base", "4", "--n-val", "3", "--n-test", "3", "--per-class",
            "8", "--size", "16",
        ],
    );
}

fn manifest(path: &Path) -> Value {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    let obj = v.as_object_mut().unwrap();
    obj.remove("started_unix");
    obj.remove("wall_time_s");
    v
}

/// Trains all three stages on a tiny dataset inside `dir`.
fn tiny_pipeline(dir: &Path) {
    fs::write(dir.join("tiny.ini"), TINY).unwrap();
    gen_tiny(dir, "data", "3");
    ok(dir, &["train-backbone", "--data", "data", "--config", "tiny.ini", "--out", "bb.mtck"]);
    ok(
        dir,
        &["train-pe", "--data", "data", "--config", "tiny.ini", "--checkpoint", "bb.mtck", "--out", "pe.mtck"],
    );
    ok(
        dir,
        &["train-matcher", "--data", "data", "--config", "tiny.ini", "--checkpoint", "pe.mtck", "--out", "model.mtck"],
    );
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = mtunet(dir.path(), &["train-backbone", "--out", "x.mtck"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--data"), "{}", stderr(&out));
    let out = mtunet(dir.path(), &["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(mtunet(dir.path(), &["--help"]).status.code(), Some(0));
    let out = mtunet(dir.path(), &["--version"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn invalid_flag_value_names_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    gen_tiny(dir.path(), "data", "1");
    let out = mtunet(dir.path(), &["train-backbone", "--data", "data", "--out", "x.mtck", "--loss", "hinge"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--loss"), "{}", stderr(&out));
}

#[test]
fn config_errors_report_the_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.ini"), "seed = 1\n[pe]\nepochs = many\n").unwrap();
    let out = mtunet(dir.path(), &["train-backbone", "--data", "data", "--config", "bad.ini", "--out", "x.mtck"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("line 3") || err.contains(":3"), "{err}");

    fs::write(dir.path().join("unknown.ini"), "seed = 1\nlearning_rate = 3\n").unwrap();
    let out = mtunet(dir.path(), &["train-backbone", "--data", "data", "--config", "unknown.ini", "--out", "x.mtck"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("learning_rate"));
}

#[test]
fn same_seed_gives_identical_data_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    gen_tiny(dir.path(), "a", "7");
    gen_tiny(dir.path(), "b", "7");
    gen_tiny(dir.path(), "c", "8");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for name in &names {
        if name != "manifest.json" && a.join(name).is_file() {
            assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name:?}");
        }
    }
    let (ma, mb) = (manifest(&a.join("manifest.json")), manifest(&b.join("manifest.json")));
    assert_eq!(ma["inputs"], mb["inputs"]);
    assert_eq!(ma["metrics"], mb["metrics"]);
    assert_eq!(ma["status"], "complete");
    assert_eq!(ma["seed"], mb["seed"]);
    let c = dir.path().join("c");
    let first = fs::read_to_string(a.join("index.csv")).unwrap().lines().nth(1).unwrap().split(',').next().unwrap().to_string();
    assert_ne!(fs::read(a.join(&first)).unwrap(), fs::read(c.join(&first)).unwrap());
}

#[test]
fn seed_from_environment_is_overridden_by_flag() {
    let dir = tempfile::tempdir().unwrap();
    let run = |env: Option<&str>, args: &[&str]| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_mtunet"));
        cmd.args(args).current_dir(dir.path()).env_remove("MTUNET_SEED");
        if let Some(s) = env {
            cmd.env("MTUNET_SEED", s);
        }
        assert!(cmd.output().unwrap().status.success());
    };
    let common = ["--n-base", "2", "--n-val", "2", "--n-test", "2", "--per-class", "3", "--size", "16"];
    let with = |out: &'static str, extra: &[&'static str]| -> Vec<&'static str> {
        let mut v = vec!["gen-data", "--out", out];
        v.extend_from_slice(&common);
        v.extend_from_slice(extra);
        v
    };
    run(Some("5"), &with("env5", &[]));
    run(None, &with("flag5", &["--seed", "5"]));
    run(Some("9"), &with("env9flag5", &["--seed", "5"]));
    let seed = |d: &str| manifest(&dir.path().join(d).join("manifest.json"))["inputs"]["seed"].clone();
    assert_eq!(seed("env5"), 5);
    assert_eq!(seed("flag5"), 5);
    assert_eq!(seed("env9flag5"), 5);
}

#[test]
fn corrupt_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    gen_tiny(dir.path(), "data", "1");
    fs::write(dir.path().join("bad.mtck"), b"MTCK\x01\xff").unwrap();
    let out = mtunet(dir.path(), &["eval", "--data", "data", "--checkpoint", "bad.mtck", "--way", "3", "--query", "4"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("bad.mtck"));
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_pipeline(d);
    for m in ["bb.mtck.manifest.json", "pe.mtck.manifest.json", "model.mtck.manifest.json"] {
        let v = manifest(&d.join(m));
        assert_eq!(v["status"], "complete", "{m}");
        assert_eq!(v["seed"], 3);
        assert!(v["metrics"]["best_val_accuracy"].as_f64().is_some());
    }

    let before = fs::read(d.join("model.mtck")).unwrap();
    let line = ok(
        d,
        &["eval", "--data", "data", "--config", "tiny.ini", "--checkpoint", "model.mtck", "--json", "--out", "report.json"],
    );
    assert_eq!(fs::read(d.join("model.mtck")).unwrap(), before);
    assert_eq!(line.lines().count(), 1, "{line}");
    let summary: Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(summary["episodes"], 20);
    assert_eq!(summary["way"], 3);
    assert_eq!(summary["split"], "test");
    let mean = summary["mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mean));
    let report: Value = serde_json::from_str(&fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["per_episode"].as_array().unwrap().len(), 20);
    assert_eq!(report["mean"].as_f64().unwrap(), mean);

    let human = ok(d, &["eval", "--data", "data", "--config", "tiny.ini", "--checkpoint", "model.mtck"]);
    assert!(human.lines().last().unwrap().starts_with("ACC "), "{human}");

    ok(
        d,
        &["explain", "--data", "data", "--config", "tiny.ini", "--checkpoint", "model.mtck", "--out", "why", "--global-norm"],
    );
    let csv = fs::read_to_string(d.join("why/matrix.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("support,"));
    for k in 0..3 {
        for role in ["support", "query"] {
            for i in 0..2 {
                assert!(d.join(format!("why/{role}_{k}_pattern_{i}.ppm")).is_file());
            }
            assert!(d.join(format!("why/{role}_{k}_overall.ppm")).is_file());
        }
    }
    assert_eq!(manifest(&d.join("why/manifest.json"))["status"], "complete");

    // Pattern count must equal the number of selected categories.
    let out = mtunet(
        d,
        &["train-pe", "--data", "data", "--config", "tiny.ini", "--checkpoint", "bb.mtck", "--out", "pe3.mtck", "--slots", "3"],
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert_eq!(manifest(&d.join("pe3.mtck.manifest.json"))["status"], "failed");

    let out = mtunet(d, &["train-pe", "--data", "data", "--config", "tiny.ini", "--out", "pe4.mtck"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--checkpoint"));

    let out = mtunet(
        d,
        &["eval", "--data", "data", "--config", "tiny.ini", "--checkpoint", "model.mtck", "--way", "9"],
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}
