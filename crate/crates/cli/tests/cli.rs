use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn ariign(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ariign"))
        .current_dir(dir)
        .env_remove("ARIIGN_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const TINY: [&str; 6] = ["--epochs", "3", "--d", "8", "--batch-size", "4"];

/// A small separable corpus `c.jsonl` in a fresh directory.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(&ariign(
        dir.path(),
        &[
            "synth", "--classes", "3", "--dialogues", "12", "--utterances", "6", "--dims", "8,8,8", "--sep", "6",
            "--seed", "2", "-o", "c.jsonl",
        ],
    ));
    dir
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--corpus", "c.jsonl", "--out", out];
    args.extend(TINY);
    args.extend(extra);
    ariign(dir, &args)
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let args = |o| ["synth", "--classes", "6", "--dialogues", "30", "--sep", "8", "--seed", "1", "-o", o];
    let summary = ok(&ariign(dir.path(), &args("a.jsonl")));
    ok(&ariign(dir.path(), &args("b.jsonl")));
    let a = std::fs::read(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.jsonl")).unwrap());
    let header: Value = serde_json::from_str(String::from_utf8(a).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(header["class_count"], 6);
    assert!(summary.contains("dialogues 30"), "{summary}");
    assert!(summary.contains("utterances 600"), "{summary}");
}

#[test]
fn zero_separation_notes_chance_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&ariign(
        dir.path(),
        &["synth", "--classes", "4", "--dialogues", "5", "--dims", "8,8,8", "--sep", "0", "-o", "z.jsonl"],
    ));
    assert!(out.contains("class histogram"), "{out}");
    assert!(out.contains("1/4 = 0.250"), "{out}");
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let synth = |o: &str, env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_ariign"));
        cmd.current_dir(dir.path()).env_remove("ARIIGN_SEED");
        if let Some(s) = env {
            cmd.env("ARIIGN_SEED", s);
        }
        ok(&cmd
            .args(["synth", "--dialogues", "3", "--dims", "8,8,8", "-o", o])
            .output()
            .unwrap());
        std::fs::read(dir.path().join(o)).unwrap()
    };
    let explicit = ok(&ariign(
        dir.path(),
        &["synth", "--dialogues", "3", "--dims", "8,8,8", "--seed", "9", "-o", "x.jsonl"],
    ));
    assert!(!explicit.is_empty());
    let x = std::fs::read(dir.path().join("x.jsonl")).unwrap();
    assert_eq!(synth("e.jsonl", Some("9")), x);
    assert_ne!(synth("d.jsonl", None), x);
}

#[test]
fn train_writes_a_complete_run_directory() {
    let dir = workspace();
    let stdout = ok(&train(dir.path(), "run", &["--beta", "0.8", "--seed", "4"]));
    assert!(stdout.contains("test WAA"), "{stdout}");
    let run = dir.path().join("run");
    for f in ["manifest.json", "checkpoint.bin", "log.jsonl", "report.json", "confusion.csv"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let manifest = json(run.join("manifest.json"));
    assert_eq!(manifest["config"]["beta"], 0.8);
    assert_eq!(manifest["config"]["seed"], 4);
    assert_eq!(manifest["config"]["epochs"], 3);
    assert_eq!(manifest["corpus"]["sha256"].as_str().unwrap().len(), 64);
    assert!(manifest["finished_unix"].as_u64().unwrap() >= manifest["started_unix"].as_u64().unwrap());

    let report = json(run.join("report.json"));
    let cm = report["confusion"]["counts"].as_array().unwrap();
    let total: u64 = cm.iter().flat_map(|r| r.as_array().unwrap()).map(|x| x.as_u64().unwrap()).sum();
    assert!(total > 0);
    let csv = std::fs::read_to_string(run.join("confusion.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    // Refuses to overwrite without --force.
    assert_eq!(train(dir.path(), "run", &[]).status.code(), Some(2));
    ok(&train(dir.path(), "run", &["--force"]));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = workspace();
    std::fs::write(dir.path().join("c.toml"), "beta = 0.6\nlambda = 0.3\nseed = 11\n").unwrap();
    ok(&train(dir.path(), "run", &["--config", "c.toml", "--lambda", "0.7"]));
    let config = &json(dir.path().join("run/manifest.json"))["config"];
    assert_eq!(config["beta"], 0.6);
    assert_eq!(config["lambda"], 0.7);
    assert_eq!(config["seed"], 11);
}

#[test]
fn full_ablation_trains_on_classification_alone() {
    let dir = workspace();
    ok(&train(
        dir.path(),
        "run",
        &["--ablate", "tgan", "--ablate", "imcl", "--ablate", "iccl"],
    ));
    let log = std::fs::read_to_string(dir.path().join("run/log.jsonl")).unwrap();
    let mut steps = 0;
    for line in log.lines() {
        let r: Value = serde_json::from_str(line).unwrap();
        if r["kind"] != "step" {
            continue;
        }
        assert_eq!(r["phase"], "graph", "{line}");
        assert!(r["iccl"].is_null() && r["imcl"].is_null(), "{line}");
        assert_eq!(r["overall"], r["cls"], "{line}");
        steps += 1;
    }
    assert!(steps > 0);
}

#[test]
fn error_classes_map_to_exit_codes() {
    let dir = workspace();
    let conflict = train(dir.path(), "a", &["--modalities", "t", "--fusion", "cross_modal"]);
    assert_eq!(conflict.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&conflict.stderr);
    assert!(msg.contains("two modality streams"), "{msg}");

    std::fs::write(dir.path().join("bad.toml"), "betta = 1.0\n").unwrap();
    assert_eq!(train(dir.path(), "b", &["--config", "bad.toml"]).status.code(), Some(2));
    assert_eq!(train(dir.path(), "c", &["--fusion", "sum"]).status.code(), Some(2));
    assert_eq!(train(dir.path(), "d", &["--lr", "-1"]).status.code(), Some(2));

    std::fs::write(dir.path().join("bad.jsonl"), "not json\n").unwrap();
    let bad = ariign(dir.path(), &["train", "--corpus", "bad.jsonl", "--out", "e"]);
    assert_eq!(bad.status.code(), Some(3));
    let missing = ariign(dir.path(), &["train", "--corpus", "missing.jsonl", "--out", "f"]);
    assert_eq!(missing.status.code(), Some(5));

    let unwritable = ariign(dir.path(), &["synth", "--dims", "8,8,8", "-o", "no/such/dir/c.jsonl"]);
    assert_eq!(unwritable.status.code(), Some(5));
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = workspace();
    let mut args = vec![
        "sweep", "--corpus", "c.jsonl", "--axis", "batch_size", "--values", "1,2,4", "--out", "sw",
    ];
    args.extend(TINY);
    let stdout = ok(&ariign(dir.path(), &args));
    let csv = std::fs::read_to_string(dir.path().join("sw/sweep.csv")).unwrap();
    assert_eq!(stdout, csv);
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for (k, row) in rows.iter().enumerate() {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells[0], "batch_size");
        assert_eq!(cells[1], ["1", "2", "4"][k]);
        // Per-run seeds are the base seed plus the row index.
        assert_eq!(cells[2], (1 + k).to_string());
        assert!(cells[3].parse::<f64>().is_ok() && cells[4].parse::<f64>().is_ok(), "{row}");
        assert_eq!(cells[6], "ok");
    }
    assert!(dir.path().join("sw/manifest.json").is_file());
}

#[test]
fn sweep_records_failed_runs_and_continues() {
    let dir = workspace();
    let mut args = vec![
        "sweep", "--corpus", "c.jsonl", "--axis", "beta", "--values", "0.8,7,0.5", "--out", "sw",
    ];
    args.extend(TINY);
    let stdout = ok(&ariign(dir.path(), &args));
    let rows: Vec<&str> = stdout.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].ends_with(",ok") && rows[2].ends_with(",ok"), "{stdout}");
    assert!(rows[1].contains("config error"), "{stdout}");
}

#[test]
fn sweep_rejects_an_empty_value_list() {
    let dir = workspace();
    for values in ["", " , "] {
        let out = ariign(
            dir.path(),
            &["sweep", "--corpus", "c.jsonl", "--axis", "beta", "--values", values, "--out", "sw"],
        );
        assert_eq!(out.status.code(), Some(2));
    }
    let out = ariign(
        dir.path(),
        &["sweep", "--corpus", "c.jsonl", "--axis", "depth", "--values", "1", "--out", "sw"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn reproduce_matches_and_detects_tampering() {
    let dir = workspace();
    ok(&train(dir.path(), "run", &["--seed", "3"]));
    let stdout = ok(&ariign(dir.path(), &["reproduce", "--run", "run", "--out", "again"]));
    assert!(stdout.contains("identical"), "{stdout}");
    for f in ["log.jsonl", "report.json", "checkpoint.bin", "confusion.csv"] {
        let a = std::fs::read(dir.path().join("run").join(f)).unwrap();
        assert_eq!(a, std::fs::read(dir.path().join("again").join(f)).unwrap(), "{f}");
    }

    let report = dir.path().join("run/report.json");
    let mut value = json(report.clone());
    value["waa"] = Value::from(value["waa"].as_f64().unwrap() + 1e-9);
    std::fs::write(&report, value.to_string()).unwrap();
    let out = ariign(dir.path(), &["reproduce", "--run", "run"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("test metrics differ"));

    let mut corpus = std::fs::read_to_string(dir.path().join("c.jsonl")).unwrap();
    corpus.push('\n');
    std::fs::write(dir.path().join("c2.jsonl"), corpus).unwrap();
    let out = ariign(dir.path(), &["reproduce", "--run", "again", "--corpus", "c2.jsonl"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn eval_reproduces_the_stored_test_report() {
    let dir = workspace();
    ok(&train(dir.path(), "run", &[]));
    let stdout = ok(&ariign(dir.path(), &["eval", "--run", "run"]));
    let fresh: Value = serde_json::from_str(&stdout).unwrap();
    let stored = json(dir.path().join("run/report.json"));
    assert_eq!(fresh, stored);

    ok(&ariign(dir.path(), &["eval", "--run", "run", "--split", "all", "--out", "all.json"]));
    let all = json(dir.path().join("all.json"));
    let total: u64 = all["per_class"].as_array().unwrap().iter().map(|c| c["support"].as_u64().unwrap()).sum();
    assert_eq!(total, 72);
}

#[test]
fn exported_graph_is_a_normalized_window_graph() {
    let dir = workspace();
    ok(&train(dir.path(), "run", &["--window", "2"]));
    for stream in ["text", "audio", "visual"] {
        let text = ok(&ariign(
            dir.path(),
            &["export-graph", "--corpus", "c.jsonl", "--run", "run", "--dialogue", "3", "--stream", stream],
        ));
        let mut incoming = [0.0f64; 6];
        let mut edges = Vec::new();
        for line in text.lines() {
            let f: Vec<&str> = line.split(' ').collect();
            assert_eq!(f.len(), 4, "{line}");
            let (src, dst): (usize, usize) = (f[0].parse().unwrap(), f[1].parse().unwrap());
            assert!(src.abs_diff(dst) <= 2);
            incoming[dst] += f[3].parse::<f64>().unwrap();
            edges.push((src, dst));
        }
        // Every ordered pair within the window appears once.
        edges.sort();
        edges.dedup();
        let expected = (0..6usize).flat_map(|i| (0..6usize).map(move |j| (i, j))).filter(|(i, j)| i.abs_diff(*j) <= 2);
        assert_eq!(edges.len(), expected.count());
        for w in incoming {
            assert!((w - 1.0).abs() < 1e-9, "{w}");
        }
    }

    // Without a run the graph comes from a freshly initialized model.
    let fresh = ok(&ariign(
        dir.path(),
        &["export-graph", "--corpus", "c.jsonl", "--dialogue", "0", "--d", "8", "-o", "g.txt"],
    ));
    assert!(fresh.is_empty());
    assert!(std::fs::read_to_string(dir.path().join("g.txt")).unwrap().lines().count() > 0);

    let missing = ariign(dir.path(), &["export-graph", "--corpus", "c.jsonl", "--dialogue", "99"]);
    assert_eq!(missing.status.code(), Some(2));
}
