use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ubf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ubf")).args(args).env("UBF_THREADS", "2").output().expect("spawn ubf")
}

fn ok(args: &[&str]) -> String {
    let out = ubf(args);
    assert!(
        out.status.success(),
        "ubf {args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("train.bin");
    let test = dir.path().join("test.bin");
    ok(&["gen-data", "--seed", "1", "--count", "40", "--out", p(&data)]);
    ok(&["gen-data", "--seed", "2", "--count", "30", "--out", p(&test)]);

    let solved = dir.path().join("zf.json");
    let stdout = ok(&["solve", "--method", "zf", "--dataset", p(&test), "--out", p(&solved)]);
    assert!(stdout.contains("mean sum-rate"));
    assert!(solved.exists());

    let settings = dir.path().join("train.json");
    fs::write(&settings, r#"{"depth": 3, "eta0": 0.001, "epochs": 5, "seed": 9}"#).unwrap();
    let model = dir.path().join("model.json");
    ok(&["train", "--method", "unrolled", "--config", p(&settings), "--dataset", p(&data), "--out-model", p(&model)]);
    let m = read_json(&model);
    assert_eq!(m["L"], 3);
    assert_eq!(m["eta"].as_array().unwrap().len(), 3);

    let diag = dir.path().join("diag.csv");
    ok(&["diag", "--model", p(&model), "--dataset", p(&test), "--out", p(&diag)]);
    let lines = fs::read_to_string(&diag).unwrap().lines().count();
    assert_eq!(lines, 1 + 4, "header plus L+1 rows");

    let mlp = dir.path().join("mlp.json");
    fs::write(&settings, r#"{"hidden": [16], "epochs": 3}"#).unwrap();
    ok(&["train", "--method", "mlp", "--config", p(&settings), "--dataset", p(&data), "--out-model", p(&mlp)]);
    assert!(mlp.exists());

    let history = dir.path().join("hpo.jsonl");
    let hpo = |budget: &str| {
        ok(&[
            "hpo", "--space", "autopgd", "--budget", budget, "--dataset", p(&data), "--history-out", p(&history),
            "--epochs", "2",
        ])
    };
    hpo("2");
    assert_eq!(fs::read_to_string(&history).unwrap().lines().count(), 2);
    hpo("3");
    assert_eq!(fs::read_to_string(&history).unwrap().lines().count(), 3, "resumed history is extended");

    let out_dir = dir.path().join("bench");
    let cfg = dir.path().join("bench.json");
    fs::write(
        &cfg,
        r#"{"train_sizes": [20], "seeds": [1, 2], "test_size": 30, "methods": ["zf", "pgdnet"],
            "max_epochs": 2, "output_dir": "unused"}"#,
    )
    .unwrap();
    ok(&["bench", "--config", p(&cfg), "--out-dir", p(&out_dir)]);
    let rows = out_dir.join("results.json");
    assert_eq!(read_json(&rows).as_array().unwrap().len(), 2);
    assert!(out_dir.join("results.csv").exists());

    let csv = dir.path().join("report.csv");
    ok(&["report", "--rows", p(&rows), "--format", "csv", "--out", p(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("method,train_size,n_seeds,mean,std,ci95_lo,ci95_hi,per_seed_rates"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn exit_codes() {
    assert_eq!(ubf(&["solve", "--method", "nope"]).status.code(), Some(1));
    assert_eq!(ubf(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(ubf(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.bin");
    let out = dir.path().join("out.json");
    let code = ubf(&["solve", "--method", "zf", "--dataset", p(&missing), "--out", p(&out)]).status.code();
    assert_eq!(code, Some(3));

    let data = dir.path().join("d.bin");
    assert_eq!(ubf(&["gen-data", "--seed", "1", "--count", "0", "--out", p(&data)]).status.code(), Some(1));

    fs::write(&data, b"not a dataset").unwrap();
    let code = ubf(&["solve", "--method", "zf", "--dataset", p(&data), "--out", p(&out)]).status.code();
    assert_eq!(code, Some(3));
}

#[test]
fn shipped_configs_load() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["desk.json", "full.json"] {
        let cfg = ubf_core::bench::ExperimentConfig::load(root.join(name)).unwrap();
        assert!(cfg.seeds.len() >= 3, "{name}");
    }
}
