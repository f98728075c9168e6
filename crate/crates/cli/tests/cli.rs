use std::path::Path;
use std::process::{Command, Output};

fn nie(args: &[&str], cache: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nie"))
        .args(args)
        .env("NIE_CACHE_DIR", cache)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn score_rows(path: &Path) -> Vec<(usize, f64)> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let (a, b) = l.split_once(',').unwrap();
            (a.parse().unwrap(), b.parse().unwrap())
        })
        .collect()
}

#[test]
fn synth_train_oracle_nora_eval() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let cache = dir.path().join("cache");

    ok(&nie(
        &["synth", "--kind", "ba", "--n", "60", "--m", "2", "--features", "6", "--classes", "3", "--out", &p("data")],
        &cache,
    ));
    let out = ok(&nie(
        &["train", "--data", &p("data"), "--model", "gcn", "--hidden", "8", "--epochs", "20", "--out", &p("m.json")],
        &cache,
    ));
    assert!(out.contains("test accuracy"));
    ok(&nie(
        &["oracle", "--data", &p("data"), "--checkpoint", &p("m.json"), "--workers", "2", "--out", &p("oracle.csv")],
        &cache,
    ));
    let oracle = score_rows(Path::new(&p("oracle.csv")));
    assert_eq!(oracle.len(), 60);
    assert!(oracle.iter().all(|&(_, s)| s >= 0.0));

    // tune on the first 20 nodes
    let mut labels = String::from("node_id,score\n");
    for (i, s) in &oracle[..20] {
        labels.push_str(&format!("{i},{s}\n"));
    }
    std::fs::write(p("labels.csv"), labels).unwrap();
    let out = ok(&nie(
        &["nora", "--data", &p("data"), "--model", &p("m.json"), "--tune", &p("labels.csv"), "--out", &p("nora.csv")],
        &cache,
    ));
    assert!(out.contains("tuned on 20 labels"));
    assert!(dir.path().join("nora.config.json").exists());

    let out = ok(&nie(
        &["eval", "--oracle", &p("oracle.csv"), "--method", &p("nora.csv"), "--split-seed", "3", "--out", &p("r.json")],
        &cache,
    ));
    assert!(out.contains("pearson"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p("r.json")).unwrap()).unwrap();
    let r = report["report"]["pearson"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&r));
}

#[test]
fn validation_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = nie(
        &["train", "--data", missing.to_str().unwrap(), "--out", "m.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing file"));

    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"dataset": {"synthetic": {"kind": "cycle", "params": {"n": 5}}}, "task": "node", "model": {"kind": "gcn"}, "methods": ["nora"], "cycles": [7]}"#).unwrap();
    let out = nie(
        &["pipeline", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn pipeline_writes_report_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(
        &cfg,
        r#"{
            "dataset": {"synthetic": {"kind": "barabasi-albert", "params": {"n": 80, "m": 2}, "seed": 1}},
            "task": "node",
            "model": {"kind": "sage", "hidden": 8},
            "train": {"epochs": 20},
            "methods": ["nora", "nora-t1", "mask"],
            "tune_fraction": 0.2
        }"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = ok(&nie(
        &["pipeline", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()],
        &dir.path().join("cache"),
    ));
    assert!(out.contains("nora: mean pearson"));
    for f in ["report.json", "manifest.json", "cycle0/oracle.csv", "cycle0/nora.csv", "cycle0/mask.csv"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
}
