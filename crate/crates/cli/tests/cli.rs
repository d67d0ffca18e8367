use std::path::Path;
use std::process::{Command, Output};

fn distana(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distana"))
        .args(args)
        .env("DISTANA_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = distana(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn info_lists_parameter_counts() {
    let text = ok(&["info"]);
    for (name, n) in [("DISTANA4", 107), ("DISTANA26", 2967), ("DISTANAv1", 161), ("DISTANAv2", 188), ("DISTANAv3", 216)] {
        assert!(text.lines().any(|l| l.starts_with(name) && l.trim_end().ends_with(&n.to_string())), "{text}");
    }
}

#[test]
fn gradcheck_passes_and_catches_a_fault() {
    let text = ok(&["gradcheck", "--model", "distana-v2"]);
    assert!(text.contains("(ok)"), "{text}");
    let out = distana(&["gradcheck", "--model", "distana", "--grid", "3x3", "--steps", "6", "--inject-fault"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("never");
    // invalid config: nothing may be written
    let out = distana(&["generate", "--dataset", "ds2", "--out", s(&out_dir), "--n-test", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());

    let cfg = dir.path().join("unstable.json");
    std::fs::write(&cfg, r#"{"ds2": {"c": 3.0, "dt": 0.5}}"#).unwrap();
    let out = distana(&["generate", "--dataset", "ds2", "--out", s(&out_dir), "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("1/sqrt(2)"));
    assert!(!out_dir.exists());

    let out = distana(&["evaluate", "--data", s(&dir.path().join("missing")), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(4));
    assert!(!out_dir.exists());
}

#[test]
fn generate_train_evaluate_rollout() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("model");
    let eval = dir.path().join("eval");
    ok(&["generate", "--dataset", "ds2", "--out", s(&data), "--n-train", "2", "--n-test", "2", "--seed", "3"]);
    assert!(data.join("manifest.json").exists());
    assert!(data.join("test/seq_0001.bin").exists());

    ok(&["train", "--model", "distana-v1", "--data", s(&data), "--out", s(&model), "--epochs", "2", "--seed", "3"]);
    let log = std::fs::read_to_string(model.join("losses.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 2);
    assert_eq!(records[1]["epoch"], 1);
    assert!(records[1]["train_mse"].as_f64().unwrap() > 0.0);

    let ckpt = model.join("checkpoint");
    // checkpoint of another model is refused up front
    let out = distana(&[
        "evaluate", "--checkpoints", s(&ckpt), "--data", s(&data), "--out", s(&eval), "--model", "distana-v2",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!eval.exists());

    ok(&["evaluate", "--checkpoints", s(&ckpt), "--data", s(&data), "--out", s(&eval), "--timing-runs", "1"]);
    let mut reader = csv::Reader::from_path(eval.join("results.csv")).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header[0], "model");
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    let names: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(names, ["DISTANAv1", "Baseline t-1", "Baseline zero"]);
    assert_eq!(&rows[0][1], "161");
    assert_eq!(&rows[1][1], "-");
    let trace = std::fs::read_to_string(eval.join("traces/DISTANAv1_test0000.csv")).unwrap();
    assert_eq!(trace.lines().count(), 80);

    let roll = dir.path().join("roll");
    ok(&["rollout", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&roll), "--sequence", "1"]);
    assert!(roll.join("predictions.bin").exists());
    assert_eq!(std::fs::read_to_string(roll.join("step_mse.csv")).unwrap().lines().count(), 80);

    let info = ok(&["info", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    assert!(info.contains("epochs trained: 2"), "{info}");

    // resuming continues the epoch count
    let more = dir.path().join("more");
    ok(&[
        "train", "--model", "distana-v1", "--data", s(&data), "--out", s(&more), "--epochs", "3", "--resume", s(&ckpt),
    ]);
    let log = std::fs::read_to_string(more.join("losses.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(log.contains("\"epoch\":2"));
}
