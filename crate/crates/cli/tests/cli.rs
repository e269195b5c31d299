use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn run(args: &[&str]) -> Value {
    let out = Command::new(env!("CARGO_BIN_EXE_berttune")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_berttune")).args(args).output().unwrap();
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let made = run(&[
        "make-data", "--clusters", "3", "--synonyms", "2", "--train-size", "24", "--valid-size", "6",
        "--test-size", "6", "--dim", "8", "--seed", "1", "--out-dir", p(&data),
    ]);
    assert_eq!(made["vocab_size"], 10);
    assert!(data.join("lm").join("model.json").exists());
    assert!(data.join("clusters.json").exists());

    let config = tmp.path().join("config.json");
    fs::write(&config, r#"{"max_epochs": 1, "d_model": 8, "heads": 2, "ff_dim": 16, "encoder_layers": 1, "decoder_layers": 1, "batch_size": 8}"#).unwrap();
    let base = tmp.path().join("base");
    let summary = run(&["train-baseline", "--config", p(&config), "--data", p(&data), "--out", p(&base), "--max-epochs", "2"]);
    assert_eq!(summary["epochs"], 2);
    assert!(base.join("metrics.csv").exists());
    assert!(base.join("best").join("ckpt.json").exists());

    let ft = tmp.path().join("ft");
    let summary = run(&[
        "finetune", "--from", p(&base.join("best")), "--mode", "gumbel", "--tau", "0.1", "--max-epochs", "1",
        "--eval-every", "1", "--data", p(&data), "--out", p(&ft),
    ]);
    assert_eq!(summary["phase"], "finetune");
    assert!(summary["start_valid_fbert"].is_number());

    let curves = run(&["export-curves", "--metrics", p(&ft.join("metrics.csv"))]);
    assert_eq!(curves["series"]["valid_fbert"][0]["step"], 0);
    assert_eq!(curves["epoch_markers"].as_array().unwrap().len(), 1);

    let report_path = tmp.path().join("eval.json");
    let report = run(&["evaluate", "--ckpt", p(&ft.join("best")), "--data", p(&data), "--out", p(&report_path)]);
    assert_eq!(report["sentences"], 6);
    let bleu = report["bleu"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&bleu));
    assert!(report_path.exists());

    let hist = tmp.path().join("entropy.csv");
    let ent = run(&["entropy-report", "--ckpt", p(&base.join("best")), "--data", p(&data), "--bins", "4", "--out", p(&hist)]);
    let counts: u64 = ent["counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum();
    assert_eq!(counts, ent["samples"].as_u64().unwrap());
    assert!(hist.with_extension("json").exists());

    let cands = tmp.path().join("c.txt");
    fs::write(&cands, "c0_0 c1_1\nc2_0\n").unwrap();
    let scores = tmp.path().join("scores.csv");
    let s = run(&[
        "score", "--candidates", p(&cands), "--references", p(&cands), "--lm", p(&data.join("lm")), "--out", p(&scores),
    ]);
    assert!((s["f1"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    assert!(fs::read_to_string(&scores).unwrap().starts_with("line,precision,recall,f1,empty\n1,"));
}

#[test]
fn helpful_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(fails(&["make-data", "--clusters", "40", "--dim", "8", "--out-dir", p(tmp.path())]).contains("dimensions"));
    assert!(fails(&["finetune", "--from", p(tmp.path())]).contains("--out"));
    let bad = tmp.path().join("m.csv");
    fs::write(&bad, "step,epoch,phase,train_loss,valid_bleu,valid_fbert,epoch_end\nx,0,baseline,,,,false\n").unwrap();
    assert!(fails(&["export-curves", "--metrics", p(&bad)]).contains("line 2"));
}
