use std::fs;
use std::path::Path;

use auscult_cli::{parse_predictions, run};
use auscult_core::harness::config::RunConfig;

fn argv(args: &[&str]) -> Vec<String> {
    std::iter::once("auscult").chain(args.iter().copied()).map(String::from).collect()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = RunConfig::default();
    cfg.encoder.embed_dim = 8;
    cfg.encoder.tcn.blocks = 2;
    cfg.encoder.enc2d.widths = vec![4, 8];
    cfg.encoder.enc2d.blocks_per_stage = 1;
    cfg.proto_head.hidden = 16;
    cfg.proto_head.metric_dim = 8;
    cfg.pretrain.epochs = 1;
    cfg.pretrain.batch = 8;
    cfg.proto.epochs = 2;
    cfg.proto.episodes_per_epoch = 2;
    cfg.proto.per_class = 4;
    cfg.proto.k_shot = 2;
    cfg.baseline.epochs = 2;
    cfg.baseline.freeze_epochs = 1;
    cfg.baseline.batch = 8;
    cfg.eval.bootstrap_resamples = 50;
    let p = dir.join("tiny.toml");
    fs::write(&p, cfg.to_toml_string()).unwrap();
    p
}

#[test]
fn unknown_flag_prints_usage_and_fails() {
    assert_ne!(run(argv(&["synth", "--bogus"])), 0);
    assert_ne!(run(argv(&[])), 0);
    assert_ne!(run(argv(&["frobnicate"])), 0);
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.label_fraction = 0.0;
    let p = dir.path().join("bad.toml");
    fs::write(&p, cfg.to_toml_string()).unwrap();
    let cli = auscult_cli::parse(argv(&[
        "--config",
        p.to_str().unwrap(),
        "compare",
        "a",
        "b",
    ]))
    .unwrap();
    let err = auscult_cli::resolve_config(&cli).unwrap_err().to_string();
    assert!(err.contains("label_fraction"), "{err}");
    assert_eq!(run(argv(&["--config", p.to_str().unwrap(), "compare", "a", "b"])), 1);
}

#[test]
fn seed_flag_overrides_config() {
    let cli = auscult_cli::parse(argv(&["--seed", "7", "compare", "a", "b"])).unwrap();
    assert_eq!(auscult_cli::resolve_config(&cli).unwrap().seed, 7);
    let cli = auscult_cli::parse(argv(&["compare", "a", "b"])).unwrap();
    assert_eq!(auscult_cli::resolve_config(&cli).unwrap().seed, 42);
}

#[test]
fn prediction_file_parsing() {
    let p = parse_predictions("P1,1,0.9\nP2, 0 ,0.25\n\n").unwrap();
    assert_eq!(p.patients, ["P1", "P2"]);
    assert_eq!(p.labels, [1, 0]);
    assert_eq!(p.scores, [0.9, 0.25]);
    assert!(parse_predictions("P1,2,0.5").is_err());
    assert!(parse_predictions("P1,1").is_err());
    assert!(parse_predictions("P1,1,x").is_err());
}

#[test]
fn compare_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let mut la = String::new();
    let mut lb = String::new();
    for i in 0..20 {
        let y = i % 2;
        la += &format!("P{},{y},{}\n", i / 2, if y == 1 { 0.8 } else { 0.2 });
        lb += &format!("P{},{y},{}\n", i / 2, 0.3 + 0.02 * i as f64);
    }
    fs::write(&a, la).unwrap();
    fs::write(&b, lb).unwrap();
    let out = dir.path().join("cmp");
    let code = run(argv(&[
        "--out",
        out.to_str().unwrap(),
        "compare",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
    ]));
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(out.join("comparison.json")).unwrap()).unwrap();
    assert!(v.get("delong").is_some() && v.get("mcnemar").is_some());
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seed"], 42);

    // Mismatched sample order is refused.
    fs::write(&b, "P9,1,0.5\n").unwrap();
    assert_eq!(run(argv(&["--out", out.to_str().unwrap(), "compare", a.to_str().unwrap(), b.to_str().unwrap()])), 1);
}

#[test]
fn full_command_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let ok = |args: &[&str]| {
        let mut full = vec!["--config", cfg];
        full.extend_from_slice(args);
        assert_eq!(run(argv(&full)), 0, "{args:?}");
    };
    ok(&["--out", &d("corpus"), "synth", "--patients", "15", "--duration", "4", "--prevalence", "0.5", "--murmur-snr-db", "6"]);
    assert!(dir.path().join("corpus/manifest.jsonl").exists());
    ok(&["--out", &d("data"), "prepare", "--manifest", &d("corpus/manifest.jsonl")]);
    for s in ["train", "val", "test"] {
        assert!(dir.path().join("data").join(s).join("samples.f32").exists());
    }
    assert!(dir.path().join("data/split.json").exists());
    ok(&["--out", &d("pre"), "pretrain", "--data", &d("data")]);
    let pre = d("pre/pretrain.ckpt");
    ok(&["--out", &d("proto"), "train-proto", "--data", &d("data"), "--checkpoint", &pre]);
    ok(&["--out", &d("lin"), "train-linear", "--data", &d("data"), "--checkpoint", &pre]);
    ok(&["--out", &d("scratch"), "train-linear", "--data", &d("data")]);
    ok(&["--out", &d("eval_p"), "eval", "--data", &d("data"), "--checkpoint", &d("proto/proto.ckpt")]);
    ok(&["--out", &d("eval_l"), "eval", "--data", &d("data"), "--checkpoint", &d("lin/linear.ckpt")]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("eval_p/eval.json")).unwrap()).unwrap();
    assert!(report["f1"].as_f64().is_some());
    ok(&["--out", &d("cmp"), "compare", &d("eval_p/predictions.csv"), &d("eval_l/predictions.csv")]);
    ok(&["--out", &d("emb"), "embed", "--data", &d("data"), "--checkpoint", &d("proto/proto.ckpt"), "--split", "test"]);
    assert!(dir.path().join("emb/embeddings.f32").exists());
    // An eval before a head is trained fails cleanly.
    let (bad_out, data) = (d("bad"), d("data"));
    assert_eq!(run(argv(&["--config", cfg, "--out", &bad_out, "eval", "--data", &data, "--checkpoint", &pre])), 1);
}
