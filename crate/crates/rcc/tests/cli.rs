use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn rcc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rcc"))
        .args(args)
        .env_remove("RCC_SEED")
        .output()
        .expect("run rcc")
}

fn ok(args: &[&str]) -> String {
    let out = rcc(args);
    assert!(
        out.status.success(),
        "rcc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn generators_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    for f in [&a, &b] {
        ok(&["gen-passkey", "--count", "100", "--target-len", "512", "--seed", "7", "--out", p(f)]);
    }
    let text = fs::read(&a).unwrap();
    assert_eq!(text, fs::read(&b).unwrap());
    let lines: Vec<Value> = text.split(|&c| c == b'\n').filter(|l| !l.is_empty()).map(|l| serde_json::from_slice(l).unwrap()).collect();
    assert_eq!(lines.len(), 100);
    for l in &lines {
        for k in ["text", "key", "m", "n"] {
            assert!(l.get(k).is_some());
        }
    }

    let c = dir.path().join("c.bin");
    ok(&["gen-corpus", "--kind", "markov-chars", "--size", "1000", "--out", p(&c)]);
    assert_eq!(fs::metadata(&c).unwrap().len(), 4000);
    let side = read_json(&dir.path().join("c.bin.json"));
    assert_eq!(side["seed"], 0);
    assert_eq!(side["size"], 1000);
    assert_eq!(side["vocab"], 258);
    assert_eq!(side["mode"], "byte");
    let c2 = dir.path().join("c2.bin");
    let out = Command::new(env!("CARGO_BIN_EXE_rcc"))
        .args(["gen-corpus", "--kind", "markov-chars", "--size", "1000", "--out", p(&c2)])
        .env("RCC_SEED", "0")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(&c).unwrap(), fs::read(&c2).unwrap());

    let bad = rcc(&["gen-passkey", "--count", "3", "--target-len", "10", "--out", p(&dir.path().join("x"))]);
    assert!(!bad.status.success());
}

fn write_config(dir: &Path, out: &Path, corpus: &Path, extra: Value) -> std::path::PathBuf {
    let mut cfg = json!({
        "model": {
            "vocab_size": 258, "d_model": 16, "n_heads": 2, "n_enc_layers": 1, "n_dec_layers": 2,
            "encoder_window": 16, "compression_rate": 4, "decoder_budget": 24, "max_segments": 16, "max_positions": 160
        },
        "stages": [
            { "plan": { "stage": "stage1_full", "encoder_length": 16, "steps": 6,
                        "task_mix": { "reconstruction": 9.0, "continuation": 1.0 } } },
            { "plan": { "stage": "stage2_frozen_encoder", "encoder_length": 32, "steps": 4,
                        "task_mix": { "reconstruction": 9.0, "continuation": 1.0 } } }
        ],
        "data": { "corpus": corpus },
        "output_dir": out,
        "seed": 11
    });
    if let (Value::Object(c), Value::Object(e)) = (&mut cfg, extra) {
        c.extend(e);
    }
    let path = dir.join(format!("{}.json", out.file_name().unwrap().to_str().unwrap()));
    fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn train_resume_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus.bin");
    ok(&["gen-corpus", "--kind", "markov-chars", "--size", "20000", "--seed", "3", "--out", p(&corpus)]);

    let full = d.join("full");
    let cfg_full = write_config(d, &full, &corpus, json!({}));
    let stdout = ok(&["train", "--config", p(&cfg_full)]);
    assert!(stdout.contains("lr 1e-4"), "{stdout}");
    let s0 = read_json(&full.join("stage0.summary.json"));
    let s1 = read_json(&full.join("stage1.summary.json"));
    assert_eq!(s0["learning_rate"], 1e-4);
    assert_eq!(s1["encoder_unchanged"], true);
    assert_eq!(s1["encoder_hash_before"], s1["encoder_hash_after"]);
    assert_eq!(s1["decoder_changed"], true);
    assert_eq!(s0["encoder_unchanged"], false);

    let part = d.join("part");
    let cfg_part = write_config(d, &part, &corpus, json!({}));
    let stdout = ok(&["train", "--config", p(&cfg_part), "--max-steps", "4"]);
    assert!(stdout.contains("--resume"));
    assert!(!part.join("stage0.ckpt").exists());
    ok(&["train", "--config", p(&cfg_part), "--resume", "--max-steps", "3"]);
    ok(&["train", "--config", p(&cfg_part), "--resume"]);
    for f in ["stage0.log.jsonl", "stage1.log.jsonl", "stage0.ckpt", "stage1.ckpt"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(part.join(f)).unwrap(), "{f}");
    }
    let log = fs::read_to_string(full.join("stage1.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);

    let unknown = d.join("unknown");
    let cfg_bad = write_config(d, &unknown, &corpus, json!({ "learning_rte": 0.1 }));
    let out = rcc(&["train", "--config", p(&cfg_bad)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rte"));

    let missing = d.join("missing");
    let cfg_missing = write_config(d, &missing, &d.join("nope.bin"), json!({}));
    let out = rcc(&["train", "--config", p(&cfg_missing)]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.corpus"));

    let ckpt = full.join("stage1.ckpt");
    let keys = d.join("keys.jsonl");
    ok(&["gen-passkey", "--count", "3", "--target-len", "256", "--out", p(&keys)]);
    let stem = d.join("pk");
    ok(&["eval-passkey", "--checkpoint", p(&ckpt), "--data", p(&keys), "--out", p(&stem)]);
    let acc = read_json(&d.join("pk.json"))["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(fs::read_to_string(d.join("pk.csv")).unwrap().lines().count(), 4);

    let stem = d.join("recon");
    ok(&[
        "eval-recon", "--checkpoint", p(&ckpt), "--corpus", p(&corpus), "--samples", "2", "--window", "32",
        "--positions", "5", "--step", "4", "--prompt-len", "4", "--target-len", "4", "--out", p(&stem),
    ]);
    let rep = read_json(&d.join("recon.json"));
    assert_eq!(rep["per_prompt_scores"].as_array().unwrap().len(), 10);
    assert_eq!(fs::read_to_string(d.join("recon.csv")).unwrap().lines().count(), 11);

    let qa = d.join("qa.jsonl");
    ok(&["gen-qa", "--count", "2", "--facts", "1", "--out", p(&qa)]);
    let stem = d.join("qa");
    let out = rcc(&["eval-qa", "--checkpoint", p(&ckpt), "--data", p(&qa), "--out", p(&stem)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(read_json(&d.join("qa.json"))["ins_human"].is_number());

    let text = ok(&["generate", "--checkpoint", p(&ckpt), "--context", "abc abc", "--prompt", "ab", "--max-new", "3"]);
    assert!(!text.is_empty());

    ok(&["check", "--report", p(&d.join("pk.json")), "--expect", "accuracy>=0", "--expect", "count==3"]);
    let fail = rcc(&["check", "--report", p(&d.join("pk.json")), "--expect", "accuracy>1"]);
    assert_eq!(fail.status.code(), Some(1));
    let err = rcc(&["check", "--report", p(&d.join("pk.json")), "--expect", "nofield>1"]);
    assert_eq!(err.status.code(), Some(2));
}

#[test]
fn memory_report_columns_are_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("mem");
    ok(&["memory-report", "--from", "1024", "--to", "65536", "--step", "1024", "--out", p(&stem)]);
    let csv = fs::read_to_string(dir.path().join("mem.csv")).unwrap();
    let rows: Vec<Vec<u64>> = csv.lines().skip(1).map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 64);
    for col in 0..3 {
        assert!(rows.windows(2).all(|w| w[1][col] >= w[0][col]), "column {col}");
    }
    let summary = read_json(&dir.path().join("mem.json"));
    assert!(summary["crossover"].as_u64().unwrap() < 16384);
    assert!(summary["asymptotic_ratio"].as_f64().unwrap() <= 0.1);
}
