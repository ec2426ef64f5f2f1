//! End-to-end tests of the command-line interface.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_freechunker"))
}

fn write_corpus(path: &Path) {
    let corpus = concat!(
        "{\"id\":\"alpha\",\"text\":\"Cats purr loudly. Dogs bark at night. Stocks fell hard today. Rain came down. The sun rose early. Code ran fine.\"}\n",
        "{\"id\":\"beta\",\"text\":\"One small step. Two quick moves. Three slow turns. Four last words.\"}\n",
    );
    fs::write(path, corpus).unwrap();
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn sentencize_emits_jsonl() {
    let dir = tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    write_corpus(&corpus);
    let out = bin()
        .args(["sentencize", "--input"])
        .arg(&corpus)
        .output()
        .unwrap();
    assert_success(&out);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 10);
    let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(first["doc_id"], "alpha");
    assert_eq!(first["index"], 0);
    assert_eq!(first["text"], "Cats purr loudly.");
    assert_eq!(first["token_count"], 4);
}

#[test]
fn sentencize_custom_abbreviations() {
    let dir = tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    fs::write(
        &corpus,
        "{\"id\":\"a\",\"text\":\"See ref. 4 for details. Done now.\"}\n",
    )
    .unwrap();
    let abbrevs = dir.path().join("abbrevs.txt");
    fs::write(&abbrevs, "ref\n").unwrap();

    let with = bin()
        .args(["sentencize", "--input"])
        .arg(&corpus)
        .arg("--abbreviations")
        .arg(&abbrevs)
        .output()
        .unwrap();
    assert_success(&with);
    assert_eq!(String::from_utf8_lossy(&with.stdout).lines().count(), 2);

    let empty = dir.path().join("none.txt");
    fs::write(&empty, "").unwrap();
    let without = bin()
        .args(["sentencize", "--input"])
        .arg(&corpus)
        .arg("--abbreviations")
        .arg(&empty)
        .output()
        .unwrap();
    assert_success(&without);
    assert_eq!(String::from_utf8_lossy(&without.stdout).lines().count(), 3);
}

#[test]
fn malformed_corpus_is_data_error_with_line_number() {
    let dir = tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    fs::write(&corpus, "{\"id\":\"a\",\"text\":\"Fine. Text.\"}\nnot json at all\n").unwrap();
    let out = bin()
        .args(["sentencize", "--input"])
        .arg(&corpus)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 2"), "stderr: {stderr}");
}

#[test]
fn unknown_method_is_usage_error() {
    let dir = tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    write_corpus(&corpus);
    let out = bin()
        .args(["chunk", "--method", "quantum", "--input"])
        .arg(&corpus)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_config_key_is_usage_error() {
    let dir = tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    write_corpus(&corpus);
    let out = bin()
        .args(["--set", "granulariy=2", "sentencize", "--input"])
        .arg(&corpus)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("granulariy"));
}

#[test]
fn index_runs_are_byte_identical() {
    let dir = tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    write_corpus(&corpus);
    for method in ["traditional", "semantic", "freechunk"] {
        let a = dir.path().join(format!("{method}-a.jsonl"));
        let b = dir.path().join(format!("{method}-b.jsonl"));
        for out_path in [&a, &b] {
            let out = bin()
                .args(["--set", "d=16", "--set", "seed=5", "index", "--method", method])
                .arg("--input")
                .arg(&corpus)
                .arg("--output")
                .arg(out_path)
                .output()
                .unwrap();
            assert_success(&out);
        }
        let bytes_a = fs::read(&a).unwrap();
        assert!(!bytes_a.is_empty());
        assert_eq!(bytes_a, fs::read(&b).unwrap(), "method {method}");
    }
}

#[test]
fn chunk_freechunk_pattern_spec() {
    let dir = tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    fs::write(
        &corpus,
        "{\"id\":\"a\",\"text\":\"One two. Three four. Five six. Seven eight. Nine ten.\"}\n",
    )
    .unwrap();
    let out = bin()
        .args(["chunk", "--method", "freechunk", "--patterns", "2", "--input"])
        .arg(&corpus)
        .output()
        .unwrap();
    assert_success(&out);
    let stdout = String::from_utf8(out.stdout).unwrap();
    // n=5 at g=2 -> {0,1}, {2,3}, {4}.
    assert_eq!(stdout.lines().count(), 3);
    let last: serde_json::Value = serde_json::from_str(stdout.lines().last().unwrap()).unwrap();
    assert_eq!(last["indices"], serde_json::json!([4]));

    // Explicit JSON index sets.
    let out = bin()
        .args([
            "chunk",
            "--method",
            "freechunk",
            "--patterns",
            "[[0,2],[1,3,4]]",
            "--input",
        ])
        .arg(&corpus)
        .output()
        .unwrap();
    assert_success(&out);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 2);

    // Out-of-range explicit set is a data error.
    let out = bin()
        .args([
            "chunk",
            "--method",
            "freechunk",
            "--patterns",
            "[[0,99]]",
            "--input",
        ])
        .arg(&corpus)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_encode_query_round_trip() {
    let dir = tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    write_corpus(&corpus);
    let weights = dir.path().join("weights.bin");
    let history = dir.path().join("history.csv");
    let out = bin()
        .args(["--set", "d=16", "--set", "epochs=3", "--set", "base_lr=0.003"])
        .args(["train", "--input"])
        .arg(&corpus)
        .arg("--output-weights")
        .arg(&weights)
        .arg("--history")
        .arg(&history)
        .output()
        .unwrap();
    assert_success(&out);
    assert!(weights.exists());
    let hist = fs::read_to_string(&history).unwrap();
    assert!(hist.starts_with("step,train_loss,val_loss\n"));
    assert!(hist.lines().count() > 1);

    let index_path = dir.path().join("index.jsonl");
    let out = bin()
        .args(["--set", "d=16", "encode", "--input"])
        .arg(&corpus)
        .arg("--weights")
        .arg(&weights)
        .arg("--output")
        .arg(&index_path)
        .output()
        .unwrap();
    assert_success(&out);

    let out = bin()
        .args(["--set", "d=16", "query", "--index"])
        .arg(&index_path)
        .args(["--text", "Dogs bark at night.", "-k", "3", "--corpus"])
        .arg(&corpus)
        .output()
        .unwrap();
    assert_success(&out);
    let stdout = String::from_utf8(out.stdout).unwrap();
    // 3 hits plus the assembled context line.
    assert_eq!(stdout.lines().count(), 4);
    let hit: serde_json::Value = serde_json::from_str(stdout.lines().next().unwrap()).unwrap();
    assert!(hit["score"].as_f64().unwrap() <= 1.0 + 1e-6);
    let ctx: serde_json::Value = serde_json::from_str(stdout.lines().last().unwrap()).unwrap();
    assert!(ctx["token_total"].as_u64().unwrap() > 0);
}

#[test]
fn eval_zero_queries_succeeds_with_empty_report() {
    let dir = tempdir().unwrap();
    let csv = dir.path().join("report.csv");
    let out = bin()
        .args(["--set", "d=16", "--set", "epochs=0"])
        .args(["eval", "--docs", "2", "--sentences-per-doc", "6", "--queries", "0"])
        .arg("--csv")
        .arg(&csv)
        .output()
        .unwrap();
    assert_success(&out);
    let csv_text = fs::read_to_string(&csv).unwrap();
    assert_eq!(csv_text.lines().count(), 1); // header only
}

#[test]
fn verify_theory_reports_zero_violations() {
    let dir = tempdir().unwrap();
    let csv = dir.path().join("bounds.csv");
    let out = bin()
        .args(["verify-theory", "--grid", "0,0.5,0.9", "--trials", "2000", "--seed", "1"])
        .arg("--csv")
        .arg(&csv)
        .output()
        .unwrap();
    assert_success(&out);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("total violations: 0"), "{stdout}");
    let csv_text = fs::read_to_string(&csv).unwrap();
    assert_eq!(csv_text.lines().count(), 10); // header + 3x3 grid
}

#[test]
fn bench_reports_all_methods() {
    let dir = tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    write_corpus(&corpus);
    let out = bin()
        .args(["--set", "d=16", "bench", "--input"])
        .arg(&corpus)
        .output()
        .unwrap();
    assert_success(&out);
    let stdout = String::from_utf8(out.stdout).unwrap();
    for method in ["traditional", "semantic", "freechunk"] {
        assert!(stdout.contains(method), "{stdout}");
    }
    assert!(stdout.contains("re-encoding"));
}

#[test]
fn config_precedence_env_and_flags() {
    let dir = tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    write_corpus(&corpus);
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, "token_limit = 4\n").unwrap();

    // File: limit 4 -> every ~4-token sentence is its own chunk.
    let from_file = bin()
        .args(["chunk", "--method", "traditional", "--input"])
        .arg(&corpus)
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert_success(&from_file);
    let file_lines = String::from_utf8_lossy(&from_file.stdout).lines().count();

    // Env overrides the file with a huge limit -> one chunk per document.
    let from_env = bin()
        .env("FREECHUNKER_TOKEN_LIMIT", "1000")
        .args(["chunk", "--method", "traditional", "--input"])
        .arg(&corpus)
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert_success(&from_env);
    let env_lines = String::from_utf8_lossy(&from_env.stdout).lines().count();
    assert_eq!(env_lines, 2);
    assert!(file_lines > env_lines);

    // Flag beats env.
    let from_flag = bin()
        .env("FREECHUNKER_TOKEN_LIMIT", "1000")
        .args(["--set", "token_limit=4", "chunk", "--method", "traditional", "--input"])
        .arg(&corpus)
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert_success(&from_flag);
    assert_eq!(
        String::from_utf8_lossy(&from_flag.stdout).lines().count(),
        file_lines
    );
}

#[test]
fn unreachable_remote_is_exit_code_3() {
    let dir = tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    write_corpus(&corpus);
    let out = bin()
        .args([
            "--set",
            "embedder=remote",
            "--set",
            "remote.base_url=http://127.0.0.1:1/v1",
            "index",
            "--method",
            "semantic",
            "--input",
        ])
        .arg(&corpus)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_input_file_is_data_error() {
    let out = bin()
        .args(["sentencize", "--input", "/nonexistent/corpus.jsonl"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_usage_is_exit_code_1() {
    let out = bin().args(["frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = bin().args(["--help"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}
