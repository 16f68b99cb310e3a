use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn mlkv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlkv"))
        .args(args)
        .env_remove("MLKV_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mlkv(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(
            ws.path("tiny.json"),
            r#"{"vocab":258,"d":16,"l":4,"h":2,"d_k":8,"m":4,"g":2,"max_seq":16,"d_ff":32}"#,
        )
        .unwrap();
        let lines: Vec<String> = (0..200)
            .map(|i| format!("sample {} text {} with words", i % 7, i * 13 % 31))
            .collect();
        std::fs::write(ws.path("corpus.txt"), lines.join("\n")).unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    fn train_base(&self, out: &str, csv: &str, seed: &str) {
        ok(&[
            "train",
            "--config",
            &self.arg("tiny.json"),
            "--corpus",
            &self.arg("corpus.txt"),
            "--ckpt-out",
            &self.arg(out),
            "--out",
            &self.arg(csv),
            "--seed",
            seed,
            "--steps",
            "6",
            "--batch",
            "4",
        ]);
    }
}

fn check_loss_csv(path: &Path, steps: usize) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,lr,loss"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), steps);
    for (i, row) in rows.iter().enumerate() {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), 3);
        assert_eq!(cols[0].parse::<usize>().unwrap(), i);
        assert!(cols[1].parse::<f64>().unwrap() >= 0.0);
        assert!(cols[2].parse::<f64>().unwrap().is_finite());
    }
}

#[test]
fn convert_to_same_scheme_is_bit_identical() {
    let ws = Workspace::new();
    ws.train_base("base.ckpt", "base.csv", "1");
    ok(&[
        "convert",
        "--ckpt-in",
        &ws.arg("base.ckpt"),
        "--ckpt-out",
        &ws.arg("same.ckpt"),
        "--m",
        "4",
        "--g",
        "2",
    ]);
    assert_eq!(
        std::fs::read(ws.path("base.ckpt")).unwrap(),
        std::fs::read(ws.path("same.ckpt")).unwrap()
    );
}

#[test]
fn training_is_deterministic_per_seed() {
    let ws = Workspace::new();
    ws.train_base("a.ckpt", "a.csv", "7");
    ws.train_base("b.ckpt", "b.csv", "7");
    ws.train_base("c.ckpt", "c.csv", "8");
    let read = |n: &str| std::fs::read(ws.path(n)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_eq!(read("a.ckpt"), read("b.ckpt"));
    assert_ne!(read("a.csv"), read("c.csv"));
    check_loss_csv(&ws.path("a.csv"), 6);
}

#[test]
fn full_pipeline_emits_artifacts() {
    let ws = Workspace::new();
    ws.train_base("base.ckpt", "base.csv", "3");
    let input = std::fs::read(ws.path("base.ckpt")).unwrap();
    let msg = ok(&[
        "convert",
        "--ckpt-in",
        &ws.arg("base.ckpt"),
        "--ckpt-out",
        &ws.arg("mlkv.ckpt"),
        "--m",
        "2",
        "--g",
        "1",
    ]);
    assert!(msg.contains("converted"), "{msg}");
    assert_eq!(std::fs::read(ws.path("base.ckpt")).unwrap(), input);
    ok(&[
        "train",
        "--ckpt-in",
        &ws.arg("mlkv.ckpt"),
        "--corpus",
        &ws.arg("corpus.txt"),
        "--ckpt-out",
        &ws.arg("up.ckpt"),
        "--out",
        &ws.arg("up.csv"),
        "--steps",
        "5",
        "--batch",
        "2",
        "--fraction",
        "0.5",
        "--seed",
        "3",
    ]);
    check_loss_csv(&ws.path("up.csv"), 5);
    let loss: f64 = ok(&[
        "eval",
        "--ckpt-in",
        &ws.arg("up.ckpt"),
        "--corpus",
        &ws.arg("corpus.txt"),
    ])
    .trim()
    .parse()
    .unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    let header = &std::fs::read(ws.path("up.ckpt")).unwrap()[..8];
    assert_eq!(header, b"MLKVCKPT");

    let text = ok(&[
        "generate",
        "--ckpt-in",
        &ws.arg("up.ckpt"),
        "--prompt",
        "sam",
        "--tokens",
        "5",
    ]);
    assert!(text.starts_with("sam"));
}

#[test]
fn jsonl_corpus_is_accepted() {
    let ws = Workspace::new();
    let lines: Vec<String> = (0..100)
        .map(|i| format!("{{\"text\": \"doc number {i} here\"}}"))
        .collect();
    std::fs::write(ws.path("c.jsonl"), lines.join("\n")).unwrap();
    ws.train_base("base.ckpt", "base.csv", "1");
    let loss = ok(&[
        "eval",
        "--ckpt-in",
        &ws.arg("base.ckpt"),
        "--corpus",
        &ws.arg("c.jsonl"),
        "--jsonl",
    ]);
    assert!(loss.trim().parse::<f64>().is_ok());
}

#[test]
fn bench_writes_csv_and_dat() {
    let ws = Workspace::new();
    let msg = ok(&[
        "bench",
        "--config",
        &ws.arg("tiny.json"),
        "--batches",
        "1,2,4,1000000",
        "--budget-bytes",
        "2000000",
        "--out",
        &ws.arg("bench.csv"),
        "--dat",
        &ws.arg("bench.dat"),
        "--tokens",
        "4",
    ]);
    assert!(msg.contains("max fitting batch 4"), "{msg}");
    let csv = std::fs::read_to_string(ws.path("bench.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("config,batch,weights_bytes,cache_bytes,total_bytes,tokens_per_sec,fits_budget")
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0][5].parse::<f64>().unwrap() > 0.0);
    assert_eq!(rows[3][5], "");
    assert_eq!(rows[3][6], "false");
    assert!(std::fs::read_to_string(ws.path("bench.dat"))
        .unwrap()
        .starts_with("# tiny-m4g2"));

    ok(&[
        "bench",
        "--config",
        &ws.arg("tiny.json"),
        "--m",
        "1",
        "--g",
        "1",
        "--batches",
        "8",
        "--budget-bytes",
        "100000000",
        "--out",
        &ws.arg("mem.csv"),
        "--memory-only",
    ]);
    let mem = std::fs::read_to_string(ws.path("mem.csv")).unwrap();
    assert!(mem.contains("tiny-m1g1,8,"));
}

fn error_line(out: &Output) -> String {
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    err
}

#[test]
fn failures_use_exit_codes() {
    let ws = Workspace::new();
    let missing = mlkv(&[
        "eval",
        "--ckpt-in",
        &ws.arg("nope.ckpt"),
        "--corpus",
        &ws.arg("corpus.txt"),
    ]);
    assert_eq!(missing.status.code(), Some(5));
    assert!(error_line(&missing).starts_with("error code=5 kind=io"));

    ws.train_base("base.ckpt", "base.csv", "1");
    let bad = mlkv(&[
        "convert",
        "--ckpt-in",
        &ws.arg("base.ckpt"),
        "--ckpt-out",
        &ws.arg("x.ckpt"),
        "--m",
        "3",
        "--g",
        "1",
    ]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(error_line(&bad).contains("`m`"));

    let unknown = mlkv(&["eval", "--bogus"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(error_line(&unknown).starts_with("error code=2 kind=usage"));

    let long = mlkv(&[
        "generate",
        "--ckpt-in",
        &ws.arg("base.ckpt"),
        "--tokens",
        "40",
    ]);
    assert_eq!(long.status.code(), Some(3));
    error_line(&long);

    let overwrite = mlkv(&[
        "convert",
        "--ckpt-in",
        &ws.arg("base.ckpt"),
        "--ckpt-out",
        &ws.arg("base.ckpt"),
        "--m",
        "4",
        "--g",
        "1",
    ]);
    assert_eq!(overwrite.status.code(), Some(2));

    let threads = Command::new(env!("CARGO_BIN_EXE_mlkv"))
        .args([
            "eval",
            "--ckpt-in",
            &ws.arg("base.ckpt"),
            "--corpus",
            &ws.arg("corpus.txt"),
        ])
        .env("MLKV_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(2));
}
