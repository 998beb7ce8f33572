use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use d2q_core::io::save_model;
use d2q_core::{init_random, Matrix, ModelConfig};
use serde_json::Value;
use tempfile::TempDir;

fn fixture(name: &str) -> String {
    format!("{}/../../fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn d2q(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_d2q")).args(args).env("D2Q_THREADS", "1").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

struct Work {
    dir: TempDir,
}

impl Work {
    fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_str().unwrap().to_owned()
    }

    fn model(&self) -> String {
        let p = self.path("m.d2q");
        if !Path::new(&p).exists() {
            let o = d2q(&["init", "--seed", "1", "--out", &p]);
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        }
        p
    }
}

#[test]
fn init_quantize_eval_inspect_smoke() {
    let w = Work::new();
    let m = w.model();
    let q = w.path("q.d2q");
    let o = d2q(&["quantize", &m, &fixture("calibration.txt"), "--out", &q, "--calib-samples", "8", "--group", "32"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_slice(&std::fs::read(w.path("q.report.json")).unwrap()).unwrap();
    assert_eq!(report["kind"], "quantize");

    let o = d2q(&["eval", &q, &fixture("heldout.txt"), "--reference", &m, "--json", "-"]);
    assert!(o.status.success());
    let result: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(result["perplexity"].as_f64().unwrap() > 1.0);
    assert!(result["kl_to_reference"].as_f64().unwrap() >= 0.0);

    let o = d2q(&["inspect", &q]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("16/(2 + 32/32) = 5.3333"), "{text}");
    assert!(text.contains("ratio      5.3333"), "{text}");
    assert!(text.contains("folded in 4 blocks"), "{text}");
}

#[test]
fn unsupported_bits_is_usage_error_and_writes_nothing() {
    let w = Work::new();
    let m = w.model();
    let q = w.path("q.d2q");
    let o = d2q(&["quantize", &m, &fixture("calibration.txt"), "--out", &q, "--bits", "5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!Path::new(&q).exists());
    assert!(!Path::new(&w.path("q.report.json")).exists());
}

#[test]
fn exit_codes_follow_error_class() {
    let w = Work::new();
    let m = w.model();
    let calib = fixture("calibration.txt");

    let bad = w.path("bad.d2q");
    std::fs::write(&bad, b"not a model").unwrap();
    assert_eq!(d2q(&["quantize", &bad, &calib, "--out", &w.path("a.d2q")]).status.code(), Some(3));

    let short = w.path("short.txt");
    std::fs::write(&short, b"too short").unwrap();
    assert_eq!(d2q(&["quantize", &m, &short, "--out", &w.path("b.d2q")]).status.code(), Some(4));

    let o = d2q(&["quantize", &m, &calib, "--out", &w.path("c.d2q"), "--group", "48"]);
    assert_eq!(o.status.code(), Some(2));

    let o = d2q(&["quantize", &m, &calib, "--out", &m]);
    assert_eq!(o.status.code(), Some(2));

    let unwritable: PathBuf = w.dir.path().join("missing").join("dir").join("q.d2q");
    let o = d2q(&["quantize", &m, &calib, "--out", unwritable.to_str().unwrap(), "--calib-samples", "4"]);
    assert_eq!(o.status.code(), Some(5));

    let o = Command::new(env!("CARGO_BIN_EXE_d2q"))
        .args(["inspect", &m])
        .env("D2Q_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_head_gives_uniform_perplexity() {
    let w = Work::new();
    let mut bundle = init_random(&ModelConfig::toy(), 2).unwrap();
    bundle.head = Matrix::zeros(bundle.head.rows(), bundle.head.cols());
    let p = w.path("zero.d2q");
    save_model(&bundle, Path::new(&p)).unwrap();
    let o = d2q(&["eval", &p, &fixture("heldout.txt"), "--json", "-"]);
    assert!(o.status.success());
    let result: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((result["perplexity"].as_f64().unwrap() - 256.0).abs() < 1e-6);
}

#[test]
fn ablate_grid_size_and_determinism() {
    let w = Work::new();
    let m = w.model();
    let args = |out: &str| {
        vec![
            "ablate".to_owned(),
            m.clone(),
            fixture("calibration.txt"),
            "--out".into(),
            out.to_owned(),
            "--group".into(),
            "32".into(),
            "--calib-samples".into(),
            "8".into(),
            "--iters-grid".into(),
            "0,3".into(),
            "--calib-grid".into(),
            "4,8".into(),
            "--holdout-sequences".into(),
            "4".into(),
        ]
    };
    let run = |out: &str| {
        let a = args(out);
        let o = d2q(&a.iter().map(String::as_str).collect::<Vec<_>>());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out).unwrap()
    };
    let first = run(&w.path("a.json"));
    let second = run(&w.path("b.json"));
    assert_eq!(first, second);
    let report: Value = serde_json::from_slice(&first).unwrap();
    let rows = report["rows"].as_array().unwrap();
    // 4 component cells, 1 static smoothing cell, 2 iteration cells, 2 calibration sizes.
    assert_eq!(rows.len(), 9);
    let labels: Vec<&str> = rows.iter().map(|r| r["label"].as_str().unwrap()).collect();
    assert!(labels.contains(&"baseline"), "{labels:?}");
}
