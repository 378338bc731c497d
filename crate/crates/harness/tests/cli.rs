use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic")
}

fn oncex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oncex")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn run_synthetic(out: &Path) -> Output {
    let f = fixtures();
    oncex(&[
        "run",
        "--config",
        s(&f.join("pipeline.json")),
        "--corpus",
        s(&f.join("corpus")),
        "--out",
        s(out),
        "--mock-fixtures",
        s(&f.join("mock_fixtures.json")),
    ])
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".json"))
        .collect();
    v.sort();
    v
}

#[test]
fn run_reproduces_goldens_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_synthetic(tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let goldens = fixtures().join("goldens");
    for sub in ["", "audit"] {
        let (want, got) = (goldens.join(sub), tmp.path().join(sub));
        assert_eq!(files(&want), files(&got));
        for name in files(&want) {
            assert_eq!(
                fs::read_to_string(want.join(&name)).unwrap(),
                fs::read_to_string(got.join(&name)).unwrap(),
                "{sub}/{name}"
            );
        }
    }
}

#[test]
fn empty_corpus_is_not_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    fs::create_dir(&corpus).unwrap();
    let f = fixtures();
    let out = oncex(&[
        "run",
        "--config",
        s(&f.join("pipeline.json")),
        "--corpus",
        s(&corpus),
        "--out",
        s(&tmp.path().join("out")),
        "--mock-fixtures",
        s(&f.join("mock_fixtures.json")),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bad_config_and_missing_input_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, "{\"pipeline_name\": 3}").unwrap();
    let f = fixtures();
    let out = oncex(&["run", "--config", s(&cfg), "--corpus", s(&f.join("corpus")), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));

    let out = oncex(&[
        "eval",
        "--pred",
        s(&tmp.path().join("nope")),
        "--gt",
        s(&f.join("ground_truth")),
        "--report",
        s(&tmp.path().join("r.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = fixtures().join("ground_truth");
    let report = tmp.path().join("report.json");
    let out = oncex(&["eval", "--pred", s(&gt), "--gt", s(&gt), "--report", s(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["metrics"]["macro_scores"]["f1"], 1.0);
    for e in r["metrics"]["entities"].as_array().unwrap() {
        assert_eq!(e["scores"]["f1"], 1.0, "{}", e["entity"]);
    }
    assert!(tmp.path().join("report.txt").exists());
}

#[test]
fn tolerance_sweep_on_goldens_is_monotone() {
    let tmp = tempfile::tempdir().unwrap();
    let f = fixtures();
    let mut last: Option<Vec<f64>> = None;
    for tol in ["0", "7", "14"] {
        let report = tmp.path().join(format!("r{tol}.json"));
        let out = oncex(&[
            "eval",
            "--pred",
            s(&f.join("goldens")),
            "--gt",
            s(&f.join("ground_truth")),
            "--report",
            s(&report),
            "--date-tolerance",
            tol,
        ]);
        assert!(out.status.success());
        let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
        let f1: Vec<f64> = r["metrics"]["entities"]
            .as_array()
            .unwrap()
            .iter()
            .flat_map(|e| {
                std::iter::once(e["scores"]["f1"].as_f64().unwrap())
                    .chain(e["attributes"].as_array().unwrap().iter().map(|a| a["scores"]["f1"].as_f64().unwrap()))
            })
            .collect();
        if let Some(prev) = &last {
            assert!(prev.iter().zip(&f1).all(|(a, b)| b + 1e-12 >= *a), "tolerance {tol}");
        }
        last = Some(f1);
    }
}
