use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ebmh::NgramModel;
use ebmh_cli::{cmd_eval, RunManifest};
use serde_json::{json, Value};

const CORPUS: &str = "the cat sat on the mat\na dog ran fast\nthe dog sat\na cat ran slowly on the mat\nthe mat\n";

fn ebmh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ebmh")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = ebmh(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_owned();
        std::fs::write(root.join("corpus.txt"), CORPUS).unwrap();
        Fixture { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    fn lm(&self) -> PathBuf {
        let out = self.path("lm.json");
        ok(&["train-lm", "--corpus", s(&self.path("corpus.txt")), "--order", "2", "--out", s(&out)]);
        out
    }

    fn run_config(&self, extra: Value) -> PathBuf {
        self.lm();
        let mut cfg = json!({
            "steps": 20,
            "batch_size": 3,
            "seed": 5,
            "proposal": { "kind": "span-block", "lm": "lm.json" },
            "energy": { "terms": [{ "name": "nll", "weight": 1.0, "kind": "ngram-nll", "params": { "model": "lm.json" } }] },
            "init_text": "the cat sat on the mat",
        });
        for (k, v) in extra.as_object().unwrap() {
            cfg[k] = v.clone();
        }
        self.write("run.json", &cfg.to_string())
    }
}

#[test]
fn train_lm_round_trips_and_is_reproducible() {
    let f = Fixture::new();
    let out = f.lm();
    let first = std::fs::read(&out).unwrap();
    assert!(f.path("lm.vocab.json").exists());
    let manifest: RunManifest = serde_json::from_slice(&std::fs::read(f.path("lm.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.command, "train-lm");
    assert!(manifest.artifacts.iter().any(|a| a.ends_with("lm.vocab.json")));

    let model = NgramModel::load(&out).unwrap();
    let resaved = f.path("again.json");
    model.save(&resaved, "lm.vocab.json").unwrap();
    assert_eq!(std::fs::read(&resaved).unwrap(), first);

    f.lm();
    assert_eq!(std::fs::read(&out).unwrap(), first);
}

#[test]
fn train_lm_with_missing_corpus_fails() {
    let f = Fixture::new();
    let out = ebmh(&["train-lm", "--corpus", s(&f.path("nope.txt")), "--out", s(&f.path("lm.json"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.txt"));
}

#[test]
fn identity_proposal_returns_its_input() {
    let f = Fixture::new();
    let cfg = f.run_config(json!({ "proposal": { "kind": "identity" } }));
    let best = ok(&["sample", s(&cfg), "--out-dir", s(&f.path("out"))]);
    assert_eq!(best.trim(), "the cat sat on the mat");
    let summary: Value = serde_json::from_slice(&std::fs::read(f.path("out/summary.json")).unwrap()).unwrap();
    for chain in summary["per_chain"].as_array().unwrap() {
        assert_eq!(chain["accepts"], 20);
    }
}

#[test]
fn sample_writes_manifest_last_and_lists_artifacts() {
    let f = Fixture::new();
    let cfg = f.run_config(json!({}));
    ok(&["sample", s(&cfg), "--out-dir", s(&f.path("out"))]);
    let m: RunManifest = serde_json::from_slice(&std::fs::read(f.path("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(m.seed, Some(5));
    let names: Vec<_> = m.artifacts.iter().map(|a| Path::new(a).file_name().unwrap().to_str().unwrap().to_owned()).collect();
    assert_eq!(names, ["trace.ndjson", "summary.json", "manifest.json"]);
    let trace = std::fs::read_to_string(f.path("out/trace.ndjson")).unwrap();
    assert_eq!(trace.lines().count(), 60);
}

#[test]
fn overrides_change_the_run() {
    let f = Fixture::new();
    let cfg = f.run_config(json!({}));
    ok(&["sample", s(&cfg), "--out-dir", s(&f.path("a")), "--steps", "4", "--batch-size", "2"]);
    let trace = std::fs::read_to_string(f.path("a/trace.ndjson")).unwrap();
    assert_eq!(trace.lines().count(), 8);
    ok(&["sample", s(&cfg), "--out-dir", s(&f.path("b")), "--seed", "6"]);
    ok(&["sample", s(&cfg), "--out-dir", s(&f.path("c"))]);
    assert_ne!(std::fs::read(f.path("b/trace.ndjson")).unwrap(), std::fs::read(f.path("c/trace.ndjson")).unwrap());
}

#[test]
fn config_errors_exit_with_two() {
    let f = Fixture::new();
    let cfg = f.run_config(json!({}));
    let out = ebmh(&["sample", s(&cfg), "--mode", "sideways"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mode"));

    let bad = f.write("bad.json", &json!({ "steps": 0, "proposal": { "kind": "identity" }, "energy": {}, "init_text": "a" }).to_string());
    let out = ebmh(&["sample", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));

    let typo = f.run_config(json!({ "stepz": 3 }));
    let out = ebmh(&["sample", s(&typo)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(ebmh(&["resample"]).status.code(), Some(2));
}

fn eval_fixture(f: &Fixture) -> PathBuf {
    f.lm();
    f.write("formal.txt", "good evening sir\nthat is quite remarkable\n");
    f.write("casual.txt", "hey dude\nlol that is cool\n");
    ok(&[
        "train-clf",
        "--class-a",
        s(&f.path("casual.txt")),
        "--class-b",
        s(&f.path("formal.txt")),
        "--out",
        s(&f.path("clf.json")),
    ]);
    f.write(
        "judges.json",
        &json!({
            "classifier": "clf.json",
            "target_label": "formal",
            "fluency": { "lm": "lm.json", "calibration_corpus": "corpus.txt" },
        })
        .to_string(),
    )
}

#[test]
fn eval_reports_metrics_and_bootstrap() {
    let f = Fixture::new();
    let judges = eval_fixture(&f);
    let tsv = f.write(
        "sys.tsv",
        "source\toutput\ttarget\nhey dude\tgood evening sir\tgood evening sir\nlol that is cool\tthat is quite remarkable\tthat is remarkable\n",
    );
    let out = f.path("metrics.json");
    let report = cmd_eval(&tsv, &judges, Some(&tsv), 1000, 0.05, 0, Some(&out)).unwrap();
    assert_eq!(report.system.n, 2);
    assert!((0.0..=1.0).contains(&report.system.j));
    assert_eq!(report.baseline, Some(report.system));
    assert!(!report.bootstrap.unwrap().significant);
    assert!(f.path("metrics.json.manifest.json").exists());

    let stdout = ok(&["eval", "--tsv", s(&tsv), "--judges", s(&judges), "--resamples", "1000"]);
    let v: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(v["system"]["n"], 2);
    assert!(v["bootstrap"].is_null());
}

#[test]
fn eval_rejects_empty_and_too_few_resamples() {
    let f = Fixture::new();
    let judges = eval_fixture(&f);
    let empty = f.write("empty.tsv", "");
    let out = ebmh(&["eval", "--tsv", s(&empty), "--judges", s(&judges)]);
    assert_eq!(out.status.code(), Some(1));
    let tsv = f.write("sys.tsv", "hey dude\tgood evening sir\tgood evening sir\n");
    let out = ebmh(&["eval", "--tsv", s(&tsv), "--judges", s(&judges), "--baseline", s(&tsv), "--resamples", "10"]);
    assert!(!out.status.success());
}

#[test]
fn intrinsic_writes_report_and_histogram() {
    let f = Fixture::new();
    f.lm();
    let cfg = f.write(
        "intrinsic.json",
        &json!({
            "lm": "lm.json",
            "exact_n": 40,
            "init_text": "the cat sat on the mat",
            "samplers": [
                { "name": "block", "kind": "span-block", "steps": 4, "chains": 5 },
                { "name": "token", "kind": "token-mask", "steps": 24, "chains": 5 },
            ],
        })
        .to_string(),
    );
    let table = ok(&["intrinsic", s(&cfg), "--out-dir", s(&f.path("out"))]);
    assert!(table.lines().any(|l| l.starts_with("block")));
    let report: Value = serde_json::from_slice(&std::fs::read(f.path("out/report.json")).unwrap()).unwrap();
    assert_eq!(report["exact"]["n"], 40);
    assert_eq!(report["samplers"][0]["forward_passes"], 20);
    assert_eq!(report["samplers"][1]["forward_passes"], 120);
    let csv = std::fs::read_to_string(f.path("out/histogram.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 40 + 10);
}

#[test]
fn intrinsic_with_missing_model_is_a_config_error() {
    let f = Fixture::new();
    let cfg = f.write(
        "intrinsic.json",
        &json!({ "lm": "missing.json", "init_text": "a", "samplers": [] }).to_string(),
    );
    let out = ebmh(&["intrinsic", s(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));
}

#[test]
fn conformance_against_an_unreachable_endpoint_fails() {
    let out = ebmh(&["conformance", "--endpoint", "http://127.0.0.1:9/v1/adapter", "--timeout-ms", "500"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn conformance_passes_against_the_mock_server() {
    let server = ebmh::adapter::mock::MockServer::start(ebmh::adapter::mock::MockAdapter::echo()).unwrap();
    let stdout = ok(&["conformance", "--endpoint", &server.endpoint()]);
    assert!(!stdout.contains("FAIL"), "{stdout}");
}

#[test]
fn adapter_configs_run_against_the_mock_server() {
    let server = ebmh::adapter::mock::MockServer::start(ebmh::adapter::mock::MockAdapter::echo()).unwrap();
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/adapter");
    let out = tempfile::tempdir().unwrap();
    for name in ["shakespeare.json", "gyafc.json"] {
        let run = Command::new(env!("CARGO_BIN_EXE_ebmh"))
            .args(["sample", s(&configs.join(name)), "--init-text", "how are you", "--batch-size", "2"])
            .args(["--out-dir", s(&out.path().join(name))])
            .env("EBMH_ADAPTER_URL", server.endpoint())
            .output()
            .unwrap();
        assert!(run.status.success(), "{name}: {}", String::from_utf8_lossy(&run.stderr));
        assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "how are you");
    }
}
