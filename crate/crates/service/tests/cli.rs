use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clbd_service::config::CONFIG_ENV;
use clbd_service::manifest::{read_manifest, validate_chain};

const PIPELINE: &str = r#"
seed = 17
workdir = "run"

[data]
synthetic_papers = 30

[[models]]
name = "s2s"
backend = "ngram-seq2seq"

[[models]]
name = "dual"
backend = "hashed-biencoder"

[[models]]
name = "stub"
backend = "stub-biencoder"

[[train.runs]]
model = "s2s"
task = "node"
neighbor_source = "semantic"
overrides = { max_epochs = 2 }

[[train.runs]]
model = "dual"
task = "node"
neighbor_source = "semantic"
overrides = { max_epochs = 2 }

[[predict.runs]]
model = "dual"
task = "node"
neighbor_source = "semantic"

[[predict.runs]]
model = "stub"
task = "node"
neighbor_source = "kg"
rerank_with = "s2s"

[[predict.runs]]
model = "s2s"
task = "sentence"
neighbor_source = "semantic"
"#;

const COMMANDS: [&str; 7] = ["build-data", "build-kg", "build-index", "train", "predict", "evaluate", "analyze"];

fn clbd(args: &[&str]) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_clbd"));
    c.args(args).env_remove(CONFIG_ENV).env_remove("RUST_LOG");
    c
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup(dir: &Path) -> PathBuf {
    let cfg = dir.join("clbd.toml");
    std::fs::write(&cfg, PIPELINE).unwrap();
    cfg
}

fn run_all(cfg: &Path) {
    for cmd in COMMANDS {
        ok(clbd(&[cmd, "--config", cfg.to_str().unwrap()]).output().unwrap());
    }
}

#[test]
fn missing_config_is_a_usage_error_naming_the_flag() {
    for cmd in COMMANDS.iter().chain(&["serve", "validate"]) {
        let out = clbd(&[cmd]).output().unwrap();
        assert_eq!(out.status.code(), Some(2), "{cmd}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("--config"), "{cmd}: {err}");
    }
    let out = clbd(&["frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = clbd(&["train", "--config", "x.toml", "--epochs", "3"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unreadable_config_fails_with_status_one() {
    let out = clbd(&["build-data", "--config", "/nonexistent/clbd.toml"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/clbd.toml"));
}

#[test]
fn env_var_supplies_the_config() {
    let t = tempfile::tempdir().unwrap();
    let cfg = setup(t.path());
    ok(clbd(&["build-data"]).env(CONFIG_ENV, &cfg).output().unwrap());
    assert!(t.path().join("run/manifests/build-data.json").exists());
}

#[test]
fn full_toy_run_builds_a_valid_deterministic_chain() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ca, cb) = (setup(a.path()), setup(b.path()));
    run_all(&ca);
    run_all(&cb);

    let wa = a.path().join("run");
    let report = validate_chain(&wa).unwrap();
    assert_eq!(report.manifests.len(), COMMANDS.len());
    let out = ok(clbd(&["validate", "--config", ca.to_str().unwrap()]).output().unwrap());
    assert!(String::from_utf8_lossy(&out.stdout).contains("manifest chain ok"));

    // Same seed, same bytes: every output hash matches across the two runs.
    for cmd in COMMANDS {
        let ma = read_manifest(&wa, cmd).unwrap();
        let mb = read_manifest(&b.path().join("run"), cmd).unwrap();
        assert_eq!(ma.outputs, mb.outputs, "{cmd}");
        assert_eq!(ma.config_digest, mb.config_digest);
        assert!(ma.seeds.contains_key("seed"));
        assert!(ma.versions.contains_key("clbd-core"));
    }
    for f in ["reports/summary.json", "reports/node/comparison.tsv", "reports/sentence/rows.tsv", "analysis/summary.json"] {
        assert!(wa.join(f).exists(), "{f}");
    }
    let evaluate = read_manifest(&wa, "evaluate").unwrap();
    assert!(evaluate.parents.iter().any(|p| p.command == "predict"));

    // Tampering with an artifact breaks validation.
    let preds = wa.join("predictions/node/stub_s2s+kg.jsonl");
    assert!(preds.exists());
    let mut text = std::fs::read_to_string(&preds).unwrap();
    text.push('\n');
    std::fs::write(&preds, text).unwrap();
    let out = clbd(&["validate", "--config", ca.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("modified"));

    // A deterministic rerun reproduces its manifest byte for byte.
    ok(clbd(&["build-kg", "--config", cb.to_str().unwrap()]).output().unwrap());
    validate_chain(&b.path().join("run")).unwrap();

    // Rerunning under a changed config leaves a chain that no longer validates.
    std::fs::write(&cb, PIPELINE.replace("synthetic_papers = 30", "synthetic_papers = 31")).unwrap();
    ok(clbd(&["build-data", "--config", cb.to_str().unwrap()]).output().unwrap());
    let err = validate_chain(&b.path().join("run")).unwrap_err().to_string();
    assert!(err.contains("config digest") || err.contains("rerun"), "{err}");
    let out = clbd(&["build-kg", "--config", cb.to_str().unwrap()]).output().unwrap();
    assert!(out.status.success(), "downstream stages rerun cleanly on the new data");
}

#[test]
fn evaluate_scores_an_explicit_predictions_file() {
    let t = tempfile::tempdir().unwrap();
    let cfg = setup(t.path());
    for cmd in ["build-data", "build-kg", "build-index"] {
        ok(clbd(&[cmd, "--config", cfg.to_str().unwrap()]).output().unwrap());
    }
    // Hand-written predictions: the gold node first for every test instance.
    let dataset: serde_json::Value =
        serde_json::from_slice(&std::fs::read(t.path().join("run/data/dataset.json")).unwrap()).unwrap();
    let ids = std::fs::read_to_string(t.path().join("run/data/splits/node/test.txt")).unwrap();
    let test: Vec<&str> = ids.lines().filter(|l| !l.is_empty()).collect();
    assert!(!test.is_empty());
    let gold = |id: &str| -> String {
        let all = dataset["node"]["test"].as_array().expect("dataset layout");
        let inst = all.iter().find(|i| i["instance_id"] == id).unwrap();
        inst["target_node"].as_str().unwrap().to_string()
    };
    let mut lines = String::new();
    for id in &test {
        let rec = serde_json::json!({
            "instance_id": id,
            "model_id": "oracle",
            "config_digest": "external",
            "outputs": [{ "text": gold(id), "score": 1.0 }],
        });
        lines.push_str(&rec.to_string());
        lines.push('\n');
    }
    let preds = t.path().join("oracle.jsonl");
    std::fs::write(&preds, lines).unwrap();

    let out = clbd(&["evaluate", "--config", cfg.to_str().unwrap(), "--predictions", preds.to_str().unwrap(), "--task", "node"])
        .output()
        .unwrap();
    ok(out);
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(t.path().join("run/reports/summary.json")).unwrap()).unwrap();
    let mrr = &summary["node"]["by_group"]["oracle/all"]["mrr"]["mean"];
    assert_eq!(mrr.as_f64(), Some(1.0), "{summary}");
    let m = read_manifest(&t.path().join("run"), "evaluate").unwrap();
    assert!(m.inputs.iter().any(|i| i.path.ends_with("oracle.jsonl")));
    validate_chain(&t.path().join("run")).unwrap();
}
