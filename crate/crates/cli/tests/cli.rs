use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedcrf::config::ExperimentConfig;
use fedcrf::datamodel::read_embeddings;
use fedcrf::pipeline::untrained_checkpoint;
use serde_json::Value;

fn fedcrf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedcrf")).args(args).output().expect("spawn fedcrf")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SPEC: &str = r#"{"num_users": 80, "num_items": 60, "min_interactions": 10, "max_interactions": 14}"#;

/// Synthetic data plus a quick config next to it.
fn fixture(dir: &Path) -> PathBuf {
    let spec = dir.join("spec.json");
    std::fs::write(&spec, SPEC).unwrap();
    let data = dir.join("data");
    ok(&fedcrf(&["synth", "--config", s(&spec), "--seed", "4", "--out", s(&data)]));
    let path = data.join("config.json");
    let mut cfg: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    for (k, v) in [("rounds", 2), ("stage2_epochs", 2), ("clusters", 4), ("dim", 8), ("hidden", 16), ("batch_size", 128)] {
        cfg[k] = v.into();
    }
    let quick = data.join("quick.json");
    std::fs::write(&quick, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    quick
}

#[test]
fn missing_config_exits_with_config_code() {
    let out = fedcrf(&["run", "--config", "/nonexistent/config.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"seed": 1, "learning_rate": 0.1}"#).unwrap();
    assert_eq!(fedcrf(&["run", "--config", s(&cfg)]).status.code(), Some(2));
}

#[test]
fn malformed_interactions_exit_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let quick = fixture(dir.path());
    let tsv = quick.parent().unwrap().join("synth_a.tsv");
    std::fs::write(&tsv, "user\titem\n1\n").unwrap();
    let out = fedcrf(&["run", "--config", s(&quick), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, SPEC).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&fedcrf(&["synth", "--config", s(&spec), "--seed", "9", "--out", s(out)]));
    }
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 7);
    for n in names {
        assert_eq!(std::fs::read(a.join(&n)).unwrap(), std::fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
    let emb = read_embeddings(a.join("synth_a.emb1")).unwrap();
    assert_eq!((emb.rows(), emb.cols()), (60, 1024));
}

#[test]
fn run_eval_attack_dump() {
    let dir = tempfile::tempdir().unwrap();
    let quick = fixture(dir.path());
    let (o1, o2) = (dir.path().join("o1"), dir.path().join("o2"));
    ok(&fedcrf(&["run", "--config", s(&quick), "--out", s(&o1)]));
    ok(&fedcrf(&["run", "--config", s(&quick), "--out", s(&o2), "--single-thread"]));
    for f in ["report.json", "report.tsv", "log.jsonl", "model.ckpt", "tpre/synth_a.emb1", "rounds/round_02.ckpt"] {
        assert!(o1.join(f).exists(), "{f} missing");
    }
    assert_eq!(std::fs::read(o1.join("report.json")).unwrap(), std::fs::read(o2.join("report.json")).unwrap());

    let report: Value = serde_json::from_str(&std::fs::read_to_string(o1.join("report.json")).unwrap()).unwrap();
    let eval = ok(&fedcrf(&["eval", "--config", s(&quick), "--checkpoint", s(&o1.join("model.ckpt"))]));
    let eval: Value = serde_json::from_str(&eval).unwrap();
    for d in report["domains"].as_array().unwrap() {
        let name = d["domain"].as_str().unwrap();
        let a = d["test"]["recall@20"].as_f64().unwrap();
        let b = eval[name]["metrics"]["recall@20"].as_f64().unwrap();
        assert!((a - b).abs() < 1e-6, "{name}: report {a} vs eval {b}");
    }

    let attack = ok(&fedcrf(&["attack", "--config", s(&quick), "--checkpoint", s(&o1.join("model.ckpt"))]));
    let rows: Vec<&str> = attack.lines().skip(1).collect();
    for domain in ["synth_a", "synth_b"] {
        let ks: Vec<&str> = rows
            .iter()
            .filter(|r| r.starts_with(&format!("{domain}\t")))
            .map(|r| r.split('\t').nth(1).unwrap())
            .collect();
        assert_eq!(ks, ["1", "3", "5"]);
    }

    let dump = dir.path().join("dump");
    ok(&fedcrf(&["dump", "--round", s(&o1.join("rounds/round_02.ckpt")), "--out", s(&dump)]));
    let centers = read_embeddings(dump.join("centers.emb1")).unwrap();
    assert_eq!((centers.rows(), centers.cols()), (4, 8));
    let assign = std::fs::read_to_string(dump.join("synth_a.assignments.tsv")).unwrap();
    let items = report["domains"][0]["num_items"].as_u64().unwrap() as usize;
    assert_eq!(assign.lines().count(), items);
    assert!(assign.lines().all(|l| l.split('\t').nth(1).unwrap().parse::<usize>().unwrap() < 4));
}

#[test]
fn untrained_checkpoint_ranks_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let quick = fixture(dir.path());
    let mut cfg = ExperimentConfig::load(&quick).unwrap();
    cfg.dim = 64;
    let ck_path = dir.path().join("untrained.ckpt");
    untrained_checkpoint(&cfg).unwrap().write(&ck_path).unwrap();
    let out = ok(&fedcrf(&["eval", "--config", s(&quick), "--checkpoint", s(&ck_path), "--k", "20"]));
    let eval: Value = serde_json::from_str(&out).unwrap();
    let recalls: Vec<f64> = ["synth_a", "synth_b"]
        .iter()
        .map(|d| eval[d]["metrics"]["recall@20"].as_f64().unwrap())
        .collect();
    let mean = recalls.iter().sum::<f64>() / 2.0;
    // Roughly 20 of the ~48 unmasked items per user.
    let chance = 20.0 / 48.0;
    assert!((mean - chance).abs() < 0.15, "untrained recall@20 {recalls:?}, chance {chance:.3}");
}

#[test]
fn attack_rejects_zero_top_k() {
    let dir = tempfile::tempdir().unwrap();
    let quick = fixture(dir.path());
    let out = fedcrf(&["attack", "--config", s(&quick), "--checkpoint", "x.ckpt", "--top-k", "0,1"]);
    assert_eq!(out.status.code(), Some(2));
}
