//! Drives the `bombworks` binary through its command surface.

use std::path::Path;
use std::process::{Command, Output};

use bombworks::config::ExperimentConfig;

const SMALL_EMBEDDING: &str = "\
kind = embedding
trials = 4
seq.n_samples = 600
reference_size = 300
d = 20
lambda = 0.04
";

const SMALL_NN: &str = "\
kind = nn
trials = 2
dense.n_samples = 300
dense.input_dim = 16
extractor = 16,8
reference_fraction = 0.5
";

fn bombworks(args: &[&str], env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bombworks"));
    cmd.args(args).env_remove("BOMBWORKS_SEED").env_remove("RUST_LOG");
    if let Some(s) = env_seed {
        cmd.env("BOMBWORKS_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bombworks(args, None);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("experiment.ini");
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn pipeline_produces_populated_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL_EMBEDDING);
    let run = s(&tmp.path().join("run"));
    ok(&["gen-data", "--config", &cfg, "--out", &run]);
    ok(&["train-baseline", "--out", &run]);
    ok(&["craft", "--out", &run]);
    ok(&["evaluate", "--out", &run]);

    let dir = tmp.path().join("run");
    for f in ["data.csv", "M.emb1", "host.dnn1", "baseline.json", "config.ini", "results.csv", "summary.csv"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    for f in ["E.emb1", "M_hat.emb1", "trace.csv", "report.json", "targets.csv", "config.ini"] {
        assert!(dir.join("craft").join(f).is_file(), "missing craft/{f}");
    }
    let summary = std::fs::read_to_string(dir.join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    for metric in ["success_rate", "confidence_mean", "flipping_median", "perturbation_permille_median", "accuracy_median"] {
        let i = header.iter().position(|h| *h == metric).unwrap();
        assert!(row[i].parse::<f64>().is_ok(), "{metric} = '{}'", row[i]);
    }

    // the run directory's settings are reused, so a fresh end-to-end run agrees
    let resolved = ExperimentConfig::load(&dir.join("config.ini")).unwrap();
    let (_, records) = bombworks::eval::run_experiment(&resolved).unwrap();
    let results = std::fs::read_to_string(dir.join("results.csv")).unwrap();
    assert_eq!(bombworks::eval::results_csv(&records), results);
}

#[test]
fn same_config_twice_gives_identical_summaries() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL_EMBEDDING);
    let a = s(&tmp.path().join("a"));
    let b = s(&tmp.path().join("b"));
    ok(&["evaluate", "--config", &cfg, "--out", &a, "--workers", "1"]);
    ok(&["evaluate", "--config", &cfg, "--out", &b, "--workers", "2"]);
    let read = |d: &str| std::fs::read(Path::new(d).join("summary.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn seed_precedence_is_config_then_env_then_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{SMALL_EMBEDDING}seed = 11\n"));
    let seed_of = |dir: &Path| ExperimentConfig::load(&dir.join("config.ini")).unwrap().seed;

    let d1 = tmp.path().join("cfg");
    assert!(bombworks(&["gen-data", "--config", &cfg, "--out", &s(&d1)], None).status.success());
    assert_eq!(seed_of(&d1), 11);

    let d2 = tmp.path().join("env");
    assert!(bombworks(&["gen-data", "--config", &cfg, "--out", &s(&d2)], Some("12")).status.success());
    assert_eq!(seed_of(&d2), 12);

    let d3 = tmp.path().join("flag");
    let out = bombworks(&["gen-data", "--config", &cfg, "--out", &s(&d3), "--seed", "13"], Some("12"));
    assert!(out.status.success());
    assert_eq!(seed_of(&d3), 13);

    assert_ne!(
        std::fs::read(d1.join("data.csv")).unwrap(),
        std::fs::read(d2.join("data.csv")).unwrap()
    );
    let bad = bombworks(&["gen-data", "--config", &cfg, "--out", &s(&tmp.path().join("x"))], Some("seven"));
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn exit_codes_distinguish_usage_and_runtime_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(bombworks(&["explode"], None).status.code(), Some(2));
    assert_eq!(bombworks(&["gen-data", "--set", "lambda=abc"], None).status.code(), Some(2));
    let broken = write_config(tmp.path(), "not a setting line\n");
    assert_eq!(bombworks(&["gen-data", "--config", &broken], None).status.code(), Some(2));
    let missing = s(&tmp.path().join("nothing.emb1"));
    assert_eq!(bombworks(&["hash", &missing], None).status.code(), Some(1));
    assert_eq!(bombworks(&["--help"], None).status.code(), Some(0));

    // changing a system setting under existing artifacts is refused
    let cfg = write_config(tmp.path(), SMALL_EMBEDDING);
    let run = s(&tmp.path().join("run"));
    ok(&["gen-data", "--config", &cfg, "--out", &run]);
    assert_eq!(bombworks(&["train-baseline", "--out", &run, "--set", "d=30"], None).status.code(), Some(2));
}

#[test]
fn nn_craft_uses_default_epsilon_and_alpha() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL_NN);
    let run = tmp.path().join("nn");
    ok(&["craft", "--kind", "nn", "--config", &cfg, "--out", &s(&run)]);
    let resolved = ExperimentConfig::load(&run.join("craft").join("config.ini")).unwrap();
    assert_eq!(resolved.nn_attack.epsilon, 2e-3);
    assert_eq!(resolved.nn_attack.alpha, 0.75);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("craft").join("summary.json")).unwrap()).unwrap();
    assert!(summary["linf"].as_f64().unwrap() <= 2e-3);

    ok(&["craft", "--out", &s(&run), "--epsilon", "1e-3", "--kappa", "3"]);
    let resolved = ExperimentConfig::load(&run.join("craft").join("config.ini")).unwrap();
    assert_eq!((resolved.nn_attack.epsilon, resolved.nn_attack.kappa), (1e-3, 3));
}

#[test]
fn defend_audit_vet_hash_and_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL_EMBEDDING);
    let run = tmp.path().join("run");
    let r = s(&run);
    let targets = tmp.path().join("targets.csv");
    ok(&["gen-data", "--config", &cfg, "--out", &r]);
    let data = std::fs::read_to_string(run.join("data.csv")).unwrap();
    let label: usize = data.lines().nth(1).unwrap().split(',').next().unwrap().parse().unwrap();
    std::fs::write(&targets, format!("id,class\n0,{}\n", 1 - label)).unwrap();
    ok(&["craft", "--out", &r, "--targets", &s(&targets)]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("craft").join("report.json")).unwrap()).unwrap();
    assert_eq!(report["targets"][0]["id"], 0);
    assert_eq!(report["targets"][0]["class"].as_u64().unwrap() as usize, 1 - label);

    ok(&["defend", "--out", &r, "--noise", "0.01"]);
    let noisy = run.join("defend").join("M_hat.emb1");
    let hist = tmp.path().join("hist.csv");
    let audit: serde_json::Value = serde_json::from_str(&ok(&[
        "audit",
        "--a",
        &s(&run.join("craft").join("M_hat.emb1")),
        "--b",
        &s(&noisy),
        "--histogram",
        &s(&hist),
    ]))
    .unwrap();
    let linf = audit["linf"].as_f64().unwrap();
    assert!(linf > 0.0 && linf <= 0.01);
    assert!(std::fs::read_to_string(&hist).unwrap().starts_with("layer,binLow,binHigh,count"));
    let mixed = bombworks(&["audit", "--a", &s(&noisy), "--b", &s(&run.join("host.dnn1"))], None);
    assert_eq!(mixed.status.code(), Some(1));

    ok(&["vet", "--out", &r, "--probes", "50"]);
    let vet: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("vet").join("vet.json")).unwrap()).unwrap();
    assert_eq!(vet["target_ids"][0], 0);
    assert_eq!(vet["report"]["scores"].as_array().unwrap().len(), vet["probe_ids"].as_array().unwrap().len());

    let h1 = ok(&["hash", &s(&noisy)]);
    let digest = h1.split_whitespace().next().unwrap();
    assert_eq!(digest.len(), 64);
    assert_eq!(digest, bombworks::defense::content_hash(&std::fs::read(&noisy).unwrap()));

    let plan = tmp.path().join("plan.ini");
    std::fs::write(&plan, format!("{SMALL_EMBEDDING}[sweep]\nlambda = 0.04, 0.2\n")).unwrap();
    let sweep_dir = tmp.path().join("sweep");
    ok(&["sweep", "--plan", &s(&plan), "--out", &s(&sweep_dir)]);
    let summary = std::fs::read_to_string(sweep_dir.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(sweep_dir.join("plotdata").join("success_rate_vs_lambda.csv").is_file());
    assert!(sweep_dir.join("plan.ini").is_file());
}
