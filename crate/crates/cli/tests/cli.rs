use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3
[synthetic_corpus]
n_dialogues = 40
fact_bank_size = 12
[split]
seed_fraction = 0.2
val_fraction = 0.2
[generator]
embed_dim = 16
hidden_dim = 32
num_layers = 1
max_seq_len = 80
[learner]
embed_dim = 16
hidden_dim = 32
num_layers = 1
max_seq_len = 80
[generator_training]
epochs = 2
max_response_tokens = 12
[learner_training]
max_response_tokens = 12
lambda_kf1 = 0.1
[sampling]
max_new_tokens = 12
[ppo]
rollouts_per_update = 4
minibatch_size = 4
epochs_per_batch = 1
[meta]
max_meta_iterations = 1
runs_to_average = 1
learner_epochs = 1
synth_multiplier_final = 2.0
"#;

fn gcn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gcn"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("GCN_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn synth_corpus_writes_records() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gcn(&["synth-corpus", "--out", "c.jsonl", "--dialogues", "7", "--facts", "5", "--seed", "2"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(tmp.path().join("c.jsonl")).unwrap();
    assert_eq!(text.lines().filter(|l| l.contains("\"dialogue\"")).count(), 7);
    assert_eq!(text.lines().filter(|l| l.contains("\"fact\"")).count(), 5);
}

#[test]
fn invalid_configuration_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    std::fs::write(&cfg, "[ppo]\nclip_epsilon = 3.0\n").unwrap();
    let out = gcn(&["train", "--condition", "gcn-rl", "--config", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("clip_epsilon"));

    std::fs::write(&cfg, "[meta]\nmax_meta_iteration = 3\n").unwrap();
    let out = gcn(&["train", "--condition", "gcn-rl", "--config", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(2));

    let out = gcn(&["train", "--condition", "nope"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let out = gcn(&["train", "--condition", "baseline", "--config", "missing.toml"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "");
    let out = gcn(&["compare", "--runs", "nowhere"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let corpus = gcn(&["train", "--condition", "baseline", "--corpus", "absent.jsonl", "--config", "run.toml"], tmp.path());
    assert_eq!(corpus.status.code(), Some(3));
}

#[test]
fn train_evaluate_compare_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    for condition in ["baseline", "gcn-rl"] {
        let out = gcn(&["train", "--condition", condition, "--config", &cfg, "--output", condition], tmp.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert!(report["kf1_mean"].is_number());
        assert!(tmp.path().join(condition).join("report.json").exists());
        assert!(tmp.path().join(condition).join("config.toml").exists());
    }
    let states = std::fs::read_to_string(tmp.path().join("gcn-rl/run-0/state.jsonl")).unwrap();
    assert_eq!(states.lines().count(), 1);
    assert!(tmp.path().join("gcn-rl/run-0/ppo.jsonl").exists());
    assert!(tmp.path().join("gcn-rl/run-0/final-synth.jsonl").exists());

    let out = gcn(&["evaluate", "--run", "gcn-rl", "--split", "test"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eval: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let trained: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("gcn-rl/report.json")).unwrap()).unwrap();
    assert_eq!(eval["kf1_mean"], trained["kf1_mean"]);

    let out = gcn(&["compare", "--runs", "baseline", "gcn-rl"], tmp.path());
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "run,condition,ppl,kf1,bleu4,oov");
    assert!(lines[1].contains(",baseline,") && lines[2].contains(",gcn-rl,"));

    // Re-running a finished directory reuses the persisted results.
    let again = gcn(&["train", "--condition", "gcn-rl", "--config", &cfg, "--output", "gcn-rl"], tmp.path());
    assert!(again.status.success());
    let fresh: serde_json::Value = serde_json::from_slice(&again.stdout).unwrap();
    assert_eq!(fresh, trained);

    // A different configuration may not reuse the directory.
    let clash = gcn(&["train", "--condition", "gcn-rl", "--config", &cfg, "--output", "gcn-rl", "--seed", "9"], tmp.path());
    assert_eq!(clash.status.code(), Some(2));
}

#[test]
fn output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = Command::new(env!("CARGO_BIN_EXE_gcn"))
        .args(["train", "--condition", "baseline", "--config", &cfg])
        .current_dir(tmp.path())
        .env("RUST_LOG", "warn")
        .env("GCN_OUTPUT_ROOT", "elsewhere")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("elsewhere/baseline/report.json").exists());
}

#[test]
fn ablation_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = gcn(
        &["ablate", "--sweep", "data_multiplier", "--values", "1,2", "--config", &cfg, "--output", "abl"],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(tmp.path().join("abl/data_multiplier.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,gcn-rl,"));
    assert!(lines[2].starts_with("2,gcn-rl,"));
    let bad = gcn(&["ablate", "--sweep", "width", "--values", "1", "--config", &cfg], tmp.path());
    assert_eq!(bad.status.code(), Some(2));
}
