use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_mlgcl")
}

fn toy_data() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const QUICK: &[&str] = &[
    "--set", "train.epochs=20",
    "--set", "train.embedding_dim=8",
    "--set", "train.augmentation.k=2",
    "--set", "probe.runs=2",
    "--set", "probe.epochs=50",
];

fn train_into(out_dir: &Path, extra: &[&str]) {
    let data = toy_data();
    let mut args = vec![
        "train",
        "--data", data.to_str().unwrap(),
        "--out", out_dir.to_str().unwrap(),
    ];
    args.extend_from_slice(QUICK);
    args.extend_from_slice(extra);
    run_ok(&args);
}

#[test]
fn train_writes_checkpoint_history_and_config_echo() {
    let dir = tempfile::tempdir().unwrap();
    train_into(dir.path(), &[]);
    assert!(dir.path().join("model.ckpt").exists());
    assert!(dir.path().join("resolved_config.json").exists());
    let history = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,total,node_term,graph_term\n"));
    assert_eq!(history.lines().count(), 21);
}

#[test]
fn resolved_config_reproduces_itself_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    train_into(&first, &["--seed", "9"]);
    let echo = first.join("resolved_config.json");

    let second = dir.path().join("second");
    let data = toy_data();
    run_ok(&[
        "train",
        "--data", data.to_str().unwrap(),
        "--out", second.to_str().unwrap(),
        "--config", echo.to_str().unwrap(),
    ]);
    let a = std::fs::read(&echo).unwrap();
    let b = std::fs::read(second.join("resolved_config.json")).unwrap();
    assert_eq!(a, b);
    let ckpt_a = std::fs::read(first.join("model.ckpt")).unwrap();
    let ckpt_b = std::fs::read(second.join("model.ckpt")).unwrap();
    assert_eq!(ckpt_a, ckpt_b, "same resolved config should train identically");
}

#[test]
fn eval_writes_deterministic_results() {
    let dir = tempfile::tempdir().unwrap();
    let model_dir = dir.path().join("train");
    train_into(&model_dir, &[]);
    let ckpt = model_dir.join("model.ckpt");
    let data = toy_data();

    let mut eval_runs = Vec::new();
    for name in ["eval1", "eval2"] {
        let out = dir.path().join(name);
        let mut args = vec![
            "eval",
            "--data", data.to_str().unwrap(),
            "--checkpoint", ckpt.to_str().unwrap(),
            "--out", out.to_str().unwrap(),
        ];
        args.extend_from_slice(QUICK);
        run_ok(&args);
        eval_runs.push(std::fs::read(out.join("results.csv")).unwrap());
    }
    assert_eq!(eval_runs[0], eval_runs[1]);
    let text = String::from_utf8(eval_runs[0].clone()).unwrap();
    assert!(text.starts_with("dataset,mode,scheme,k,tau,lambda,seed,run,accuracy\n"));
    assert_eq!(text.lines().count(), 3, "header plus one line per probe run");
    assert!(text.lines().skip(1).all(|l| l.starts_with("toy,multi,knn,2,")));
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_data();
    let out = run(&[
        "train",
        "--data", data.to_str().unwrap(),
        "--out", dir.path().to_str().unwrap(),
        "--set", "train.learning_rate=0.01",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.learning_rate"));
}

#[test]
fn missing_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--data", "/nonexistent/nowhere",
        "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn export_embeddings_writes_one_row_per_node() {
    let dir = tempfile::tempdir().unwrap();
    let model_dir = dir.path().join("train");
    train_into(&model_dir, &[]);
    let emb = dir.path().join("embeddings.csv");
    let data = toy_data();
    run_ok(&[
        "export-embeddings",
        "--data", data.to_str().unwrap(),
        "--checkpoint", model_dir.join("model.ckpt").to_str().unwrap(),
        "--out", emb.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(&emb).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert_eq!(text.lines().next().unwrap().split(',').count(), 8);
}

#[test]
fn gradcheck_command_passes() {
    let out = run_ok(&["gradcheck"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("all "));
    assert!(!text.contains("FAIL"));
}

#[test]
fn ablate_covers_all_three_modes() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_data();
    let mut args = vec![
        "ablate",
        "--data", data.to_str().unwrap(),
        "--out", dir.path().to_str().unwrap(),
    ];
    args.extend_from_slice(QUICK);
    run_ok(&args);
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    for mode in ["multi", "node_only", "graph_only"] {
        assert!(summary.contains(&format!("toy,{mode},knn")), "missing {mode} in {summary}");
        assert!(dir.path().join(format!("model_{mode}.ckpt")).exists());
    }
    let results = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 3 * 2, "header plus runs x modes");
}
