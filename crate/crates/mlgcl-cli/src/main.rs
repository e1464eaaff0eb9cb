//! Command-line front end: train, evaluate, ablate, gradient-check, and
//! export embeddings.
//!
//! Exit codes: 0 success, 1 compute or I/O failure, 2 invalid arguments,
//! configuration, or dataset, 3 gradient check failure.

mod config;

use clap::{Args, Parser, Subcommand};
use config::{resolve, resolved_json, ConfigError, RunConfig};
use mlgcl::eval::{evaluate, stratified_split, write_results_csv, write_summary_csv, ResultRow, SummaryRow};
use mlgcl::graph::{load_dataset, Graph, Split};
use mlgcl::model::{load_model, save_model};
use mlgcl::pipeline::{embed, objective_gradient_check, train, write_history_csv, AblationMode, TrainConfig};
use mlgcl::synth::toy_graph;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mlgcl", version, about = "Multi-level graph contrastive learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset directory and write a checkpoint
    Train(RunArgs),
    /// Probe a checkpoint's embeddings with a linear classifier
    Eval(EvalArgs),
    /// Train and evaluate every objective ablation back to back
    Ablate(RunArgs),
    /// Compare every analytic gradient against finite differences
    Gradcheck,
    /// Write a checkpoint's embeddings as CSV
    ExportEmbeddings(ExportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Dataset directory (edges.tsv, features.csv or .bin, optional
    /// labels.tsv and splits.json)
    #[arg(long)]
    data: PathBuf,
    /// Output directory, created if missing
    #[arg(long)]
    out: PathBuf,
    /// Flat dotted-key JSON config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Shorthand setting both train.seed and probe.seed, applied last
    #[arg(long)]
    seed: Option<u64>,
    /// KEY=VALUE config override, repeatable, applied in order
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory (edges.tsv, features.csv or .bin, optional
    /// labels.tsv and splits.json)
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint written by `mlgcl train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory, created if missing
    #[arg(long)]
    out: PathBuf,
    /// Flat dotted-key JSON config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Shorthand setting both train.seed and probe.seed, applied last
    #[arg(long)]
    seed: Option<u64>,
    /// KEY=VALUE config override, repeatable, applied in order
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct ExportArgs {
    /// Dataset directory the checkpoint was trained on
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint written by `mlgcl train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output CSV file, one row per node
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Compute(String),
    Validation(String),
    Gradcheck,
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Validation(e.0)
    }
}

impl From<mlgcl::Error> for Failure {
    fn from(e: mlgcl::Error) -> Self {
        use mlgcl::Error::*;
        match e {
            Config(_) | InvalidArgument { .. } | Dataset { .. } | ShapeMismatch { .. }
            | Checkpoint { .. } => Failure::Validation(e.to_string()),
            _ => Failure::Compute(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::Gradcheck => cmd_gradcheck(),
        Command::ExportEmbeddings(args) => cmd_export(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Compute(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Gradcheck) => ExitCode::from(3),
    }
}

fn prepare_out(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::Compute(format!("cannot create {}: {e}", dir.display())))
}

fn dataset_name(data: &Path) -> String {
    data.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string())
}

fn enum_str<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        other => panic!("expected a string-serializing enum, got {other:?}"),
    }
}

fn cmd_train(args: &RunArgs) -> Result<(), Failure> {
    let (cfg, flat) = resolve(args.config.as_deref(), &args.set, args.seed)?;
    let g = load_dataset(&args.data)?;
    prepare_out(&args.out)?;
    write_text(&args.out.join("resolved_config.json"), &resolved_json(&flat))?;

    let out = train(&g, &cfg.train)?;
    save_model(&out.params, &args.out.join("model.ckpt"))?;
    write_history_csv(&out.history, &args.out.join("history.csv"))?;
    println!(
        "trained {} epochs in {:.1}s; best objective {:.6} at epoch {}{}",
        out.history.records.len(),
        out.history.wall_seconds,
        out.history.best_total,
        out.history.best_epoch,
        if out.history.stopped_early { " (stopped early)" } else { "" },
    );
    Ok(())
}

fn labels_and_split(g: &Graph, cfg: &RunConfig) -> Result<(Vec<usize>, Split), Failure> {
    let labels = g
        .labels
        .clone()
        .ok_or_else(|| Failure::Validation("dataset has no labels.tsv; evaluation needs labels".into()))?;
    let split = match &g.splits {
        Some(s) => s.clone(),
        None => stratified_split(&labels, 0.1, 0.1, cfg.probe.seed)?,
    };
    Ok((labels, split))
}

fn probe_rows(
    g: &Graph,
    params: &mlgcl::model::ModelParams,
    cfg: &RunConfig,
    dataset: &str,
    mode: AblationMode,
) -> Result<(Vec<ResultRow>, SummaryRow), Failure> {
    let embeddings = embed(g, params)?;
    let (labels, split) = labels_and_split(g, cfg)?;
    let summary = evaluate(&embeddings, &labels, &split, &cfg.probe)?;
    let mode_s = enum_str(&mode);
    let scheme_s = enum_str(&cfg.train.augmentation.scheme);
    let rows = summary
        .accuracies
        .iter()
        .enumerate()
        .map(|(run, &accuracy)| ResultRow {
            dataset: dataset.to_string(),
            mode: mode_s.clone(),
            scheme: scheme_s.clone(),
            k: cfg.train.augmentation.k,
            tau: cfg.train.loss.tau,
            lambda: cfg.train.loss.lambda,
            seed: cfg.train.seed,
            run,
            accuracy,
        })
        .collect();
    let srow = SummaryRow {
        dataset: dataset.to_string(),
        mode: mode_s,
        scheme: scheme_s,
        mean: summary.mean,
        std: summary.std,
        runs: summary.accuracies.len(),
    };
    Ok((rows, srow))
}

fn cmd_eval(args: &EvalArgs) -> Result<(), Failure> {
    let (cfg, flat) = resolve(args.config.as_deref(), &args.set, args.seed)?;
    let g = load_dataset(&args.data)?;
    let params = load_model(&args.checkpoint)?;
    prepare_out(&args.out)?;
    write_text(&args.out.join("resolved_config.json"), &resolved_json(&flat))?;

    let dataset = dataset_name(&args.data);
    let (rows, srow) = probe_rows(&g, &params, &cfg, &dataset, cfg.train.mode)?;
    write_results_csv(&rows, &args.out.join("results.csv"))?;
    write_summary_csv(std::slice::from_ref(&srow), &args.out.join("summary.csv"))?;
    println!(
        "{dataset}: accuracy {:.4} +/- {:.4} over {} runs",
        srow.mean, srow.std, srow.runs
    );
    Ok(())
}

fn cmd_ablate(args: &RunArgs) -> Result<(), Failure> {
    let (cfg, flat) = resolve(args.config.as_deref(), &args.set, args.seed)?;
    let g = load_dataset(&args.data)?;
    prepare_out(&args.out)?;
    write_text(&args.out.join("resolved_config.json"), &resolved_json(&flat))?;

    let dataset = dataset_name(&args.data);
    let mut all_rows = Vec::new();
    let mut summaries = Vec::new();
    for mode in [AblationMode::Multi, AblationMode::NodeOnly, AblationMode::GraphOnly] {
        let train_cfg = TrainConfig { mode, ..cfg.train.clone() };
        let out = train(&g, &train_cfg)?;
        let mode_s = enum_str(&mode);
        save_model(&out.params, &args.out.join(format!("model_{mode_s}.ckpt")))?;
        let run_cfg = RunConfig { train: train_cfg, probe: cfg.probe };
        let (rows, srow) = probe_rows(&g, &out.params, &run_cfg, &dataset, mode)?;
        println!("{dataset} {mode_s}: accuracy {:.4} +/- {:.4}", srow.mean, srow.std);
        all_rows.extend(rows);
        summaries.push(srow);
    }
    write_results_csv(&all_rows, &args.out.join("results.csv"))?;
    write_summary_csv(&summaries, &args.out.join("summary.csv"))?;
    Ok(())
}

fn cmd_gradcheck() -> Result<(), Failure> {
    let mut failed = false;
    let builtin = mlgcl::tensor::run_builtin_checks().map_err(|e| Failure::Compute(e.to_string()))?;
    let g = toy_graph();
    let cfg = TrainConfig {
        embedding_dim: 8,
        augmentation: mlgcl::augment::AugmentationSpec { k: 2, ..Default::default() },
        ..TrainConfig::default()
    };
    let objective = objective_gradient_check(&g, &cfg, 1e-5).map_err(|e| Failure::Compute(e.to_string()))?;
    for r in builtin.iter().chain(&objective) {
        let status = if r.passed() { "pass" } else { "FAIL" };
        println!("{status}  {:<28} max rel err {:.3e} (threshold {:.0e})", r.name, r.max_rel_err, r.threshold);
        failed |= !r.passed();
    }
    if failed {
        eprintln!("gradient check failed");
        return Err(Failure::Gradcheck);
    }
    println!("all {} checks passed", builtin.len() + objective.len());
    Ok(())
}

fn cmd_export(args: &ExportArgs) -> Result<(), Failure> {
    let g = load_dataset(&args.data)?;
    let params = load_model(&args.checkpoint)?;
    let embeddings = embed(&g, &params)?;
    let mut out = String::new();
    for row in embeddings.rows() {
        let fields: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    write_text(&args.out, &out)?;
    println!(
        "wrote {} x {} embeddings to {}",
        embeddings.nrows(),
        embeddings.ncols(),
        args.out.display()
    );
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text)
        .map_err(|e| Failure::Compute(format!("cannot write {}: {e}", path.display())))
}
