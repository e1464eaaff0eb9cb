//! Frozen-representation evaluation: fit a softmax regression on the train
//! split of the embeddings, select by validation accuracy, report test
//! accuracy over repeated runs.

use crate::error::{Error, Result};
use crate::graph::Split;
use crate::tensor::{
    adam_step, derive_seed, xavier_init, AdamHyper, AdamState, Dense, Tape,
};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    /// L2 penalty on the weight matrix (the bias is exempt), applied as a
    /// gradient contribution.
    pub weight_decay: f64,
    /// Independent probe fits whose test accuracies get aggregated.
    pub runs: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 300, lr: 0.01, weight_decay: 1e-4, runs: 20, seed: 0 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.runs == 0 {
            return Err(Error::arg("probe", "epochs and runs must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::arg("probe", format!("lr must be positive, got {}", self.lr)));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::arg(
                "probe",
                format!("weight_decay must be non-negative, got {}", self.weight_decay),
            ));
        }
        Ok(())
    }
}

fn gather_rows(x: &Dense, idx: &[usize]) -> Dense {
    Dense::from_shape_fn((idx.len(), x.ncols()), |(i, j)| x[[idx[i], j]])
}

fn argmax_row(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = j;
        }
    }
    best
}

fn accuracy(logits: &Dense, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &l)| argmax_row(row.view()) == l)
        .count();
    correct as f64 / labels.len() as f64
}

fn check_split(split: &Split, n: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape(
            "linear_probe",
            format!("{n} embedding rows but {} labels", labels.len()),
        ));
    }
    for (name, idx) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::arg(
                "linear_probe",
                format!("{name} split index {bad} out of range for {n} nodes"),
            ));
        }
    }
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::arg("linear_probe", "train and test splits must be non-empty"));
    }
    Ok(())
}

/// Fits one softmax regression on frozen embeddings and returns test
/// accuracy. The reported parameters are those of the epoch with the best
/// validation accuracy (latest wins ties); with an empty validation split
/// the final epoch is used.
pub fn linear_probe(
    embeddings: &Dense,
    labels: &[usize],
    split: &Split,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    let n = embeddings.nrows();
    check_split(split, n, labels)?;
    let d = embeddings.ncols();
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;

    let x_train = gather_rows(embeddings, &split.train);
    let y_train: Vec<usize> = split.train.iter().map(|&i| labels[i]).collect();
    let x_val = gather_rows(embeddings, &split.val);
    let y_val: Vec<usize> = split.val.iter().map(|&i| labels[i]).collect();
    let x_test = gather_rows(embeddings, &split.test);
    let y_test: Vec<usize> = split.test.iter().map(|&i| labels[i]).collect();

    let mut w = xavier_init(d, classes, seed)?;
    let mut b = Dense::zeros((1, classes));
    let hyper = AdamHyper::with_lr(cfg.lr);
    let mut adam = AdamState::new(&[&w, &b], hyper);

    let mut best = (f64::NEG_INFINITY, w.clone(), b.clone());
    for _ in 0..cfg.epochs {
        let mut tape = Tape::new();
        let wi = tape.param(w.clone());
        let bi = tape.param(b.clone());
        let x = tape.constant(x_train.clone());
        let xw = tape.matmul(x, wi)?;
        let logits = tape.add_row_broadcast(xw, bi)?;
        let loss = tape.softmax_cross_entropy(logits, &y_train)?;
        let mut grads = tape.backward(loss)?;
        let mut gw = grads.take(wi).expect("weight is a leaf");
        let gb = grads.take(bi).expect("bias is a leaf");
        if cfg.weight_decay > 0.0 {
            gw += &(cfg.weight_decay * &w);
        }
        adam_step(&mut [&mut w, &mut b], &[gw, gb], &mut adam)?;

        if !split.val.is_empty() {
            let val_logits = x_val.dot(&w) + b.row(0);
            let acc = accuracy(&val_logits, &y_val);
            // Ties go to the later epoch: at equal validation accuracy the
            // longer-trained parameters are the safer pick, and small
            // validation splits hit ties constantly.
            if acc >= best.0 {
                best = (acc, w.clone(), b.clone());
            }
        }
    }
    let (w, b) = if split.val.is_empty() { (w, b) } else { (best.1, best.2) };
    let test_logits = x_test.dot(&w) + b.row(0);
    Ok(accuracy(&test_logits, &y_test))
}

/// Aggregate of repeated probe fits.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over the runs.
    pub std: f64,
}

/// Runs the probe `cfg.runs` times with run-derived initialization seeds and
/// aggregates test accuracy.
pub fn evaluate(
    embeddings: &Dense,
    labels: &[usize],
    split: &Split,
    cfg: &ProbeConfig,
) -> Result<EvalSummary> {
    cfg.validate()?;
    let accuracies: Vec<f64> = (0..cfg.runs)
        .map(|run| linear_probe(embeddings, labels, split, cfg, derive_seed(cfg.seed, run as u64)))
        .collect::<Result<_>>()?;
    let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / accuracies.len() as f64;
    Ok(EvalSummary { accuracies, mean, std: var.sqrt() })
}

/// Splits nodes per class into train/val/test by the given fractions,
/// shuffling within each class. Every class lands at least one node in each
/// part, so classes need at least 3 members.
pub fn stratified_split(
    labels: &[usize],
    train_frac: f64,
    val_frac: f64,
    seed: u64,
) -> Result<Split> {
    if !(train_frac > 0.0 && val_frac > 0.0 && train_frac + val_frac < 1.0) {
        return Err(Error::arg(
            "stratified_split",
            format!("fractions must be positive with train + val < 1, got {train_frac} and {val_frac}"),
        ));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut split = Split { train: vec![], val: vec![], test: vec![] };
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.len() < 3 {
            return Err(Error::arg(
                "stratified_split",
                format!("class {c} has {} members, need at least 3", members.len()),
            ));
        }
        let perm = crate::augment::shuffle_permutation(members.len(), derive_seed(seed, c as u64));
        members = perm.iter().map(|&p| members[p]).collect();
        let n = members.len();
        let t = ((train_frac * n as f64).round() as usize).clamp(1, n - 2);
        let v = ((val_frac * n as f64).round() as usize).clamp(1, n - t - 1);
        split.train.extend(&members[..t]);
        split.val.extend(&members[t..t + v]);
        split.test.extend(&members[t + v..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// One probe run's provenance and score, one line of `results.csv`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub mode: String,
    pub scheme: String,
    pub k: usize,
    pub tau: f64,
    pub lambda: f64,
    pub seed: u64,
    pub run: usize,
    pub accuracy: f64,
}

/// Writes `dataset,mode,scheme,k,tau,lambda,seed,run,accuracy` rows.
pub fn write_results_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut out = String::from("dataset,mode,scheme,k,tau,lambda,seed,run,accuracy\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:.6}\n",
            r.dataset, r.mode, r.scheme, r.k, r.tau, r.lambda, r.seed, r.run, r.accuracy
        ));
    }
    write_text(path, &out)
}

/// One aggregated line of `summary.csv`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub mode: String,
    pub scheme: String,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

/// Writes `dataset,mode,scheme,mean,std,runs` rows.
pub fn write_summary_csv(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut out = String::from("dataset,mode,scheme,mean,std,runs\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{}\n",
            r.dataset, r.mode, r.scheme, r.mean, r.std, r.runs
        ));
    }
    write_text(path, &out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    f.write_all(text.as_bytes())
        .map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}
