//! End-to-end training: view construction, the per-epoch objective, the
//! optimization loop with early stopping, and history/checkpoint output.
//!
//! The first view is always the observed topology with raw features. The
//! second view comes from an augmentation scheme; the interesting one builds
//! a kNN graph over the encoder's own embeddings and is refreshed on a fixed
//! epoch cadence so the structure can track the improving representation.

use crate::augment::{
    attribute_masking, attribute_masking_cells, cosine_similarity_matrix,
    default_mahalanobis_metric, edge_perturbation, gaussian_kernel_matrix, knn_graph,
    mahalanobis_distance_matrix, median_pairwise_distance, shuffle_permutation,
    AugmentationSpec, Scheme, SimilarityKind,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{
    combine_levels, graph_contrastive_loss, node_contrastive_loss, LossConfig, LossReport,
};
use crate::model::{
    encode, encode_with_ids, project_graph, project_nodes, readout, register_params,
    topology_view, Activation, EncoderParams, HeadIds, ModelIds, ModelParams, ProjectionHead,
    ProjectionParams, View,
};
use crate::sparse::{add_self_loops, sym_normalize};
use crate::tensor::{adam_step, derive_seed, AdamHyper, AdamState, CheckResult, Dense, Tape, TensorId};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

/// Which objective terms participate in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Node and graph terms combined.
    Multi,
    /// Node term only.
    NodeOnly,
    /// Graph term only.
    GraphOnly,
}

/// Everything the training loop needs besides the graph itself.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Epochs without objective improvement tolerated before stopping.
    pub patience: usize,
    /// Minimum improvement that resets the patience counter.
    pub min_delta: f64,
    /// Output (and hidden) width of every encoder layer.
    pub embedding_dim: usize,
    pub num_layers: usize,
    pub encoder_activation: Activation,
    pub head_activation: Activation,
    pub augmentation: AugmentationSpec,
    /// Rebuild the second view every this many epochs.
    pub refresh_interval: usize,
    /// Build the first kNN view from raw features instead of the untrained
    /// encoder's embeddings.
    pub bootstrap_raw_features: bool,
    pub loss: LossConfig,
    pub seed: u64,
    pub mode: AblationMode,
    /// Print a progress line every this many epochs; 0 keeps quiet.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2000,
            lr: 1e-3,
            patience: 20,
            min_delta: 0.0,
            embedding_dim: 512,
            num_layers: 2,
            encoder_activation: Activation::Relu,
            head_activation: Activation::Elu,
            augmentation: AugmentationSpec::default(),
            refresh_interval: 5,
            bootstrap_raw_features: false,
            loss: LossConfig::default(),
            seed: 0,
            mode: AblationMode::Multi,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !self.min_delta.is_finite() || self.min_delta < 0.0 {
            return Err(Error::Config(format!(
                "min_delta must be non-negative, got {}",
                self.min_delta
            )));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be at least 1".into()));
        }
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be at least 1".into()));
        }
        if self.refresh_interval == 0 {
            return Err(Error::Config("refresh_interval must be at least 1".into()));
        }
        self.augmentation.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.loss.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// Objective values of one epoch (maximization form, all non-positive).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub node_term: f64,
    pub graph_term: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters the output carries.
    pub best_epoch: usize,
    pub best_total: f64,
    pub stopped_early: bool,
    pub wall_seconds: f64,
}

pub struct TrainOutput {
    /// Parameters from the best epoch, not the last one.
    pub params: ModelParams,
    pub history: TrainHistory,
}

/// Builds the similarity matrix selected by `spec` over `embeddings` and
/// returns the normalized kNN-graph view carrying `features`.
pub fn build_feature_view(
    embeddings: &Dense,
    features: &Dense,
    spec: &AugmentationSpec,
) -> Result<View> {
    let sim = match spec.similarity {
        SimilarityKind::Cosine => cosine_similarity_matrix(embeddings)?,
        SimilarityKind::MahalanobisDistance => {
            let metric = default_mahalanobis_metric(embeddings)?;
            mahalanobis_distance_matrix(embeddings, &metric)?
        }
        SimilarityKind::Gaussian => {
            let sigma = match spec.sigma {
                Some(s) => s,
                None => median_pairwise_distance(embeddings)?,
            };
            gaussian_kernel_matrix(embeddings, sigma)?
        }
    };
    let knn = knn_graph(&sim, spec.k)?;
    let adj = sym_normalize(&add_self_loops(&knn)?)?;
    View::new(adj, features.clone())
}

/// Builds the second view for one refresh period. `embeddings` feeds the
/// kNN scheme; the perturbation schemes draw from `refresh_seed`.
pub fn build_second_view(
    g: &Graph,
    view1: &View,
    embeddings: &Dense,
    spec: &AugmentationSpec,
    refresh_seed: u64,
) -> Result<View> {
    match spec.scheme {
        Scheme::Knn => build_feature_view(embeddings, &g.features, spec),
        Scheme::EdgePerturbation => {
            let perturbed = edge_perturbation(&g.adjacency, spec.p, refresh_seed)?;
            let adj = sym_normalize(&add_self_loops(&perturbed)?)?;
            View::new(adj, g.features.clone())
        }
        Scheme::AttributeMasking => {
            let masked = if spec.mask_per_cell {
                attribute_masking_cells(&g.features, spec.p, refresh_seed)?
            } else {
                attribute_masking(&g.features, spec.p, refresh_seed)?
            };
            View::new(view1.adjacency_normalized.clone(), masked)
        }
        Scheme::Identity => Ok(view1.clone()),
    }
}

/// Everything the per-epoch objective needs that lives on a tape.
struct EpochGraph {
    total: TensorId,
    report: LossReport,
}

fn encode_view(
    tape: &mut Tape,
    view: &View,
    ids: &ModelIds,
    activation: Activation,
    xw: Option<TensorId>,
) -> Result<TensorId> {
    encode_with_ids(tape, view, &ids.encoder, activation, xw)
}

fn summary(tape: &mut Tape, head: &HeadIds, h: TensorId) -> Result<TensorId> {
    let c = readout(tape, h)?;
    project_graph(tape, head, c)
}

/// Records the full objective for one epoch on `tape`.
///
/// Both views run through the same registered parameters. The first-layer
/// product `X W0` is computed once per distinct feature matrix and reused;
/// graph-level negatives come from row-shuffling those products, which
/// equals shuffling the features themselves.
#[allow(clippy::too_many_arguments)]
fn objective_on_tape(
    tape: &mut Tape,
    view1: &View,
    view2: &View,
    ids: &ModelIds,
    encoder_activation: Activation,
    corrupt_perm: &[usize],
    loss_cfg: &LossConfig,
    mode: AblationMode,
) -> Result<EpochGraph> {
    let x1 = tape.constant(view1.features.clone());
    let w0 = ids.encoder[0];
    let xw1 = tape.matmul(x1, w0)?;
    let shared_features = view1.features == view2.features;
    let xw2 = if shared_features {
        xw1
    } else {
        let x2 = tape.constant(view2.features.clone());
        tape.matmul(x2, w0)?
    };

    let h1 = encode_view(tape, view1, ids, encoder_activation, Some(xw1))?;
    let h2 = encode_view(tape, view2, ids, encoder_activation, Some(xw2))?;

    let node_term = match mode {
        AblationMode::GraphOnly => None,
        _ => {
            let za = project_nodes(tape, &ids.node, h1)?;
            let zb = project_nodes(tape, &ids.node, h2)?;
            Some(node_contrastive_loss(tape, za, zb, loss_cfg)?)
        }
    };

    let graph_term = match mode {
        AblationMode::NodeOnly => None,
        _ => {
            let sa = summary(tape, &ids.graph, h1)?;
            let sb = summary(tape, &ids.graph, h2)?;
            let xw1c = tape.permute_rows(xw1, corrupt_perm)?;
            let xw2c = if shared_features {
                xw1c
            } else {
                tape.permute_rows(xw2, corrupt_perm)?
            };
            let h1c = encode_view(tape, view1, ids, encoder_activation, Some(xw1c))?;
            let h2c = encode_view(tape, view2, ids, encoder_activation, Some(xw2c))?;
            let sa_neg = summary(tape, &ids.graph, h1c)?;
            let sb_neg = summary(tape, &ids.graph, h2c)?;
            Some(graph_contrastive_loss(tape, sa, sb, sa_neg, sb_neg, loss_cfg)?)
        }
    };

    let (total, report) = match (node_term, graph_term) {
        (Some(n), Some(g)) => combine_levels(tape, n, g, loss_cfg.lambda)?,
        (Some(n), None) => {
            let v = tape.value(n)[[0, 0]];
            (n, LossReport { total: v, node_term: v, graph_term: 0.0 })
        }
        (None, Some(g)) => {
            let total = tape.scale(g, loss_cfg.lambda)?;
            let gv = tape.value(g)[[0, 0]];
            (total, LossReport {
                total: loss_cfg.lambda * gv,
                node_term: 0.0,
                graph_term: gv,
            })
        }
        (None, None) => unreachable!("some term is always active"),
    };
    Ok(EpochGraph { total, report })
}

/// Evaluates the objective for given parameters and views without updating
/// anything. Exposed for gradient checks and tests.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_objective(
    params: &ModelParams,
    view1: &View,
    view2: &View,
    corrupt_perm: &[usize],
    loss_cfg: &LossConfig,
    mode: AblationMode,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let ids = register_params(&mut tape, params, false);
    let g = objective_on_tape(
        &mut tape,
        view1,
        view2,
        &ids,
        params.encoder.activation,
        corrupt_perm,
        loss_cfg,
        mode,
    )?;
    Ok(g.report)
}

fn init_params(g: &Graph, cfg: &TrainConfig) -> Result<ModelParams> {
    let mut dims = vec![g.num_features()];
    dims.extend(std::iter::repeat_n(cfg.embedding_dim, cfg.num_layers));
    let encoder = EncoderParams::new(&dims, cfg.encoder_activation, derive_seed(cfg.seed, 0))?;
    let node = ProjectionHead::new(cfg.embedding_dim, cfg.head_activation, derive_seed(cfg.seed, 1))?;
    let graph = ProjectionHead::new(cfg.embedding_dim, cfg.head_activation, derive_seed(cfg.seed, 2))?;
    Ok(ModelParams { encoder, projection: ProjectionParams { node, graph } })
}

/// Trains the model on one graph and returns the best parameters with the
/// full objective history.
///
/// The loop maximizes the contrastive score by stepping along the gradient
/// of its negation with Adam. A parameter snapshot is taken whenever the
/// score improves by more than `min_delta`; training stops early once
/// `patience` epochs pass without improvement, and the snapshot is what the
/// output carries. A non-finite score aborts with the failing epoch.
pub fn train(g: &Graph, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if g.num_nodes == 0 {
        return Err(Error::arg("train", "graph has no nodes"));
    }
    let start = Instant::now();
    let mut params = init_params(g, cfg)?;
    let view1 = topology_view(g)?;
    let hyper = AdamHyper::with_lr(cfg.lr);
    let mut adam = AdamState::new(&params.tensors(), hyper);

    let mut view2: Option<View> = None;
    let mut best_total = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut snapshot = params.clone();
    let mut records = Vec::with_capacity(cfg.epochs.min(4096));
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        if epoch % cfg.refresh_interval == 0 || view2.is_none() {
            let refresh_idx = (epoch / cfg.refresh_interval) as u64;
            let refresh_seed = derive_seed(cfg.seed, 1_000_000 + refresh_idx);
            let embeddings = if cfg.bootstrap_raw_features && epoch == 0 {
                g.features.clone()
            } else {
                encode(&view1, &params.encoder)?
            };
            view2 = Some(build_second_view(g, &view1, &embeddings, &cfg.augmentation, refresh_seed)?);
        }
        let v2 = view2.as_ref().expect("second view built above");
        let perm = shuffle_permutation(g.num_nodes, derive_seed(cfg.seed, 2_000_000 + epoch as u64));

        let mut tape = Tape::new();
        let ids = register_params(&mut tape, &params, true);
        let eg = objective_on_tape(
            &mut tape,
            &view1,
            v2,
            &ids,
            cfg.encoder_activation,
            &perm,
            &cfg.loss,
            cfg.mode,
        )?;
        if !eg.report.total.is_finite() {
            return Err(Error::Divergence {
                epoch,
                details: format!("objective became {}", eg.report.total),
            });
        }
        records.push(EpochRecord {
            epoch,
            total: eg.report.total,
            node_term: eg.report.node_term,
            graph_term: eg.report.graph_term,
        });
        if cfg.log_every > 0 && epoch % cfg.log_every == 0 {
            eprintln!(
                "epoch {epoch}: total {:.6} node {:.6} graph {:.6}",
                eg.report.total, eg.report.node_term, eg.report.graph_term
            );
        }

        if eg.report.total > best_total + cfg.min_delta {
            best_total = eg.report.total;
            best_epoch = epoch;
            snapshot = params.clone();
        } else if epoch > best_epoch + cfg.patience {
            stopped_early = true;
            break;
        }

        let loss_neg = tape.scale(eg.total, -1.0)?;
        let grads = tape.backward(loss_neg)?;
        let flat_ids = ids.flat();
        let grad_mats: Vec<Dense> = flat_ids
            .iter()
            .zip(params.tensors())
            .map(|(&id, p)| match grads.get(id) {
                Some(gr) => gr.clone(),
                None => Dense::zeros(p.dim()),
            })
            .collect();
        drop(tape);
        adam_step(&mut params.tensors_mut(), &grad_mats, &mut adam)?;
    }

    let history = TrainHistory {
        records,
        best_epoch,
        best_total,
        stopped_early,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(TrainOutput { params: snapshot, history })
}

/// Embeddings of the trained encoder on the topology view; the
/// representation handed to every downstream consumer.
pub fn embed(g: &Graph, params: &ModelParams) -> Result<Dense> {
    encode(&topology_view(g)?, &params.encoder)
}

fn slot_names(params: &ModelParams) -> Vec<String> {
    let mut names: Vec<String> = (0..params.encoder.num_layers())
        .map(|l| format!("encoder.w{l}"))
        .collect();
    for head in ["node_head", "graph_head"] {
        for t in ["w1", "b1", "w2", "b2"] {
            names.push(format!("{head}.{t}"));
        }
    }
    names
}

/// Checks the analytic gradient of the full objective against central
/// finite differences, one result per parameter tensor. Fresh parameters
/// are drawn from `cfg.seed`; the view pair and corruption are fixed so
/// the objective is a deterministic function of the varied tensor.
pub fn objective_gradient_check(g: &Graph, cfg: &TrainConfig, step: f64) -> Result<Vec<CheckResult>> {
    cfg.validate()?;
    let params = init_params(g, cfg)?;
    let view1 = topology_view(g)?;
    let emb = encode(&view1, &params.encoder)?;
    let view2 = build_second_view(g, &view1, &emb, &cfg.augmentation, derive_seed(cfg.seed, 31))?;
    let perm = shuffle_permutation(g.num_nodes, derive_seed(cfg.seed, 32));
    let names = slot_names(&params);
    let mut out = Vec::with_capacity(names.len());
    for (slot, name) in names.into_iter().enumerate() {
        let base = params.tensors()[slot].clone();
        let err = crate::tensor::finite_diff_check(
            |tape, varying| {
                let ids = crate::model::register_params_substituting(tape, &params, slot, varying);
                let eg = objective_on_tape(
                    tape,
                    &view1,
                    &view2,
                    &ids,
                    cfg.encoder_activation,
                    &perm,
                    &cfg.loss,
                    cfg.mode,
                )?;
                Ok(eg.total)
            },
            &base,
            step,
        )?;
        out.push(CheckResult { name, max_rel_err: err, threshold: 1e-4 });
    }
    Ok(out)
}

/// Writes the per-epoch history as `epoch,total,node_term,graph_term`.
pub fn write_history_csv(history: &TrainHistory, path: &Path) -> Result<()> {
    let mut out = String::from("epoch,total,node_term,graph_term\n");
    for r in &history.records {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            r.epoch, r.total, r.node_term, r.graph_term
        ));
    }
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    f.write_all(out.as_bytes())
        .map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{toy_graph, two_blob_embeddings};

    fn toy_config() -> TrainConfig {
        TrainConfig {
            epochs: 30,
            embedding_dim: 8,
            augmentation: AugmentationSpec { k: 2, ..AugmentationSpec::default() },
            refresh_interval: 5,
            log_every: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn feature_view_connects_blobs_internally() {
        let e = two_blob_embeddings(5, 3, 3.0, 1);
        let spec = AugmentationSpec { k: 2, ..AugmentationSpec::default() };
        let view = build_feature_view(&e, &e, &spec).unwrap();
        // Within-blob similarity dominates, so no normalized edge should
        // cross between the blobs.
        for (i, j, v) in view.adjacency_normalized.entries() {
            if (i < 5) != (j < 5) {
                panic!("edge {i}-{j} ({v}) crosses the blobs");
            }
        }
    }

    #[test]
    fn training_improves_the_objective_and_keeps_best() {
        let g = toy_graph();
        let cfg = toy_config();
        let out = train(&g, &cfg).unwrap();
        let first = out.history.records.first().unwrap().total;
        assert!(out.history.best_total > first, "{} vs {first}", out.history.best_total);
        let best = out
            .history
            .records
            .iter()
            .map(|r| r.total)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.history.best_total, best);
        assert!(out.history.records.iter().all(|r| r.total <= 0.0));
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let g = toy_graph();
        let cfg = TrainConfig { epochs: 8, ..toy_config() };
        let a = train(&g, &cfg).unwrap();
        let b = train(&g, &cfg).unwrap();
        assert_eq!(a.params.encoder.weights, b.params.encoder.weights);
        let ra: Vec<f64> = a.history.records.iter().map(|r| r.total).collect();
        let rb: Vec<f64> = b.history.records.iter().map(|r| r.total).collect();
        assert_eq!(ra, rb);

        let cfg2 = TrainConfig { seed: 1, ..cfg };
        let c = train(&g, &cfg2).unwrap();
        assert_ne!(a.params.encoder.weights, c.params.encoder.weights);
    }

    #[test]
    fn ablation_reports_zero_out_the_dropped_term() {
        let g = toy_graph();
        let mut cfg = TrainConfig { epochs: 2, ..toy_config() };
        cfg.mode = AblationMode::NodeOnly;
        let out = train(&g, &cfg).unwrap();
        assert!(out.history.records.iter().all(|r| r.graph_term == 0.0));
        assert!(out.history.records.iter().all(|r| r.total == r.node_term));

        cfg.mode = AblationMode::GraphOnly;
        let out = train(&g, &cfg).unwrap();
        assert!(out.history.records.iter().all(|r| r.node_term == 0.0));
        assert!(out
            .history
            .records
            .iter()
            .all(|r| (r.total - cfg.loss.lambda * r.graph_term).abs() < 1e-15));
    }

    #[test]
    fn early_stopping_respects_patience() {
        let g = toy_graph();
        let cfg = TrainConfig {
            epochs: 500,
            patience: 3,
            // An absurd improvement bar forces a stop right after the
            // patience window.
            min_delta: 1e6,
            ..toy_config()
        };
        let out = train(&g, &cfg).unwrap();
        assert!(out.history.stopped_early);
        assert_eq!(out.history.best_epoch, 0);
        assert_eq!(out.history.records.len(), cfg.patience + 2);
    }

    #[test]
    fn exploding_learning_rate_fails_loudly() {
        let g = toy_graph();
        // Row normalization keeps moderately exploded parameters finite, so
        // the step has to be large enough that squaring overflows f64.
        let cfg = TrainConfig { lr: 1e200, epochs: 50, ..toy_config() };
        match train(&g, &cfg) {
            Err(Error::Divergence { .. }) | Err(Error::Numeric { .. }) => {}
            Err(other) => panic!("unexpected error {other}"),
            Ok(_) => panic!("expected a divergence failure"),
        }
    }

    #[test]
    fn objective_gradients_match_finite_differences_end_to_end() {
        let g = toy_graph();
        let cfg = toy_config();
        let results = objective_gradient_check(&g, &cfg, 1e-5).unwrap();
        assert_eq!(results.len(), cfg.num_layers + 8);
        for r in &results {
            assert!(r.passed(), "{} gradient error {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn identity_scheme_reuses_the_first_view() {
        let g = toy_graph();
        let view1 = topology_view(&g).unwrap();
        let spec = AugmentationSpec { scheme: Scheme::Identity, ..AugmentationSpec::default() };
        let v2 = build_second_view(&g, &view1, &g.features, &spec, 3).unwrap();
        assert_eq!(v2.features, view1.features);
        let e2: Vec<_> = v2.adjacency_normalized.entries().collect();
        let e1: Vec<_> = view1.adjacency_normalized.entries().collect();
        assert_eq!(e2, e1);
    }

    #[test]
    fn history_csv_round_trips_shape() {
        let h = TrainHistory {
            records: vec![
                EpochRecord { epoch: 0, total: -1.5, node_term: -1.0, graph_term: -0.5 },
                EpochRecord { epoch: 1, total: -1.2, node_term: -0.8, graph_term: -0.4 },
            ],
            best_epoch: 1,
            best_total: -1.2,
            stopped_early: false,
            wall_seconds: 0.1,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        write_history_csv(&h, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "epoch,total,node_term,graph_term");
        assert_eq!(lines.next().unwrap(), "0,-1.500000,-1.000000,-0.500000");
        assert_eq!(text.lines().count(), 3);
    }
}
