//! Contrastive objectives at both levels.
//!
//! Everything here is a *score to maximize*: losses are non-positive and
//! reach zero only in degenerate cases. The training loop minimizes the
//! negation. All inputs are assumed row-normalized so inner products are
//! cosine similarities; callers get that from the projection heads.

use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorId};
use serde::{Deserialize, Serialize};

/// Temperature and mixing weights shared by both objective levels.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossConfig {
    /// Softmax temperature, strictly positive.
    pub tau: f64,
    /// Weight of the graph-level term in the combined objective.
    pub lambda: f64,
    /// Multiply the positive pair by `n - 1` inside the node-level
    /// denominator instead of 1. Matches a written form of the objective
    /// that over-counts the positive; off by default because the standard
    /// normalized-temperature loss weights it once. Requires `n >= 2`.
    pub literal_denominator: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { tau: 0.5, lambda: 1.0, literal_denominator: false }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::arg("loss", format!("tau must be positive, got {}", self.tau)));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::arg(
                "loss",
                format!("lambda must be non-negative, got {}", self.lambda),
            ));
        }
        Ok(())
    }
}

/// Scalar values of one objective evaluation. `total` always equals
/// `node_term + lambda * graph_term` for the lambda it was built with;
/// ablations zero out the term they drop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub node_term: f64,
    pub graph_term: f64,
}

/// Node-level contrastive score between two views' projected embeddings
/// (`n x d`, rows normalized).
///
/// For each node the positive is its own row in the other view; negatives
/// are all other rows of both views. Per anchor in view `a`:
///
/// ```text
/// l_a(i) = P[i,i] - log( w * exp(P[i,i])
///                        + sum_{j != i} exp(P[i,j])
///                        + sum_{j != i} exp(Q[i,j]) )
/// ```
///
/// with `P = Za Zb^T / tau`, `Q = Za Za^T / tau`, and `w` either 1 or
/// `n - 1` (see [`LossConfig::literal_denominator`]). The result averages
/// `l_a` and its mirror `l_b` over all `2n` anchors.
pub fn node_contrastive_loss(
    tape: &mut Tape,
    za: TensorId,
    zb: TensorId,
    cfg: &LossConfig,
) -> Result<TensorId> {
    cfg.validate()?;
    let (n, d) = tape.shape(za);
    if tape.shape(zb) != (n, d) {
        return Err(Error::shape(
            "node_contrastive_loss",
            format!("views are {:?} and {:?}", tape.shape(za), tape.shape(zb)),
        ));
    }
    if n == 0 {
        return Err(Error::arg("node_contrastive_loss", "no nodes"));
    }
    if cfg.literal_denominator && n < 2 {
        return Err(Error::arg(
            "node_contrastive_loss",
            format!("literal denominator weights the positive by n - 1, undefined for n = {n}"),
        ));
    }
    let pos_weight = if cfg.literal_denominator { (n - 1) as f64 } else { 1.0 };

    // Folding 1/sqrt(tau) into both operands turns every pairwise product
    // into a similarity already divided by tau, so no n x n rescaling
    // nodes are materialized.
    let inv_sqrt_tau = 1.0 / cfg.tau.sqrt();
    let za = tape.scale(za, inv_sqrt_tau)?;
    let zb = tape.scale(zb, inv_sqrt_tau)?;
    let p = tape.matmul_nt(za, zb)?;
    let q = tape.matmul_nt(za, za)?;
    let r = tape.matmul_nt(zb, zb)?;
    let pt = tape.transpose(p)?;
    let positives = tape.diag(p)?;

    let lse_a = tape.lse_pair_masked(p, q, pos_weight)?;
    let lse_b = tape.lse_pair_masked(pt, r, pos_weight)?;
    let ell_a = tape.sub(positives, lse_a)?;
    let ell_b = tape.sub(positives, lse_b)?;
    let mean_a = tape.mean_all(ell_a)?;
    let mean_b = tape.mean_all(ell_b)?;
    let sum = tape.add(mean_a, mean_b)?;
    tape.scale(sum, 0.5)
}

fn check_summary(tape: &Tape, name: &str, s: TensorId, d: usize) -> Result<()> {
    if tape.shape(s) != (1, d) {
        return Err(Error::shape(
            "graph_contrastive_loss",
            format!("{name} is {:?}, expected (1, {d})", tape.shape(s)),
        ));
    }
    Ok(())
}

/// Graph-level contrastive score between two views' projected summaries.
///
/// The positive pair is `(sa, sb)`; negatives are the summaries of the
/// corrupted views, `sa_neg` and `sb_neg`. Each direction scores
///
/// ```text
/// s . partner / tau - log_sum_exp([s . partner, s . neg_own, s . neg_other] / tau)
/// ```
///
/// and the result is the *sum* of both directions, so with every summary
/// identical it equals `2 ln(1/3)`.
pub fn graph_contrastive_loss(
    tape: &mut Tape,
    sa: TensorId,
    sb: TensorId,
    sa_neg: TensorId,
    sb_neg: TensorId,
    cfg: &LossConfig,
) -> Result<TensorId> {
    cfg.validate()?;
    let d = tape.shape(sa).1;
    check_summary(tape, "sa", sa, d)?;
    check_summary(tape, "sb", sb, d)?;
    check_summary(tape, "sa_neg", sa_neg, d)?;
    check_summary(tape, "sb_neg", sb_neg, d)?;

    let inv_tau = 1.0 / cfg.tau;
    let direction = |tape: &mut Tape, anchor: TensorId, partner: TensorId, neg_own: TensorId, neg_other: TensorId| -> Result<TensorId> {
        let pos = tape.matmul_nt(anchor, partner)?;
        let n1 = tape.matmul_nt(anchor, neg_own)?;
        let n2 = tape.matmul_nt(anchor, neg_other)?;
        let cat = tape.hstack(&[pos, n1, n2])?;
        let cat = tape.scale(cat, inv_tau)?;
        let lse = tape.lse_rows(cat)?;
        let pos = tape.scale(pos, inv_tau)?;
        tape.sub(pos, lse)
    };
    let dir_a = direction(tape, sa, sb, sa_neg, sb_neg)?;
    let dir_b = direction(tape, sb, sa, sb_neg, sa_neg)?;
    tape.add(dir_a, dir_b)
}

/// Combines the two levels into `node + lambda * graph` and reports the
/// scalar values of all three.
pub fn combine_levels(
    tape: &mut Tape,
    node: TensorId,
    graph: TensorId,
    lambda: f64,
) -> Result<(TensorId, LossReport)> {
    let scaled = tape.scale(graph, lambda)?;
    let total = tape.add(node, scaled)?;
    let report = LossReport {
        total: tape.value(total)[[0, 0]],
        node_term: tape.value(node)[[0, 0]],
        graph_term: tape.value(graph)[[0, 0]],
    };
    Ok((total, report))
}

/// Full multi-level objective: node term plus `lambda` times the graph term.
#[allow(clippy::too_many_arguments)]
pub fn multi_level_loss(
    tape: &mut Tape,
    za: TensorId,
    zb: TensorId,
    sa: TensorId,
    sb: TensorId,
    sa_neg: TensorId,
    sb_neg: TensorId,
    cfg: &LossConfig,
) -> Result<(TensorId, LossReport)> {
    let node = node_contrastive_loss(tape, za, zb, cfg)?;
    let graph = graph_contrastive_loss(tape, sa, sb, sa_neg, sb_neg, cfg)?;
    combine_levels(tape, node, graph, cfg.lambda)
}
