//! View generation: similarity matrices, kNN graphs, ablation augmentations,
//! and the row-shuffle corruption behind graph-level negatives.

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Dense};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

/// Which pairwise score fills a [`SimilarityMatrix`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    /// Cosine of the angle between rows; larger is more similar.
    Cosine,
    /// Mahalanobis distance under a PSD metric; smaller is more similar.
    MahalanobisDistance,
    /// Gaussian kernel of Euclidean distance; larger is more similar.
    Gaussian,
}

impl SimilarityKind {
    /// True when larger entries mean more similar pairs.
    pub fn larger_is_closer(self) -> bool {
        !matches!(self, SimilarityKind::MahalanobisDistance)
    }
}

/// Dense pairwise similarity (or distance) matrix tagged with its kind.
///
/// Construction mirrors the upper triangle onto the lower, so the matrix is
/// exactly symmetric.
#[derive(Clone, Debug)]
pub struct SimilarityMatrix {
    pub values: Dense,
    pub kind: SimilarityKind,
}

/// How view two is produced from the input graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Feature-space kNN graph over encoder embeddings.
    Knn,
    /// Random edge dropping on the observed topology.
    EdgePerturbation,
    /// Random zeroing of feature columns.
    AttributeMasking,
    /// Second view identical to the first (no-augmentation control).
    Identity,
}

/// Everything needed to build the second view.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub scheme: Scheme,
    /// Neighbors per node for the kNN scheme.
    pub k: usize,
    pub similarity: SimilarityKind,
    /// Drop/mask probability for the perturbation schemes.
    pub p: f64,
    /// Gaussian kernel width; `None` selects the median pairwise distance.
    pub sigma: Option<f64>,
    /// Masks individual cells instead of whole columns.
    pub mask_per_cell: bool,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            scheme: Scheme::Knn,
            k: 10,
            similarity: SimilarityKind::Cosine,
            p: 0.2,
            sigma: None,
            mask_per_cell: false,
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scheme == Scheme::Knn && self.k < 1 {
            return Err(Error::arg("augmentation", "k must be at least 1 for the knn scheme"));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::arg("augmentation", format!("p must be in [0, 1], got {}", self.p)));
        }
        if let Some(s) = self.sigma {
            if !s.is_finite() || s <= 0.0 {
                return Err(Error::arg("augmentation", format!("sigma must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

/// Copies the upper triangle onto the lower so the matrix is exactly
/// symmetric, and fixes the diagonal to `diag`.
fn mirror_upper(s: &mut Dense, diag: f64) {
    let n = s.nrows();
    for i in 0..n {
        s[[i, i]] = diag;
        for j in (i + 1)..n {
            let v = s[[i, j]];
            s[[j, i]] = v;
        }
    }
}

/// Pairwise cosine similarities. Zero-norm rows get similarity 0 to every
/// other row and 1 to themselves.
pub fn cosine_similarity_matrix(z: &Dense) -> Result<SimilarityMatrix> {
    if z.nrows() == 0 {
        return Err(Error::arg("cosine_similarity_matrix", "no rows"));
    }
    let mut unit = z.clone();
    for mut row in unit.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    let mut s = matmul_nt(&unit, &unit)?;
    s.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    mirror_upper(&mut s, 1.0);
    Ok(SimilarityMatrix { values: s, kind: SimilarityKind::Cosine })
}

/// Pairwise Mahalanobis distances `sqrt((z_i - z_j)^T M (z_i - z_j))` under
/// a symmetric PSD metric `M`.
pub fn mahalanobis_distance_matrix(z: &Dense, m: &Dense) -> Result<SimilarityMatrix> {
    let d = z.ncols();
    if m.dim() != (d, d) {
        return Err(Error::shape(
            "mahalanobis_distance_matrix",
            format!("metric is {:?} but embeddings have {d} columns", m.dim()),
        ));
    }
    let asym = crate::tensor::max_abs_diff(m, &m.t().to_owned());
    if asym > 1e-9 {
        return Err(Error::arg(
            "mahalanobis_distance_matrix",
            format!("metric is asymmetric by {asym}"),
        ));
    }
    // PSD validation only; the factor itself is not needed here.
    cholesky_psd(m, "mahalanobis_distance_matrix")?;
    let zm = matmul(z, m)?;
    let g = matmul_nt(&zm, z)?;
    let n = z.nrows();
    let mut s = Dense::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let sq = g[[i, i]] + g[[j, j]] - g[[i, j]] - g[[j, i]];
            s[[i, j]] = sq.max(0.0).sqrt();
        }
    }
    mirror_upper(&mut s, 0.0);
    Ok(SimilarityMatrix { values: s, kind: SimilarityKind::MahalanobisDistance })
}

/// Gaussian kernel similarities `exp(-|z_i - z_j|^2 / (2 sigma^2))`.
pub fn gaussian_kernel_matrix(z: &Dense, sigma: f64) -> Result<SimilarityMatrix> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::arg("gaussian_kernel_matrix", format!("sigma must be positive, got {sigma}")));
    }
    let g = matmul_nt(z, z)?;
    let n = z.nrows();
    let denom = 2.0 * sigma * sigma;
    let mut s = Dense::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let sq = (g[[i, i]] + g[[j, j]] - 2.0 * g[[i, j]]).max(0.0);
            s[[i, j]] = (-sq / denom).exp();
        }
    }
    mirror_upper(&mut s, 1.0);
    Ok(SimilarityMatrix { values: s, kind: SimilarityKind::Gaussian })
}

/// Builds the kNN graph: each node keeps its `k` closest peers (per the
/// similarity kind's orientation), ties broken toward the lower index, and
/// the directed selections are symmetrized by union with unit weights.
pub fn knn_graph(s: &SimilarityMatrix, k: usize) -> Result<SparseMatrix> {
    let n = s.values.nrows();
    if k < 1 || n < 2 || k > n - 1 {
        return Err(Error::arg(
            "knn_graph",
            format!("k must be in [1, {}], got {k}", n.saturating_sub(1)),
        ));
    }
    let larger = s.kind.larger_is_closer();
    let mut undirected: HashSet<(usize, usize)> = HashSet::new();
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        order.clear();
        for j in 0..n {
            if j != i {
                let key = if larger { s.values[[i, j]] } else { -s.values[[i, j]] };
                order.push((key, j));
            }
        }
        // Best key first; equal keys resolved by the lower node index.
        order.sort_unstable_by(|a, b| {
            b.0.partial_cmp(&a.0).expect("similarities are finite").then(a.1.cmp(&b.1))
        });
        for &(_, j) in order.iter().take(k) {
            undirected.insert((i.min(j), i.max(j)));
        }
    }
    let mut entries = Vec::with_capacity(undirected.len() * 2);
    for (i, j) in undirected {
        entries.push((i, j, 1.0));
        entries.push((j, i, 1.0));
    }
    SparseMatrix::from_entries(n, n, entries)
}

/// Drops each undirected edge independently with probability `p`. Drop
/// decisions are made once per unordered pair, so symmetry is preserved.
pub fn edge_perturbation(a: &SparseMatrix, p: f64, seed: u64) -> Result<SparseMatrix> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::arg("edge_perturbation", format!("p must be in [0, 1], got {p}")));
    }
    if !a.is_symmetric() {
        return Err(Error::arg("edge_perturbation", "adjacency must be symmetric"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (i, j, v) in a.entries() {
        if i > j {
            continue;
        }
        if rng.gen::<f64>() < p {
            continue;
        }
        entries.push((i, j, v));
        if i != j {
            entries.push((j, i, v));
        }
    }
    SparseMatrix::from_entries(a.rows(), a.cols(), entries)
}

/// Zeroes a random subset of feature columns, each column independently
/// selected with probability `p`, across all nodes.
pub fn attribute_masking(x: &Dense, p: f64, seed: u64) -> Result<Dense> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::arg("attribute_masking", format!("p must be in [0, 1], got {p}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = x.clone();
    for c in 0..x.ncols() {
        if rng.gen::<f64>() < p {
            out.column_mut(c).fill(0.0);
        }
    }
    Ok(out)
}

/// Per-cell variant of [`attribute_masking`]: each entry is independently
/// zeroed with probability `p` (row-major draw order).
pub fn attribute_masking_cells(x: &Dense, p: f64, seed: u64) -> Result<Dense> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::arg("attribute_masking", format!("p must be in [0, 1], got {p}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = x.clone();
    for v in out.iter_mut() {
        if rng.gen::<f64>() < p {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Uniformly random permutation of `0..n` in gather form.
pub fn shuffle_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);
    perm
}

/// Permutes the rows of `x` by a uniformly random permutation; the row
/// multiset is preserved. This is the feature corruption used to manufacture
/// negative graph summaries.
pub fn row_shuffle(x: &Dense, seed: u64) -> Dense {
    let perm = shuffle_permutation(x.nrows(), seed);
    let mut out = Dense::zeros(x.dim());
    for (i, &p) in perm.iter().enumerate() {
        out.row_mut(i).assign(&x.row(p));
    }
    out
}

/// Regularized inverse covariance of the rows of `z`:
/// `(Cov(z) + 1e-3 I)^{-1}` with the sample covariance (divide by N-1).
/// The default metric for Mahalanobis-based kNN graphs.
pub fn default_mahalanobis_metric(z: &Dense) -> Result<Dense> {
    let n = z.nrows();
    if n < 2 {
        return Err(Error::arg(
            "default_mahalanobis_metric",
            format!("need at least 2 rows to estimate covariance, got {n}"),
        ));
    }
    let d = z.ncols();
    let mean = {
        let mut m = Dense::zeros((1, d));
        for row in z.rows() {
            m.row_mut(0).scaled_add(1.0, &row);
        }
        m / n as f64
    };
    let centered = z - &mean.row(0);
    let mut cov = matmul_tn(&centered, &centered)? / (n - 1) as f64;
    for i in 0..d {
        cov[[i, i]] += 1e-3;
    }
    let inv = cholesky_inverse(&cov, "default_mahalanobis_metric")?;
    // Symmetrize to scrub rounding asymmetry from the solve.
    let sym = (&inv + &inv.t()) * 0.5;
    Ok(sym)
}

/// Median of the pairwise Euclidean distances between rows (lower median
/// for even counts). Errors when all rows coincide, since a zero kernel
/// width is unusable.
pub fn median_pairwise_distance(z: &Dense) -> Result<f64> {
    let n = z.nrows();
    if n < 2 {
        return Err(Error::arg("median_pairwise_distance", "need at least 2 rows"));
    }
    let g = matmul_nt(z, z)?;
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let sq = (g[[i, i]] + g[[j, j]] - 2.0 * g[[i, j]]).max(0.0);
            dists.push(sq.sqrt());
        }
    }
    let mid = (dists.len() - 1) / 2;
    let (_, median, _) =
        dists.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).expect("finite distances"));
    let median = *median;
    if median <= 0.0 {
        return Err(Error::numeric(
            "median_pairwise_distance",
            "median distance is zero (duplicate embeddings); supply sigma explicitly",
        ));
    }
    Ok(median)
}

/// Lower-triangular Cholesky factor of `m + jitter I`, or `None` when a
/// pivot is non-positive.
fn cholesky_lower(m: &Dense, jitter: f64) -> Option<Dense> {
    let n = m.nrows();
    let mut l = Dense::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = m[[i, j]];
            if i == j {
                sum += jitter;
            }
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[[i, j]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Some(l)
}

/// Factors a symmetric matrix that should be PSD, escalating a diagonal
/// jitter up to 1e-8 before giving up.
fn cholesky_psd(m: &Dense, op: &str) -> Result<Dense> {
    for jitter in [0.0, 1e-12, 1e-10, 1e-8] {
        if let Some(l) = cholesky_lower(m, jitter) {
            return Ok(l);
        }
    }
    Err(Error::numeric(op, "matrix is not positive semi-definite (jitter up to 1e-8 tried)"))
}

/// Inverse of a symmetric positive definite matrix via its Cholesky factor.
fn cholesky_inverse(m: &Dense, op: &str) -> Result<Dense> {
    let l = cholesky_psd(m, op)?;
    let n = m.nrows();
    let mut inv = Dense::zeros((n, n));
    let mut y = vec![0.0f64; n];
    for col in 0..n {
        // Forward solve L y = e_col.
        for i in 0..n {
            let mut sum = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                sum -= l[[i, k]] * y[k];
            }
            y[i] = sum / l[[i, i]];
        }
        // Backward solve L^T x = y.
        for i in (0..n).rev() {
            let mut sum = y[i];
            for k in (i + 1)..n {
                sum -= l[[k, i]] * inv[[k, col]];
            }
            inv[[i, col]] = sum / l[[i, i]];
        }
    }
    Ok(inv)
}
