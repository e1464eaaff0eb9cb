//! Small deterministic graphs for tests, examples, and smoke runs.

use crate::error::Result;
use crate::graph::{Graph, Split};
use crate::sparse::SparseMatrix;
use crate::tensor::{derive_seed, Dense};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Six nodes in two triangles joined by one bridge edge, with features that
/// lean toward one of two class directions. Labels and a 2/2/2 split are
/// included, so every downstream stage (training, probing, result files)
/// can run on it.
pub fn toy_graph() -> Graph {
    let edges = [
        (0, 1), (1, 2), (0, 2), // first triangle
        (3, 4), (4, 5), (3, 5), // second triangle
        (2, 3), // bridge
    ];
    let mut entries = Vec::new();
    for &(a, b) in &edges {
        entries.push((a, b, 1.0));
        entries.push((b, a, 1.0));
    }
    let adjacency = SparseMatrix::from_entries(6, 6, entries).expect("static edge list");
    let features = Dense::from_shape_fn((6, 4), |(i, j)| {
        let class = i / 3;
        let base = if j == class { 1.0 } else { 0.0 };
        base + 0.1 * ((i * 4 + j) as f64 * 0.9).sin()
    });
    let labels = vec![0, 0, 0, 1, 1, 1];
    let splits = Split { train: vec![0, 3], val: vec![1, 4], test: vec![2, 5] };
    Graph::new(adjacency, features, Some(labels), Some(splits)).expect("toy graph is valid")
}

/// Stochastic block model with planted communities. Nodes in block `b` get
/// features centered on the `b`-th axis with Gaussian-ish noise, so both
/// the topology and the features carry the class signal.
pub fn sbm_graph(
    block_sizes: &[usize],
    p_in: f64,
    p_out: f64,
    feat_dim: usize,
    noise: f64,
    seed: u64,
) -> Result<Graph> {
    let n: usize = block_sizes.iter().sum();
    let mut block_of = Vec::with_capacity(n);
    for (b, &size) in block_sizes.iter().enumerate() {
        block_of.extend(std::iter::repeat_n(b, size));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    let mut entries = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if block_of[i] == block_of[j] { p_in } else { p_out };
            if rng.gen::<f64>() < p {
                entries.push((i, j, 1.0));
                entries.push((j, i, 1.0));
            }
        }
    }
    let adjacency = SparseMatrix::from_entries(n, n, entries)?;
    let mut frng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let features = Dense::from_shape_fn((n, feat_dim), |(i, j)| {
        let base = if j == block_of[i] % feat_dim { 1.0 } else { 0.0 };
        base + noise * (frng.gen::<f64>() * 2.0 - 1.0)
    });
    let labels = block_of.clone();
    Graph::new(adjacency, features, Some(labels), None)
}

/// Two well-separated point clouds as an `n x d` embedding matrix. The first
/// `n_per` rows sit near `+sep` on the first axis, the rest near `-sep`.
pub fn two_blob_embeddings(n_per: usize, d: usize, sep: f64, seed: u64) -> Dense {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Dense::from_shape_fn((2 * n_per, d), |(i, j)| {
        let center = if j == 0 {
            if i < n_per { sep } else { -sep }
        } else {
            0.0
        };
        center + 0.1 * (rng.gen::<f64>() * 2.0 - 1.0)
    })
}
