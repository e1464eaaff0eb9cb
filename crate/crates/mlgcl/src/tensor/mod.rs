//! Dense tensors and a small reverse-mode autodiff engine.
//!
//! Values are `ndarray` matrices in `f64`; everything in the training path
//! is rank 2 (vectors are 1 by d or n by 1). The differentiation machinery
//! lives in [`tape`], the optimizer in [`adam`], and finite-difference
//! verification in [`gradcheck`].

pub mod adam;
pub mod gradcheck;
pub mod tape;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use gradcheck::{finite_diff_check, run_builtin_checks, CheckResult};
pub use tape::{Gradients, Tape, TensorId};

use crate::error::{Error, Result};
use ndarray::Array2;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The dense matrix type used across the crate.
pub type Dense = Array2<f64>;

/// Matrix product `a * b`, dispatched to BLAS by `ndarray`.
pub fn matmul(a: &Dense, b: &Dense) -> Result<Dense> {
    if a.ncols() != b.nrows() {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} times {}x{}", a.nrows(), a.ncols(), b.nrows(), b.ncols()),
        ));
    }
    Ok(a.dot(b))
}

/// Matrix product with the right operand transposed, `a * b^T`.
pub fn matmul_nt(a: &Dense, b: &Dense) -> Result<Dense> {
    if a.ncols() != b.ncols() {
        return Err(Error::shape(
            "matmul_nt",
            format!("{}x{} times ({}x{})^T", a.nrows(), a.ncols(), b.nrows(), b.ncols()),
        ));
    }
    Ok(a.dot(&b.t()))
}

/// Matrix product with the left operand transposed, `a^T * b`.
pub fn matmul_tn(a: &Dense, b: &Dense) -> Result<Dense> {
    if a.nrows() != b.nrows() {
        return Err(Error::shape(
            "matmul_tn",
            format!("({}x{})^T times {}x{}", a.nrows(), a.ncols(), b.nrows(), b.ncols()),
        ));
    }
    Ok(a.t().dot(b))
}

/// True when every element is finite.
pub fn all_finite(x: &Dense) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Largest absolute elementwise difference between two equal-shape matrices.
pub fn max_abs_diff(a: &Dense, b: &Dense) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Xavier/Glorot uniform initialization: entries drawn i.i.d. from
/// `U(-a, a)` with `a = sqrt(6 / (rows + cols))`.
///
/// The draw order is row-major and fixed by `seed`, so a given
/// `(rows, cols, seed)` triple always produces the same matrix.
pub fn xavier_init(rows: usize, cols: usize, seed: u64) -> Result<Dense> {
    if rows == 0 || cols == 0 {
        return Err(Error::arg(
            "xavier_init",
            format!("zero dimension in {rows}x{cols}"),
        ));
    }
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new(-a, a);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
    Ok(Dense::from_shape_vec((rows, cols), data).expect("length matches shape"))
}

/// Derives an independent stream seed from a master seed and a stream index.
///
/// SplitMix64 finalizer over `master + golden_ratio * (stream + 1)`; cheap,
/// stateless, and avalanching, so nearby indices give unrelated seeds.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stream.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic RNG for a derived stream.
pub fn stream_rng(master: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream))
}
