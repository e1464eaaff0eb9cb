//! Append-only autodiff tape.
//!
//! Recording an op computes its value eagerly and stores the operands needed
//! for the backward pass. Node handles are plain indices ([`TensorId`]), the
//! tape is topologically ordered by construction, and [`Tape::backward`]
//! walks it once in reverse. A fresh tape is built per training step; there
//! is no graph reuse or in-place mutation of recorded values.
//!
//! Gradients only flow where they are needed: a node requires gradients when
//! it was registered via [`Tape::param`] or any operand requires them, and
//! the backward pass skips accumulation into nodes that do not.

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;
use crate::tensor::{all_finite, matmul, matmul_nt, matmul_tn, Dense};
use ndarray::s;

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(usize);

enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    /// `a * b^T` without materializing the transpose.
    MatmulNt(TensorId, TensorId),
    /// Constant sparse left operand times differentiable dense right operand.
    Spmm(SparseMatrix, TensorId),
    Transpose(TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Scale(TensorId, f64),
    /// `x + row` with `row` broadcast over the rows of `x`.
    AddRowBroadcast(TensorId, TensorId),
    Relu(TensorId),
    Sigmoid(TensorId),
    Elu(TensorId),
    Exp(TensorId),
    Log(TensorId),
    /// Output row `i` is input row `perm[i]`.
    PermuteRows(TensorId, Vec<usize>),
    /// Column means as a single row.
    RowMean(TensorId),
    /// Rows rescaled to unit Euclidean norm (norms below `eps` divide by `eps`).
    L2NormalizeRows { x: TensorId, eps: f64 },
    /// Main diagonal of a square matrix as an n by 1 column.
    Diag(TensorId),
    Hstack(Vec<TensorId>),
    /// Row-wise log-sum-exp, n by k to n by 1.
    LseRows(TensorId),
    /// Row-wise log of `pos_weight * exp(full[i,i]) + sum_{j != i}
    /// exp(full[i,j]) + sum_{j != i} exp(masked[i,j])`, the shared
    /// denominator shape of per-anchor contrastive losses.
    LsePairMasked { full: TensorId, masked: TensorId, pos_weight: f64 },
    MeanAll(TensorId),
    SumAll(TensorId),
    /// Mean cross-entropy of row-wise softmax against integer labels.
    /// Softmax probabilities are cached for the backward pass.
    SoftmaxCrossEntropy { logits: TensorId, labels: Vec<usize>, probs: Dense },
}

struct Node {
    value: Dense,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one scalar output with respect to tape nodes.
///
/// After [`Tape::backward`] only leaf nodes retain gradients; interior
/// gradients are dropped as soon as they have been propagated to keep peak
/// memory at roughly two live intermediates.
pub struct Gradients {
    grads: Vec<Option<Dense>>,
}

impl Gradients {
    /// Gradient for `id`, if it was a leaf reached by backpropagation.
    pub fn get(&self, id: TensorId) -> Option<&Dense> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Removes and returns the gradient for `id`.
    pub fn take(&mut self, id: TensorId) -> Option<Dense> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a value that does not need gradients.
    pub fn constant(&mut self, value: Dense) -> TensorId {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Registers a trainable value; [`Tape::backward`] will produce its gradient.
    pub fn param(&mut self, value: Dense) -> TensorId {
        self.push_unchecked(value, Op::Leaf, true)
    }

    pub fn value(&self, id: TensorId) -> &Dense {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Scalar convenience accessor for 1 by 1 nodes.
    pub fn scalar(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.shape(id), (1, 1));
        self.nodes[id.0].value[[0, 0]]
    }

    fn push_unchecked(&mut self, value: Dense, op: Op, requires_grad: bool) -> TensorId {
        self.nodes.push(Node { value, op, requires_grad });
        TensorId(self.nodes.len() - 1)
    }

    /// Appends a computed node, enforcing the finite-values invariant.
    fn push(&mut self, name: &str, value: Dense, op: Op, requires_grad: bool) -> Result<TensorId> {
        if !all_finite(&value) {
            return Err(Error::numeric(name, "non-finite result"));
        }
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn req(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let value = matmul(self.value(a), self.value(b))?;
        let requires = self.req(a) || self.req(b);
        self.push("matmul", value, Op::Matmul(a, b), requires)
    }

    /// `a * b^T`; both operands are n-by-d row collections.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let value = matmul_nt(self.value(a), self.value(b))?;
        let requires = self.req(a) || self.req(b);
        self.push("matmul_nt", value, Op::MatmulNt(a, b), requires)
    }

    /// Sparse-dense product with a constant sparse left operand.
    pub fn spmm(&mut self, sparse: &SparseMatrix, dense: TensorId) -> Result<TensorId> {
        let value = sparse.matmul_dense(self.value(dense))?;
        let requires = self.req(dense);
        self.push("spmm", value, Op::Spmm(sparse.clone(), dense), requires)
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let value = self.value(x).t().to_owned();
        let requires = self.req(x);
        self.push("transpose", value, Op::Transpose(x), requires)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("add", a, b)?;
        let value = self.value(a) + self.value(b);
        let requires = self.req(a) || self.req(b);
        self.push("add", value, Op::Add(a, b), requires)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("sub", a, b)?;
        let value = self.value(a) - self.value(b);
        let requires = self.req(a) || self.req(b);
        self.push("sub", value, Op::Sub(a, b), requires)
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        if !c.is_finite() {
            return Err(Error::arg("scale", format!("non-finite factor {c}")));
        }
        let value = self.value(x) * c;
        let requires = self.req(x);
        self.push("scale", value, Op::Scale(x, c), requires)
    }

    /// Adds a 1 by d row vector to every row of an n by d matrix.
    pub fn add_row_broadcast(&mut self, x: TensorId, row: TensorId) -> Result<TensorId> {
        let (_, d) = self.shape(x);
        if self.shape(row) != (1, d) {
            return Err(Error::shape(
                "add_row_broadcast",
                format!("x is {:?} but row is {:?}", self.shape(x), self.shape(row)),
            ));
        }
        let value = self.value(x) + &self.value(row).row(0);
        let requires = self.req(x) || self.req(row);
        self.push("add_row_broadcast", value, Op::AddRowBroadcast(x, row), requires)
    }

    /// Rectified linear unit. The derivative at exactly zero is taken as zero.
    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let value = self.value(x).mapv(|v| v.max(0.0));
        let requires = self.req(x);
        self.push("relu", value, Op::Relu(x), requires)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        let value = self.value(x).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let requires = self.req(x);
        self.push("sigmoid", value, Op::Sigmoid(x), requires)
    }

    /// Exponential linear unit with unit alpha: `x` for `x >= 0`,
    /// `exp(x) - 1` otherwise.
    pub fn elu(&mut self, x: TensorId) -> Result<TensorId> {
        let value = self.value(x).mapv(|v| if v >= 0.0 { v } else { v.exp() - 1.0 });
        let requires = self.req(x);
        self.push("elu", value, Op::Elu(x), requires)
    }

    pub fn exp(&mut self, x: TensorId) -> Result<TensorId> {
        let value = self.value(x).mapv(f64::exp);
        let requires = self.req(x);
        self.push("exp", value, Op::Exp(x), requires)
    }

    /// Natural logarithm; inputs must be strictly positive.
    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        if let Some(v) = self.value(x).iter().find(|v| **v <= 0.0) {
            return Err(Error::numeric("log", format!("non-positive input {v}")));
        }
        let value = self.value(x).mapv(f64::ln);
        let requires = self.req(x);
        self.push("log", value, Op::Log(x), requires)
    }

    /// Reorders rows so that output row `i` is input row `perm[i]`.
    /// `perm` must be a permutation of `0..n`.
    pub fn permute_rows(&mut self, x: TensorId, perm: &[usize]) -> Result<TensorId> {
        let (n, d) = self.shape(x);
        validate_permutation(perm, n, "permute_rows")?;
        let src = self.value(x);
        let mut value = Dense::zeros((n, d));
        for (i, &p) in perm.iter().enumerate() {
            value.row_mut(i).assign(&src.row(p));
        }
        let requires = self.req(x);
        self.push("permute_rows", value, Op::PermuteRows(x, perm.to_vec()), requires)
    }

    /// Arithmetic mean over rows, n by d to 1 by d.
    pub fn row_mean(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, d) = self.shape(x);
        if n == 0 || d == 0 {
            return Err(Error::arg("row_mean", "empty input"));
        }
        let mut value = Dense::zeros((1, d));
        for row in self.value(x).rows() {
            value.row_mut(0).scaled_add(1.0, &row);
        }
        value /= n as f64;
        let requires = self.req(x);
        self.push("row_mean", value, Op::RowMean(x), requires)
    }

    /// Rescales each row to unit Euclidean norm; rows with norm below `eps`
    /// are divided by `eps` instead, so the zero row stays zero.
    pub fn l2_normalize_rows(&mut self, x: TensorId, eps: f64) -> Result<TensorId> {
        if !eps.is_finite() || eps <= 0.0 {
            return Err(Error::arg("l2_normalize_rows", format!("eps must be positive, got {eps}")));
        }
        let src = self.value(x);
        let mut value = src.clone();
        for mut row in value.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row /= norm.max(eps);
        }
        let requires = self.req(x);
        self.push(
            "l2_normalize_rows",
            value,
            Op::L2NormalizeRows { x, eps },
            requires,
        )
    }

    /// Main diagonal of a square matrix as an n by 1 column.
    pub fn diag(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, m) = self.shape(x);
        if n != m {
            return Err(Error::shape("diag", format!("matrix is {n}x{m}")));
        }
        let src = self.value(x);
        let value = Dense::from_shape_fn((n, 1), |(i, _)| src[[i, i]]);
        let requires = self.req(x);
        self.push("diag", value, Op::Diag(x), requires)
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn hstack(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::arg("hstack", "no inputs"));
        }
        let n = self.shape(xs[0]).0;
        let mut total = 0;
        for &x in xs {
            let (r, c) = self.shape(x);
            if r != n {
                return Err(Error::shape("hstack", format!("row counts {n} vs {r}")));
            }
            total += c;
        }
        let mut value = Dense::zeros((n, total));
        let mut off = 0;
        for &x in xs {
            let c = self.shape(x).1;
            value.slice_mut(s![.., off..off + c]).assign(self.value(x));
            off += c;
        }
        let requires = xs.iter().any(|&x| self.req(x));
        self.push("hstack", value, Op::Hstack(xs.to_vec()), requires)
    }

    /// Row-wise log-sum-exp with max-shift stabilization, n by k to n by 1.
    pub fn lse_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, k) = self.shape(x);
        if k == 0 {
            return Err(Error::arg("lse_rows", "rows are empty"));
        }
        let src = self.value(x);
        let value = Dense::from_shape_fn((n, 1), |(i, _)| {
            let row = src.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
            m + sum.ln()
        });
        let requires = self.req(x);
        self.push("lse_rows", value, Op::LseRows(x), requires)
    }

    /// Per-row contrastive denominator in log space.
    ///
    /// For square same-shape `full` and `masked`, row `i` of the output is
    ///
    /// ```text
    /// log( pos_weight * exp(full[i,i])
    ///      + sum_{j != i} exp(full[i,j])
    ///      + sum_{j != i} exp(masked[i,j]) )
    /// ```
    ///
    /// computed with max-shift stabilization. `pos_weight` is 1 for the
    /// standard normalized-temperature objective; other non-negative values
    /// reweight the positive pair inside the denominator.
    pub fn lse_pair_masked(
        &mut self,
        full: TensorId,
        masked: TensorId,
        pos_weight: f64,
    ) -> Result<TensorId> {
        let (n, m) = self.shape(full);
        if n != m {
            return Err(Error::shape("lse_pair_masked", format!("full is {n}x{m}")));
        }
        if self.shape(masked) != (n, m) {
            return Err(Error::shape(
                "lse_pair_masked",
                format!("full is {n}x{m} but masked is {:?}", self.shape(masked)),
            ));
        }
        if !pos_weight.is_finite() || pos_weight < 0.0 {
            return Err(Error::arg(
                "lse_pair_masked",
                format!("pos_weight must be finite and non-negative, got {pos_weight}"),
            ));
        }
        let f = self.value(full);
        let g = self.value(masked);
        let mut value = Dense::zeros((n, 1));
        for i in 0..n {
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                if j != i {
                    mx = mx.max(f[[i, j]]).max(g[[i, j]]);
                }
            }
            if pos_weight > 0.0 {
                mx = mx.max(f[[i, i]]);
            }
            let mut sum = 0.0;
            for j in 0..n {
                if j != i {
                    sum += (f[[i, j]] - mx).exp() + (g[[i, j]] - mx).exp();
                }
            }
            if pos_weight > 0.0 {
                sum += pos_weight * (f[[i, i]] - mx).exp();
            }
            value[[i, 0]] = mx + sum.ln();
        }
        let requires = self.req(full) || self.req(masked);
        self.push(
            "lse_pair_masked",
            value,
            Op::LsePairMasked { full, masked, pos_weight },
            requires,
        )
    }

    /// Mean of all elements as a 1 by 1 matrix.
    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, d) = self.shape(x);
        if n * d == 0 {
            return Err(Error::arg("mean_all", "empty input"));
        }
        let value = Dense::from_elem((1, 1), self.value(x).sum() / (n * d) as f64);
        let requires = self.req(x);
        self.push("mean_all", value, Op::MeanAll(x), requires)
    }

    /// Sum of all elements as a 1 by 1 matrix.
    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let value = Dense::from_elem((1, 1), self.value(x).sum());
        let requires = self.req(x);
        self.push("sum_all", value, Op::SumAll(x), requires)
    }

    /// Mean softmax cross-entropy of n by c logits against n integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let (n, c) = self.shape(logits);
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{n} rows but {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::arg(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        let src = self.value(logits);
        let mut probs = Dense::zeros((n, c));
        let mut loss = 0.0;
        for i in 0..n {
            let row = src.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                probs[[i, j]] = e;
                sum += e;
            }
            for j in 0..c {
                probs[[i, j]] /= sum;
            }
            loss -= (row[labels[i]] - m - sum.ln()) / n as f64;
        }
        let value = Dense::from_elem((1, 1), loss);
        let requires = self.req(logits);
        self.push(
            "softmax_cross_entropy",
            value,
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
            requires,
        )
    }

    fn check_same_shape(&self, op: &str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar node.
    ///
    /// Returns gradients for every leaf that influences `loss` and requires
    /// gradients. Errors if `loss` is not 1 by 1 or a propagated gradient
    /// turns non-finite.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::arg(
                "backward",
                format!("loss must be a 1x1 scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Dense>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Dense::from_elem((1, 1), 1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if !all_finite(&g) {
                return Err(Error::numeric("backward", format!("non-finite gradient at node {idx}")));
            }
            self.propagate(idx, &g, &mut grads)?;
            // Interior gradients are no longer needed once propagated.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Dense, grads: &mut [Option<Dense>]) -> Result<()> {
        let val = |id: TensorId| &self.nodes[id.0].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.req(*a) {
                    acc(&mut grads[a.0], matmul_nt(g, val(*b))?);
                }
                if self.req(*b) {
                    acc(&mut grads[b.0], matmul_tn(val(*a), g)?);
                }
            }
            Op::MatmulNt(a, b) => {
                if a == b {
                    // d/dA of A A^T applied to G is (G + G^T) A in one product.
                    let sym = g + &g.t();
                    acc(&mut grads[a.0], matmul(&sym, val(*a))?);
                } else {
                    if self.req(*a) {
                        acc(&mut grads[a.0], matmul(g, val(*b))?);
                    }
                    if self.req(*b) {
                        acc(&mut grads[b.0], matmul_tn(g, val(*a))?);
                    }
                }
            }
            Op::Spmm(s, d) => {
                acc(&mut grads[d.0], s.matmul_dense_transposed(g)?);
            }
            Op::Transpose(x) => {
                acc(&mut grads[x.0], g.t().to_owned());
            }
            Op::Add(a, b) => {
                if self.req(*a) {
                    acc(&mut grads[a.0], g.clone());
                }
                if self.req(*b) {
                    acc(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.req(*a) {
                    acc(&mut grads[a.0], g.clone());
                }
                if self.req(*b) {
                    acc(&mut grads[b.0], g.mapv(|v| -v));
                }
            }
            Op::Scale(x, c) => {
                acc(&mut grads[x.0], g * *c);
            }
            Op::AddRowBroadcast(x, row) => {
                if self.req(*x) {
                    acc(&mut grads[x.0], g.clone());
                }
                if self.req(*row) {
                    let mut sum = Dense::zeros((1, g.ncols()));
                    for r in g.rows() {
                        sum.row_mut(0).scaled_add(1.0, &r);
                    }
                    acc(&mut grads[row.0], sum);
                }
            }
            Op::Relu(x) => {
                let mut dx = g.clone();
                ndarray::Zip::from(&mut dx).and(val(*x)).for_each(|d, &v| {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                });
                acc(&mut grads[x.0], dx);
            }
            Op::Sigmoid(x) => {
                let out = &self.nodes[idx].value;
                let mut dx = g.clone();
                ndarray::Zip::from(&mut dx).and(out).for_each(|d, &y| *d *= y * (1.0 - y));
                acc(&mut grads[x.0], dx);
            }
            Op::Elu(x) => {
                let out = &self.nodes[idx].value;
                let mut dx = g.clone();
                ndarray::Zip::from(&mut dx)
                    .and(val(*x))
                    .and(out)
                    .for_each(|d, &v, &y| {
                        if v < 0.0 {
                            // For negative inputs exp(x) equals out + 1.
                            *d *= y + 1.0;
                        }
                    });
                acc(&mut grads[x.0], dx);
            }
            Op::Exp(x) => {
                let out = &self.nodes[idx].value;
                acc(&mut grads[x.0], g * out);
            }
            Op::Log(x) => {
                acc(&mut grads[x.0], g / val(*x));
            }
            Op::PermuteRows(x, perm) => {
                let mut dx = Dense::zeros(val(*x).dim());
                for (i, &p) in perm.iter().enumerate() {
                    dx.row_mut(p).scaled_add(1.0, &g.row(i));
                }
                acc(&mut grads[x.0], dx);
            }
            Op::RowMean(x) => {
                let (n, d) = val(*x).dim();
                let mut dx = Dense::zeros((n, d));
                let scaled = g.row(0).mapv(|v| v / n as f64);
                for mut row in dx.rows_mut() {
                    row.assign(&scaled);
                }
                acc(&mut grads[x.0], dx);
            }
            Op::L2NormalizeRows { x, eps } => {
                let src = val(*x);
                let out = &self.nodes[idx].value;
                let mut dx = Dense::zeros(src.dim());
                for i in 0..src.nrows() {
                    let norm = src.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let gi = g.row(i);
                    let mut drow = dx.row_mut(i);
                    if norm > *eps {
                        // d(x / |x|) pulled back: (g - (g . y) y) / |x| with y the unit row.
                        let yi = out.row(i);
                        let dot: f64 = gi.iter().zip(yi.iter()).map(|(a, b)| a * b).sum();
                        for j in 0..src.ncols() {
                            drow[j] = (gi[j] - dot * yi[j]) / norm;
                        }
                    } else {
                        // Below eps the map is linear division by eps.
                        for j in 0..src.ncols() {
                            drow[j] = gi[j] / eps;
                        }
                    }
                }
                acc(&mut grads[x.0], dx);
            }
            Op::Diag(x) => {
                let n = val(*x).nrows();
                let mut dx = Dense::zeros((n, n));
                for i in 0..n {
                    dx[[i, i]] = g[[i, 0]];
                }
                acc(&mut grads[x.0], dx);
            }
            Op::Hstack(xs) => {
                let mut off = 0;
                for &x in xs {
                    let c = val(x).ncols();
                    if self.req(x) {
                        acc(&mut grads[x.0], g.slice(s![.., off..off + c]).to_owned());
                    }
                    off += c;
                }
            }
            Op::LseRows(x) => {
                let src = val(*x);
                let out = &self.nodes[idx].value;
                let mut dx = Dense::zeros(src.dim());
                for i in 0..src.nrows() {
                    let gi = g[[i, 0]];
                    let oi = out[[i, 0]];
                    for j in 0..src.ncols() {
                        dx[[i, j]] = gi * (src[[i, j]] - oi).exp();
                    }
                }
                acc(&mut grads[x.0], dx);
            }
            Op::LsePairMasked { full, masked, pos_weight } => {
                let f = val(*full);
                let m = val(*masked);
                let out = &self.nodes[idx].value;
                let n = f.nrows();
                let mut df = Dense::zeros((n, n));
                let mut dm = Dense::zeros((n, n));
                for i in 0..n {
                    let gi = g[[i, 0]];
                    let oi = out[[i, 0]];
                    for j in 0..n {
                        if j == i {
                            df[[i, i]] = gi * pos_weight * (f[[i, i]] - oi).exp();
                        } else {
                            df[[i, j]] = gi * (f[[i, j]] - oi).exp();
                            dm[[i, j]] = gi * (m[[i, j]] - oi).exp();
                        }
                    }
                }
                if self.req(*full) {
                    acc(&mut grads[full.0], df);
                }
                if self.req(*masked) {
                    acc(&mut grads[masked.0], dm);
                }
            }
            Op::MeanAll(x) => {
                let (n, d) = val(*x).dim();
                let c = g[[0, 0]] / (n * d) as f64;
                acc(&mut grads[x.0], Dense::from_elem((n, d), c));
            }
            Op::SumAll(x) => {
                acc(&mut grads[x.0], Dense::from_elem(val(*x).dim(), g[[0, 0]]));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let n = probs.nrows();
                let mut dx = probs * (g[[0, 0]] / n as f64);
                for (i, &y) in labels.iter().enumerate() {
                    dx[[i, y]] -= g[[0, 0]] / n as f64;
                }
                acc(&mut grads[logits.0], dx);
            }
        }
        Ok(())
    }
}

fn acc(slot: &mut Option<Dense>, delta: Dense) {
    match slot {
        Some(existing) => *existing += &delta,
        None => *slot = Some(delta),
    }
}

fn validate_permutation(perm: &[usize], n: usize, op: &str) -> Result<()> {
    if perm.len() != n {
        return Err(Error::arg(op, format!("permutation length {} for {n} rows", perm.len())));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::arg(op, format!("not a permutation: index {p}")));
        }
        seen[p] = true;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Dense {
        Dense::from_shape_vec((rows, cols), data).unwrap()
    }

    #[test]
    fn matmul_forward_and_backward() {
        let mut t = Tape::new();
        let a = t.param(mat(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = t.param(mat(2, 1, vec![5.0, 6.0]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &mat(2, 1, vec![17.0, 39.0]));
        let loss = t.sum_all(c).unwrap();
        let grads = t.backward(loss).unwrap();
        // d(sum(A b))/dA = 1 b^T per row, d/db = column sums of A.
        assert_eq!(grads.get(a).unwrap(), &mat(2, 2, vec![5.0, 6.0, 5.0, 6.0]));
        assert_eq!(grads.get(b).unwrap(), &mat(2, 1, vec![4.0, 6.0]));
    }

    #[test]
    fn matmul_nt_with_shared_operand() {
        // f = sum(Z Z^T) with Z 2x2; df/dZ = (ones + ones) Z = 2 * ones * Z.
        let mut t = Tape::new();
        let z = t.param(mat(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let p = t.matmul_nt(z, z).unwrap();
        let loss = t.sum_all(p).unwrap();
        let grads = t.backward(loss).unwrap();
        let want = mat(2, 2, vec![8.0, 12.0, 8.0, 12.0]);
        assert!(crate::tensor::max_abs_diff(grads.get(z).unwrap(), &want) < 1e-12);
    }

    #[test]
    fn l2_normalize_rows_unit_norm_and_zero_row() {
        let mut t = Tape::new();
        let x = t.param(mat(2, 2, vec![3.0, 4.0, 0.0, 0.0]));
        let y = t.l2_normalize_rows(x, 1e-12).unwrap();
        assert!((t.value(y)[[0, 0]] - 0.6).abs() < 1e-15);
        assert!((t.value(y)[[0, 1]] - 0.8).abs() < 1e-15);
        assert_eq!(t.value(y)[[1, 0]], 0.0);
        // Gradient of sum through a normalized row is orthogonal to the row.
        let loss = t.sum_all(y).unwrap();
        let grads = t.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();
        let dot = gx[[0, 0]] * 3.0 + gx[[0, 1]] * 4.0;
        assert!(dot.abs() < 1e-12, "gradient not tangent: {dot}");
    }

    #[test]
    fn lse_rows_matches_direct_computation() {
        let mut t = Tape::new();
        let x = t.constant(mat(1, 3, vec![0.0, 1.0, 2.0]));
        let y = t.lse_rows(x).unwrap();
        let want = (1.0f64.exp() + 2.0f64.exp() + 1.0).ln();
        assert!((t.value(y)[[0, 0]] - want).abs() < 1e-12);
    }

    #[test]
    fn lse_pair_masked_excludes_diagonal_of_masked_and_weights_positive() {
        // 2x2 case, all entries distinct so mistakes show up.
        let f = mat(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let m = mat(2, 2, vec![5.0, 6.0, 7.0, 8.0]);
        let mut t = Tape::new();
        let fid = t.param(f.clone());
        let mid = t.param(m.clone());
        let out = t.lse_pair_masked(fid, mid, 1.0).unwrap();
        for i in 0..2 {
            let j = 1 - i;
            let want = (f[[i, i]].exp() + f[[i, j]].exp() + m[[i, j]].exp()).ln();
            assert!((t.value(out)[[i, 0]] - want).abs() < 1e-12);
        }
        // pos_weight zero removes the diagonal term entirely.
        let mut t2 = Tape::new();
        let fid2 = t2.constant(f.clone());
        let mid2 = t2.constant(m.clone());
        let out2 = t2.lse_pair_masked(fid2, mid2, 0.0).unwrap();
        let want = (f[[0, 1]].exp() + m[[0, 1]].exp()).ln();
        assert!((t2.value(out2)[[0, 0]] - want).abs() < 1e-12);
    }

    #[test]
    fn permute_rows_round_trip_gradient() {
        let mut t = Tape::new();
        let x = t.param(mat(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = t.permute_rows(x, &[2, 0, 1]).unwrap();
        assert_eq!(t.value(y).row(0).to_vec(), vec![5.0, 6.0]);
        // Weight rows differently so the permutation of gradients is visible.
        let w = t.constant(mat(3, 2, vec![1.0, 1.0, 10.0, 10.0, 100.0, 100.0]));
        let prod = t.matmul_nt(y, w).unwrap();
        let d = t.diag(prod).unwrap();
        let loss = t.sum_all(d).unwrap();
        let grads = t.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();
        // Output row 0 (input row 2) was weighted by 1, row 1 (input 0) by 10,
        // row 2 (input 1) by 100.
        assert_eq!(gx[[2, 0]], 1.0);
        assert_eq!(gx[[0, 0]], 10.0);
        assert_eq!(gx[[1, 0]], 100.0);
    }

    #[test]
    fn softmax_cross_entropy_uniform_logits() {
        let mut t = Tape::new();
        let logits = t.param(Dense::zeros((2, 3)));
        let loss = t.softmax_cross_entropy(logits, &[0, 2]).unwrap();
        assert!((t.scalar(loss) - 3.0f64.ln()).abs() < 1e-12);
        let grads = t.backward(loss).unwrap();
        let g = grads.get(logits).unwrap();
        // (p - onehot)/n with p = 1/3.
        assert!((g[[0, 0]] - (1.0 / 3.0 - 1.0) / 2.0).abs() < 1e-12);
        assert!((g[[0, 1]] - (1.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let mut t = Tape::new();
        let x = t.constant(mat(1, 1, vec![1000.0]));
        let e = t.exp(x);
        assert!(e.is_err(), "exp(1000) must overflow to an error");
        let y = t.constant(mat(1, 1, vec![-1.0]));
        assert!(t.log(y).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.param(Dense::zeros((2, 2)));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.constant(mat(1, 2, vec![1.0, 2.0]));
        let w = t.param(mat(1, 2, vec![3.0, 4.0]));
        let s = t.add(x, w).unwrap();
        let loss = t.sum_all(s).unwrap();
        let grads = t.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert!(grads.get(w).is_some());
    }
}
