//! The shared encoder and projection heads: everything between a view and
//! the representations entering the losses.
//!
//! The encoder stacks graph-convolution layers `act(A_norm * Z * W)` without
//! biases. Both views run through one parameter set; positive pairs exist
//! because the inputs differ, not the weights. Projection heads are 2-layer
//! MLPs with biases whose outputs are row-normalized onto the unit sphere so
//! inner products downstream are cosine similarities.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::sparse::{add_self_loops, sym_normalize, SparseMatrix};
use crate::tensor::{derive_seed, xavier_init, Dense, Tape, TensorId};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Norm floor for the row normalization of projected embeddings.
pub const L2_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Elu,
    Linear,
}

/// Records `activation(x)` on the tape (`Linear` is a no-op).
pub fn apply_activation(tape: &mut Tape, activation: Activation, x: TensorId) -> Result<TensorId> {
    match activation {
        Activation::Relu => tape.relu(x),
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Elu => tape.elu(x),
        Activation::Linear => Ok(x),
    }
}

/// One adjacency paired with the node features it convolves.
#[derive(Clone, Debug)]
pub struct View {
    /// Symmetrically normalized adjacency, self loops included.
    pub adjacency_normalized: SparseMatrix,
    pub features: Dense,
}

impl View {
    pub fn new(adjacency_normalized: SparseMatrix, features: Dense) -> Result<Self> {
        let n = features.nrows();
        if adjacency_normalized.rows() != n || adjacency_normalized.cols() != n {
            return Err(Error::shape(
                "view",
                format!(
                    "adjacency is {}x{} but features have {n} rows",
                    adjacency_normalized.rows(),
                    adjacency_normalized.cols()
                ),
            ));
        }
        Ok(View { adjacency_normalized, features })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }
}

/// The observed-topology view: `sym_normalize(A + I)` with the raw features.
pub fn topology_view(g: &Graph) -> Result<View> {
    let adj = sym_normalize(&add_self_loops(&g.adjacency)?)?;
    View::new(adj, g.features.clone())
}

/// Stacked graph-convolution weights plus the shared activation.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    /// Layer `l` maps `dims[l]` to `dims[l+1]` columns.
    pub weights: Vec<Dense>,
    pub activation: Activation,
}

impl EncoderParams {
    /// Xavier-initialized weights for the dimension chain `dims`
    /// (input features first, embedding dim last).
    pub fn new(dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::arg("encoder", "need at least input and output dims"));
        }
        let weights = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| xavier_init(w[0], w[1], derive_seed(seed, l as u64)))
            .collect::<Result<_>>()?;
        Ok(EncoderParams { weights, activation })
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().expect("at least one layer").ncols()
    }

    fn validate_chain(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::arg("encoder", "no layers"));
        }
        for (l, pair) in self.weights.windows(2).enumerate() {
            if pair[0].ncols() != pair[1].nrows() {
                return Err(Error::shape(
                    "encoder",
                    format!(
                        "layer {l} outputs {} columns but layer {} expects {} rows",
                        pair[0].ncols(),
                        l + 1,
                        pair[1].nrows()
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// A 2-layer projection MLP `d -> d -> d` with biases.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub w1: Dense,
    pub b1: Dense,
    pub w2: Dense,
    pub b2: Dense,
    pub activation: Activation,
}

impl ProjectionHead {
    pub fn new(dim: usize, activation: Activation, seed: u64) -> Result<Self> {
        Ok(ProjectionHead {
            w1: xavier_init(dim, dim, derive_seed(seed, 0))?,
            b1: Dense::zeros((1, dim)),
            w2: xavier_init(dim, dim, derive_seed(seed, 1))?,
            b2: Dense::zeros((1, dim)),
            activation,
        })
    }

    /// Identity weights, zero biases, linear activation: projection becomes
    /// plain row normalization. Useful as a test fixture.
    pub fn identity(dim: usize) -> Self {
        ProjectionHead {
            w1: Dense::eye(dim),
            b1: Dense::zeros((1, dim)),
            w2: Dense::eye(dim),
            b2: Dense::zeros((1, dim)),
            activation: Activation::Linear,
        }
    }
}

/// Node head and graph head.
#[derive(Clone, Debug)]
pub struct ProjectionParams {
    pub node: ProjectionHead,
    pub graph: ProjectionHead,
}

/// Full trainable state: encoder plus both projection heads.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub projection: ProjectionParams,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate_chain()?;
        let d = self.encoder.output_dim();
        for (name, head) in [("node", &self.projection.node), ("graph", &self.projection.graph)] {
            for (tname, t) in [
                ("w1", &head.w1),
                ("b1", &head.b1),
                ("w2", &head.w2),
                ("b2", &head.b2),
            ] {
                let want = if tname.starts_with('b') { (1, d) } else { (d, d) };
                if t.dim() != want {
                    return Err(Error::shape(
                        "projection",
                        format!("{name} head {tname} is {:?}, expected {want:?}", t.dim()),
                    ));
                }
            }
        }
        Ok(())
    }

    /// All trainable tensors in the canonical order used for optimizer
    /// state and gradients: encoder layers, node head (w1, b1, w2, b2),
    /// graph head (w1, b1, w2, b2).
    pub fn tensors(&self) -> Vec<&Dense> {
        let mut out: Vec<&Dense> = self.encoder.weights.iter().collect();
        for head in [&self.projection.node, &self.projection.graph] {
            out.extend([&head.w1, &head.b1, &head.w2, &head.b2]);
        }
        out
    }

    /// Mutable counterpart of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Dense> {
        let mut out: Vec<&mut Dense> = self.encoder.weights.iter_mut().collect();
        for head in [&mut self.projection.node, &mut self.projection.graph] {
            out.push(&mut head.w1);
            out.push(&mut head.b1);
            out.push(&mut head.w2);
            out.push(&mut head.b2);
        }
        out
    }
}

/// Tape handles for one projection head.
#[derive(Clone, Copy, Debug)]
pub struct HeadIds {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
    pub activation: Activation,
}

/// Tape handles for all model parameters.
#[derive(Clone, Debug)]
pub struct ModelIds {
    pub encoder: Vec<TensorId>,
    pub node: HeadIds,
    pub graph: HeadIds,
}

impl ModelIds {
    /// Handles in the same canonical order as [`ModelParams::tensors`].
    pub fn flat(&self) -> Vec<TensorId> {
        let mut out = self.encoder.clone();
        for head in [&self.node, &self.graph] {
            out.extend([head.w1, head.b1, head.w2, head.b2]);
        }
        out
    }
}

// One canonical walk in flat-slot order shared by training, plain
// evaluation, and finite-difference checks substituting a single slot.
fn walk_params(
    tape: &mut Tape,
    params: &ModelParams,
    trainable: bool,
    override_slot: Option<(usize, TensorId)>,
) -> ModelIds {
    let mut slot = 0usize;
    let mut next = |tape: &mut Tape, v: &Dense| -> TensorId {
        let id = match override_slot {
            Some((k, id)) if k == slot => id,
            _ if trainable => tape.param(v.clone()),
            _ => tape.constant(v.clone()),
        };
        slot += 1;
        id
    };
    let encoder = params
        .encoder
        .weights
        .iter()
        .map(|w| next(tape, w))
        .collect();
    let mut head = |tape: &mut Tape, h: &ProjectionHead| HeadIds {
        w1: next(tape, &h.w1),
        b1: next(tape, &h.b1),
        w2: next(tape, &h.w2),
        b2: next(tape, &h.b2),
        activation: h.activation,
    };
    let node = head(tape, &params.projection.node);
    let graph = head(tape, &params.projection.graph);
    ModelIds { encoder, node, graph }
}

/// Puts every parameter tensor on the tape, as trainable leaves or constants.
pub fn register_params(tape: &mut Tape, params: &ModelParams, trainable: bool) -> ModelIds {
    walk_params(tape, params, trainable, None)
}

/// Registers all parameters as trainable leaves except flat slot
/// `override_slot` (indexing [`ModelParams::tensors`] order), which is
/// replaced by `replacement`. Finite-difference checks use this to vary one
/// tensor at a time while the rest stay fixed.
pub fn register_params_substituting(
    tape: &mut Tape,
    params: &ModelParams,
    override_slot: usize,
    replacement: TensorId,
) -> ModelIds {
    walk_params(tape, params, true, Some((override_slot, replacement)))
}

/// One graph convolution: `activation(A_norm * (Z * W))`.
pub fn gcn_layer(
    tape: &mut Tape,
    a_norm: &SparseMatrix,
    z: TensorId,
    w: TensorId,
    activation: Activation,
) -> Result<TensorId> {
    let zw = tape.matmul(z, w)?;
    let agg = tape.spmm(a_norm, zw)?;
    apply_activation(tape, activation, agg)
}

/// Runs the encoder over a view with parameters already on the tape.
///
/// `first_layer_input` lets callers reuse a precomputed `X * W_0` node
/// (shared across views or row-permuted for corruptions); when `None` the
/// features enter as a constant.
pub fn encode_with_ids(
    tape: &mut Tape,
    view: &View,
    encoder_ids: &[TensorId],
    activation: Activation,
    first_layer_input: Option<TensorId>,
) -> Result<TensorId> {
    let mut h = match first_layer_input {
        Some(xw) => {
            let agg = tape.spmm(&view.adjacency_normalized, xw)?;
            apply_activation(tape, activation, agg)?
        }
        None => {
            let x = tape.constant(view.features.clone());
            gcn_layer(tape, &view.adjacency_normalized, x, encoder_ids[0], activation)?
        }
    };
    for &w in &encoder_ids[1..] {
        h = gcn_layer(tape, &view.adjacency_normalized, h, w, activation)?;
    }
    Ok(h)
}

/// Plain forward pass without gradient tracking; returns the embedding
/// matrix used downstream (probe, kNN view construction, export).
pub fn encode(view: &View, params: &EncoderParams) -> Result<Dense> {
    if params.input_dim() != view.features.ncols() {
        return Err(Error::shape(
            "encode",
            format!(
                "encoder expects {} input features, view has {}",
                params.input_dim(),
                view.features.ncols()
            ),
        ));
    }
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params
        .weights
        .iter()
        .map(|w| tape.constant(w.clone()))
        .collect();
    let h = encode_with_ids(&mut tape, view, &ids, params.activation, None)?;
    Ok(tape.value(h).clone())
}

/// Pools node embeddings into a graph summary: `sigmoid(row_mean(H))`.
pub fn readout(tape: &mut Tape, h: TensorId) -> Result<TensorId> {
    let mean = tape.row_mean(h)?;
    tape.sigmoid(mean)
}

fn project_rows(tape: &mut Tape, head: &HeadIds, input: TensorId) -> Result<TensorId> {
    let z1 = tape.matmul(input, head.w1)?;
    let z1 = tape.add_row_broadcast(z1, head.b1)?;
    let z1 = apply_activation(tape, head.activation, z1)?;
    let z2 = tape.matmul(z1, head.w2)?;
    let z2 = tape.add_row_broadcast(z2, head.b2)?;
    tape.l2_normalize_rows(z2, L2_EPS)
}

/// Maps node embeddings through the node head and row-normalizes, producing
/// the vectors entering the node-level loss.
pub fn project_nodes(tape: &mut Tape, head: &HeadIds, z: TensorId) -> Result<TensorId> {
    project_rows(tape, head, z)
}

/// Maps a graph summary through the graph head and normalizes it.
pub fn project_graph(tape: &mut Tape, head: &HeadIds, c: TensorId) -> Result<TensorId> {
    project_rows(tape, head, c)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MLGP";
const CHECKPOINT_VERSION: u32 = 1;

fn activation_tag(a: Activation) -> u8 {
    match a {
        Activation::Relu => 0,
        Activation::Sigmoid => 1,
        Activation::Elu => 2,
        Activation::Linear => 3,
    }
}

fn activation_from_tag(t: u8) -> Option<Activation> {
    match t {
        0 => Some(Activation::Relu),
        1 => Some(Activation::Sigmoid),
        2 => Some(Activation::Elu),
        3 => Some(Activation::Linear),
        _ => None,
    }
}

fn push_matrix(out: &mut Vec<u8>, m: &Dense) {
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes model parameters to the binary checkpoint format:
/// magic `MLGP`, version, encoder (activation, layer count, matrices),
/// then both heads (activation, four matrices each). All integers and
/// floats little-endian; matrices row-major `f64`.
pub fn save_model(params: &ModelParams, path: &Path) -> Result<()> {
    params.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(activation_tag(params.encoder.activation));
    out.extend_from_slice(&(params.encoder.weights.len() as u32).to_le_bytes());
    for w in &params.encoder.weights {
        push_matrix(&mut out, w);
    }
    for head in [&params.projection.node, &params.projection.graph] {
        out.push(activation_tag(head.activation));
        for m in [&head.w1, &head.b1, &head.w2, &head.b2] {
            push_matrix(&mut out, m);
        }
    }
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    f.write_all(&out)
        .map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint {
                path: self.path.to_string(),
                reason: format!(
                    "truncated: needed {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn matrix(&mut self) -> Result<Dense> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let data = self.take(rows * cols * 8)?;
        let flat: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(bad) = flat.iter().find(|v| !v.is_finite()) {
            return Err(Error::Checkpoint {
                path: self.path.to_string(),
                reason: format!("non-finite weight {bad}"),
            });
        }
        Dense::from_shape_vec((rows, cols), flat).map_err(|_| Error::Checkpoint {
            path: self.path.to_string(),
            reason: format!("bad matrix shape {rows}x{cols}"),
        })
    }

    fn activation(&mut self) -> Result<Activation> {
        let tag = self.u8()?;
        activation_from_tag(tag).ok_or_else(|| Error::Checkpoint {
            path: self.path.to_string(),
            reason: format!("unknown activation tag {tag}"),
        })
    }
}

/// Loads a checkpoint written by [`save_model`], rejecting bad magic,
/// unsupported versions, truncation, and trailing garbage.
pub fn load_model(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    let path_str = path.display().to_string();
    let mut r = ByteReader { bytes: &bytes, pos: 0, path: &path_str };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint {
            path: path_str.clone(),
            reason: format!("bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint {
            path: path_str.clone(),
            reason: format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
        });
    }
    let enc_act = r.activation()?;
    let layers = r.u32()? as usize;
    if layers == 0 {
        return Err(Error::Checkpoint { path: path_str.clone(), reason: "zero encoder layers".into() });
    }
    let weights = (0..layers).map(|_| r.matrix()).collect::<Result<Vec<_>>>()?;
    let head = |r: &mut ByteReader| -> Result<ProjectionHead> {
        Ok(ProjectionHead {
            activation: r.activation()?,
            w1: r.matrix()?,
            b1: r.matrix()?,
            w2: r.matrix()?,
            b2: r.matrix()?,
        })
    };
    let node = head(&mut r)?;
    let graph = head(&mut r)?;
    if r.pos != bytes.len() {
        let trailing = bytes.len() - r.pos;
        return Err(Error::Checkpoint {
            path: path_str.clone(),
            reason: format!("{trailing} trailing bytes after payload"),
        });
    }
    let params = ModelParams {
        encoder: EncoderParams { weights, activation: enc_act },
        projection: ProjectionParams { node, graph },
    };
    params.validate()?;
    Ok(params)
}
