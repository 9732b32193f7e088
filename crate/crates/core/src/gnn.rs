//! GCN, GraphSAGE (max-pool) and GIN layers with jumping-knowledge
//! concatenation, global max readout and a dense classification head.
//!
//! Every layer runs on the symmetrized neighbor lists of the graph. The
//! forward pass records onto a [`Tape`], so the same code serves training and
//! inference.
//!
//! ```text
//! X ─ layer_1 ─ H_1 ─ layer_2 ─ H_2 ... ─ layer_L ─ H_L
//!                │                │                  │
//!                └──── concat ────┴──────────────────┘ · W_jk + b_jk = h_final
//! h_final ─ segment max ─ r ─ ReLU(r W_1 + b_1) W_2 + b_2 = logits
//! ```

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::FEATURE_DIM;
use crate::graph::{DirectedGraph, GraphBatch};
use crate::tensor::{Aggregation, Matrix, Tape, TensorError, Var};

pub const DEFAULT_LAYERS: usize = 6;
pub const DEFAULT_HIDDEN: usize = 128;
pub const HEAD_UNITS: usize = 128;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("parameter {index}: expected shape {expected:?}, found {actual:?}")]
    ParamShape {
        index: usize,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("expected {expected} parameter tensors, found {actual}")]
    ParamCount { expected: usize, actual: usize },
    #[error("input features have shape {actual:?}, expected ({nodes}, {input_dim})")]
    FeatureShape {
        actual: (usize, usize),
        nodes: usize,
        input_dim: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Gcn,
    Sage,
    Gin,
}

impl LayerKind {
    pub const ALL: [LayerKind; 3] = [LayerKind::Gcn, LayerKind::Sage, LayerKind::Gin];

    pub fn code(self) -> u8 {
        match self {
            LayerKind::Gcn => 0,
            LayerKind::Sage => 1,
            LayerKind::Gin => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        LayerKind::ALL.into_iter().find(|k| k.code() == code)
    }

    /// Name of the full JK architecture built from this layer kind.
    pub fn model_name(self) -> &'static str {
        match self {
            LayerKind::Gcn => "gcn-jk",
            LayerKind::Sage => "sage-jk",
            LayerKind::Gin => "gin-jk",
        }
    }

    fn tensors_per_layer(self) -> usize {
        match self {
            LayerKind::Gcn => 3,
            LayerKind::Sage | LayerKind::Gin => 4,
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.model_name())
    }
}

impl FromStr for LayerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gcn" | "gcn-jk" => Ok(LayerKind::Gcn),
            "sage" | "sage-jk" => Ok(LayerKind::Sage),
            "gin" | "gin-jk" => Ok(LayerKind::Gin),
            other => Err(format!(
                "unknown model kind {other:?} (expected gcn-jk, sage-jk or gin-jk)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layer_kind: LayerKind,
    pub num_layers: usize,
    pub hidden: usize,
    pub head_units: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub gin_epsilon: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(layer_kind: LayerKind, num_classes: usize) -> Self {
        ModelConfig {
            layer_kind,
            num_layers: DEFAULT_LAYERS,
            hidden: DEFAULT_HIDDEN,
            head_units: HEAD_UNITS,
            num_classes,
            input_dim: FEATURE_DIM,
            gin_epsilon: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: &str| Err(ModelError::Config(msg.to_string()));
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1");
        }
        if self.hidden == 0 || self.head_units == 0 || self.input_dim == 0 {
            return fail("layer widths must be positive");
        }
        if self.num_classes < 2 {
            return fail("at least two classes are required");
        }
        if !self.gin_epsilon.is_finite() {
            return fail("gin_epsilon must be finite");
        }
        Ok(())
    }

    /// Width of the jumping-knowledge concatenation.
    pub fn jk_width(&self) -> usize {
        self.num_layers * self.hidden
    }

    /// Shapes of every parameter tensor in storage order: per-layer tensors,
    /// then `W_jk, b_jk`, then `W_1, b_1, W_2, b_2` of the head.
    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        let h = self.hidden;
        let mut shapes = Vec::new();
        for layer in 0..self.num_layers {
            let d_in = if layer == 0 { self.input_dim } else { h };
            match self.layer_kind {
                LayerKind::Gcn => shapes.extend([(d_in, h), (d_in, h), (1, h)]),
                LayerKind::Sage => shapes.extend([(d_in, d_in), (1, d_in), (2 * d_in, h), (1, h)]),
                LayerKind::Gin => shapes.extend([(d_in, h), (1, h), (h, h), (1, h)]),
            }
        }
        shapes.extend([(self.jk_width(), h), (1, h)]);
        shapes.extend([
            (h, self.head_units),
            (1, self.head_units),
            (self.head_units, self.num_classes),
            (1, self.num_classes),
        ]);
        shapes
    }
}

/// All trainable tensors of a model, stored flat in
/// [`ModelConfig::param_shapes`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: Vec<Matrix>,
}

impl ModelParams {
    /// Glorot-uniform weights and zero biases drawn from `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tensors = config
            .param_shapes()
            .into_iter()
            .map(|(rows, cols)| {
                if rows == 1 {
                    return Matrix::zeros(rows, cols);
                }
                let limit = (6.0 / (rows + cols) as f64).sqrt() as f32;
                let data = (0..rows * cols)
                    .map(|_| rng.random_range(-limit..=limit))
                    .collect();
                Matrix::from_vec(rows, cols, data)
            })
            .collect();
        Ok(ModelParams { tensors })
    }

    /// Wraps existing tensors after checking them against `config`.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Matrix>) -> Result<Self, ModelError> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != tensors.len() {
            return Err(ModelError::ParamCount {
                expected: shapes.len(),
                actual: tensors.len(),
            });
        }
        for (index, (t, &expected)) in tensors.iter().zip(&shapes).enumerate() {
            if t.shape() != expected {
                return Err(ModelError::ParamShape {
                    index,
                    expected,
                    actual: t.shape(),
                });
            }
            if !t.is_finite() {
                return Err(ModelError::Tensor(TensorError::NonFinite("parameters")));
            }
        }
        Ok(ModelParams { tensors })
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    /// Puts every tensor on the tape, as trainable leaves or as constants.
    pub fn register(&self, tape: &mut Tape<'_>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }
}

/// `ReLU(X W0 + mean_{u in N(v)} X[u] W1 + b)`.
pub fn gcn_layer<'g>(
    tape: &mut Tape<'g>,
    g: &'g DirectedGraph,
    x: Var,
    w_self: Var,
    w_neigh: Var,
    bias: Var,
) -> Result<Var, ModelError> {
    let own = tape.matmul(x, w_self)?;
    let mixed = tape.sparse_apply(g.sym_neighbors(), x, Aggregation::Mean)?;
    let neigh = tape.matmul(mixed, w_neigh)?;
    let sum = tape.add(own, neigh)?;
    let pre = tape.add_bias(sum, bias)?;
    Ok(tape.relu(pre)?)
}

/// Max-pool GraphSAGE: neighbors are projected with `ReLU(X W_pool + b_pool)`
/// and max-reduced, then concatenated with the node's own row.
#[allow(clippy::too_many_arguments)]
pub fn sage_layer<'g>(
    tape: &mut Tape<'g>,
    g: &'g DirectedGraph,
    x: Var,
    w_pool: Var,
    b_pool: Var,
    w: Var,
    bias: Var,
) -> Result<Var, ModelError> {
    let projected = tape.matmul(x, w_pool)?;
    let projected = tape.add_bias(projected, b_pool)?;
    let projected = tape.relu(projected)?;
    let pooled = tape.neighbor_max(g.sym_neighbors(), projected)?;
    let joined = tape.concat_cols(&[x, pooled])?;
    let out = tape.matmul(joined, w)?;
    let out = tape.add_bias(out, bias)?;
    Ok(tape.relu(out)?)
}

/// `MLP((1 + eps) X[v] + sum_{u in N(v)} X[u])` with a Linear-ReLU-Linear MLP;
/// `mlp` holds `[W_a, b_a, W_b, b_b]`.
pub fn gin_layer<'g>(
    tape: &mut Tape<'g>,
    g: &'g DirectedGraph,
    x: Var,
    mlp: [Var; 4],
    epsilon: f32,
) -> Result<Var, ModelError> {
    let neigh = tape.sparse_apply(g.sym_neighbors(), x, Aggregation::Sum)?;
    let own = tape.scale(x, 1.0 + epsilon)?;
    let combined = tape.add(own, neigh)?;
    let hidden = tape.matmul(combined, mlp[0])?;
    let hidden = tape.add_bias(hidden, mlp[1])?;
    let hidden = tape.relu(hidden)?;
    let out = tape.matmul(hidden, mlp[2])?;
    Ok(tape.add_bias(out, mlp[3])?)
}

/// Linear map of the concatenated per-layer representations. Returns the
/// concatenation too so callers can inspect it.
pub fn jk_combine(
    tape: &mut Tape<'_>,
    layers: &[Var],
    w: Var,
    bias: Var,
) -> Result<(Var, Var), ModelError> {
    if let Some(&first) = layers.first() {
        let shape = tape.shape(first);
        if let Some(&bad) = layers.iter().find(|&&l| tape.shape(l) != shape) {
            return Err(TensorError::ShapeMismatch {
                op: "jk_combine",
                left: shape,
                right: tape.shape(bad),
            }
            .into());
        }
    }
    let concat = tape.concat_cols(layers)?;
    let out = tape.matmul(concat, w)?;
    let out = tape.add_bias(out, bias)?;
    Ok((concat, out))
}

/// Whole-graph embeddings by element-wise max over each graph's nodes.
pub fn readout(
    tape: &mut Tape<'_>,
    h: Var,
    segment_ids: &[usize],
    graphs: usize,
) -> Result<Var, ModelError> {
    Ok(tape.segment_max(h, segment_ids, graphs)?)
}

/// Dense ReLU layer followed by the output projection; `head` holds
/// `[W_1, b_1, W_2, b_2]`. Softmax is left to the loss and to prediction.
pub fn head_forward(tape: &mut Tape<'_>, r: Var, head: [Var; 4]) -> Result<Var, ModelError> {
    let hidden = tape.matmul(r, head[0])?;
    let hidden = tape.add_bias(hidden, head[1])?;
    let hidden = tape.relu(hidden)?;
    let logits = tape.matmul(hidden, head[2])?;
    Ok(tape.add_bias(logits, head[3])?)
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub logits: Var,
    /// One row per graph.
    pub graph_embeddings: Var,
    /// Per-node output of the JK transform.
    pub node_embeddings: Var,
    pub jk_concat: Var,
    pub layer_outputs_len: usize,
}

pub fn model_forward<'g>(
    tape: &mut Tape<'g>,
    batch: &'g GraphBatch,
    features: Var,
    params: &[Var],
    config: &ModelConfig,
) -> Result<ForwardOutput, ModelError> {
    config.validate()?;
    let shapes = config.param_shapes();
    if params.len() != shapes.len() {
        return Err(ModelError::ParamCount {
            expected: shapes.len(),
            actual: params.len(),
        });
    }
    for (index, (&p, &expected)) in params.iter().zip(&shapes).enumerate() {
        if tape.shape(p) != expected {
            return Err(ModelError::ParamShape {
                index,
                expected,
                actual: tape.shape(p),
            });
        }
    }
    let graph = batch.merged();
    let nodes = graph.node_count();
    if tape.shape(features) != (nodes, config.input_dim) {
        return Err(ModelError::FeatureShape {
            actual: tape.shape(features),
            nodes,
            input_dim: config.input_dim,
        });
    }

    let per_layer = config.layer_kind.tensors_per_layer();
    let mut h = features;
    let mut outputs = Vec::with_capacity(config.num_layers);
    for layer in params[..per_layer * config.num_layers].chunks_exact(per_layer) {
        h = match config.layer_kind {
            LayerKind::Gcn => gcn_layer(tape, graph, h, layer[0], layer[1], layer[2])?,
            LayerKind::Sage => sage_layer(tape, graph, h, layer[0], layer[1], layer[2], layer[3])?,
            LayerKind::Gin => gin_layer(
                tape,
                graph,
                h,
                [layer[0], layer[1], layer[2], layer[3]],
                config.gin_epsilon as f32,
            )?,
        };
        outputs.push(h);
    }
    let rest = &params[per_layer * config.num_layers..];
    let (jk_concat, node_embeddings) = jk_combine(tape, &outputs, rest[0], rest[1])?;
    let graph_embeddings = readout(
        tape,
        node_embeddings,
        batch.segment_ids(),
        batch.graph_count(),
    )?;
    let logits = head_forward(tape, graph_embeddings, [rest[2], rest[3], rest[4], rest[5]])?;
    Ok(ForwardOutput {
        logits,
        graph_embeddings,
        node_embeddings,
        jk_concat,
        layer_outputs_len: outputs.len(),
    })
}

/// Gradient-free forward returning `(logits, graph_embeddings)`.
pub fn infer(
    config: &ModelConfig,
    params: &ModelParams,
    batch: &GraphBatch,
    features: Matrix,
) -> Result<(Matrix, Matrix), ModelError> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let x = tape.constant(features);
    let out = model_forward(&mut tape, batch, x, &vars, config)?;
    Ok((
        tape.value(out.logits).clone(),
        tape.value(out.graph_embeddings).clone(),
    ))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}
