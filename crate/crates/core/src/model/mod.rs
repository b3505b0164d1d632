//! Full detector: structural encoder per snapshot, temporal attention across
//! snapshots, and a two-layer classification head.

mod io;
mod train;

pub use io::{load_params, read_params, save_params, write_params};
pub use train::{
    evaluate, is_bot, predict, train, Adam, EpochRecord, LossScope, Metrics, OptimizerKind,
    Prediction, Split, TrainOutcome, TrainingConfig, TrainingData,
};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::dyngraph::{DynamicGraph, SnapshotMetrics};
use crate::structural::{
    self, AttentionHeadParams, MessageGraph, StructuralConfig, StructuralLayerParams,
    StructuralParams,
};
use crate::temporal::{
    self, MetricEncoding, PositionEmbeddingTables, PositionInputs, PositionTerms, TemporalConfig,
    TemporalError, TemporalParams,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error(transparent)]
    Temporal(#[from] TemporalError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Components switched off for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Classify the structural vectors directly.
    pub no_temporal: bool,
    pub no_snapshot_embedding: bool,
    pub no_lcc_embedding: bool,
    pub no_blr_embedding: bool,
}

impl Ablation {
    pub fn position_terms(&self) -> PositionTerms {
        PositionTerms {
            snapshot: !self.no_snapshot_embedding,
            lcc: !self.no_lcc_embedding,
            blr: !self.no_blr_embedding,
        }
    }
}

impl FromStr for Ablation {
    type Err = String;

    /// Comma-separated list of `no_temporal`, `no_p_at`, `no_p_lcc`,
    /// `no_p_blr`, or `none`.
    fn from_str(s: &str) -> Result<Self, String> {
        let mut a = Ablation::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "none" | "full" => {}
                "no_temporal" => a.no_temporal = true,
                "no_p_at" => a.no_snapshot_embedding = true,
                "no_p_lcc" => a.no_lcc_embedding = true,
                "no_p_blr" => a.no_blr_embedding = true,
                other => return Err(format!("unknown ablation `{other}`")),
            }
        }
        Ok(a)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.no_temporal, "no_temporal"),
            (self.no_snapshot_embedding, "no_p_at"),
            (self.no_lcc_embedding, "no_p_lcc"),
            (self.no_blr_embedding, "no_p_blr"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Width of structural and temporal representations.
    pub hidden_dim: usize,
    pub structural_layers: usize,
    pub structural_heads: usize,
    pub temporal_heads: usize,
    pub classifier_hidden: usize,
    pub num_snapshots: usize,
    pub num_buckets: usize,
    pub slope: f64,
    pub self_loops: bool,
    pub residual: bool,
    pub layer_norm: bool,
    pub metric_encoding: MetricEncoding,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn new(input_dim: usize, num_snapshots: usize) -> Self {
        Self {
            input_dim,
            hidden_dim: 64,
            structural_layers: 2,
            structural_heads: 4,
            temporal_heads: 4,
            classifier_hidden: 32,
            num_snapshots,
            num_buckets: 20,
            slope: 0.01,
            self_loops: true,
            residual: false,
            layer_norm: false,
            metric_encoding: MetricEncoding::Bucketed,
            ablation: Ablation::default(),
        }
    }

    pub fn structural(&self) -> StructuralConfig {
        StructuralConfig {
            num_layers: self.structural_layers,
            num_heads: self.structural_heads,
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            slope: self.slope,
            self_loops: self.self_loops,
            residual: self.residual,
            layer_norm: self.layer_norm,
        }
    }

    pub fn temporal(&self) -> TemporalConfig {
        TemporalConfig {
            hidden_dim: self.hidden_dim,
            num_heads: self.temporal_heads,
            num_snapshots: self.num_snapshots,
            num_buckets: self.num_buckets,
            metric_encoding: self.metric_encoding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.structural().validate().map_err(ModelError::Config)?;
        self.temporal().validate().map_err(ModelError::Config)?;
        if self.classifier_hidden == 0 {
            return Err(ModelError::Config("classifier_hidden must be positive".into()));
        }
        if !self.slope.is_finite() {
            return Err(ModelError::Config("slope must be finite".into()));
        }
        Ok(())
    }
}

/// Two-layer classifier: `W_1 [H × F]`, `W_2 [2 × H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    pub w_1: T,
    pub b_1: T,
    pub w_2: T,
    pub b_2: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub structural: StructuralParams<T>,
    pub embeddings: PositionEmbeddingTables<T>,
    pub temporal: TemporalParams<T>,
    pub head: HeadParams<T>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            structural: self.structural.map(f),
            embeddings: self.embeddings.map(f),
            temporal: self.temporal.map(f),
            head: HeadParams {
                w_1: f(&self.head.w_1),
                b_1: f(&self.head.b_1),
                w_2: f(&self.head.w_2),
                b_2: f(&self.head.b_2),
            },
        }
    }

    /// Every leaf with a stable dotted name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.structural.visit("structural", &mut out);
        self.embeddings.visit("embeddings", &mut out);
        self.temporal.visit("temporal", &mut out);
        out.push(("head.w_1".into(), &self.head.w_1));
        out.push(("head.b_1".into(), &self.head.b_1));
        out.push(("head.w_2".into(), &self.head.w_2));
        out.push(("head.b_2".into(), &self.head.b_2));
        out
    }

    /// Mutable leaves in the same order as [`ModelParams::named`].
    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.structural.visit_mut(&mut out);
        self.embeddings.visit_mut(&mut out);
        self.temporal.visit_mut(&mut out);
        out.extend([
            &mut self.head.w_1,
            &mut self.head.b_1,
            &mut self.head.w_2,
            &mut self.head.b_2,
        ]);
        out
    }
}

impl ModelParams<Tensor> {
    pub fn bind(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map(&mut |t| tape.param(t.clone()))
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

/// Glorot-uniform weights, zero biases, `N(0, 0.02²)` embedding tables.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.hidden_dim;
    let hd = d / config.structural_heads;
    let w_in = xavier(&mut rng, d, config.input_dim);
    let layers = (0..config.structural_layers)
        .map(|_| StructuralLayerParams {
            heads: (0..config.structural_heads)
                .map(|_| AttentionHeadParams {
                    w_q: xavier(&mut rng, hd, d),
                    b_q: Tensor::zeros(&[hd]),
                    w_k: xavier(&mut rng, hd, d),
                    b_k: Tensor::zeros(&[hd]),
                    w_v: xavier(&mut rng, hd, d),
                    b_v: Tensor::zeros(&[hd]),
                })
                .collect(),
        })
        .collect();
    let metric_rows = config.temporal().metric_table_rows();
    let embeddings = PositionEmbeddingTables {
        snapshot: normal(&mut rng, config.num_snapshots, d, 0.02),
        lcc: normal(&mut rng, metric_rows, d, 0.02),
        blr: normal(&mut rng, metric_rows, d, 0.02),
    };
    let temporal = TemporalParams {
        w_q: xavier(&mut rng, d, d),
        w_k: xavier(&mut rng, d, d),
        w_v: xavier(&mut rng, d, d),
    };
    let h = config.classifier_hidden;
    let head = HeadParams {
        w_1: xavier(&mut rng, h, d),
        b_1: Tensor::zeros(&[h]),
        w_2: xavier(&mut rng, 2, h),
        b_2: Tensor::zeros(&[2]),
    };
    Ok(ModelParams {
        structural: StructuralParams {
            w_in,
            b_in: Tensor::zeros(&[d]),
            layers,
        },
        embeddings,
        temporal,
        head,
    })
}

/// Everything the forward pass needs that does not change during training.
///
/// Model outputs are node-major: the row of node `i` at snapshot `k` is
/// `i·T + k`.
#[derive(Clone, Debug)]
pub struct ModelInputs {
    num_nodes: usize,
    num_snapshots: usize,
    /// `[T·n × input_dim]`, snapshot-major to match the stacked graph.
    features: Tensor,
    graph: MessageGraph,
    structural_active: Vec<bool>,
    /// Node-major row `i·T + k` takes snapshot-major row `k·n + i`.
    to_node_major: Vec<usize>,
    active: Vec<bool>,
    keep: Vec<f64>,
    positions: PositionInputs,
    mask: Tensor,
}

impl ModelInputs {
    /// `features` is `[n × dim]` (shared by all snapshots) or `[T × n × dim]`.
    pub fn new(
        graph: &DynamicGraph,
        metrics: &SnapshotMetrics,
        features: &Tensor,
        config: &ModelConfig,
    ) -> Result<Self> {
        let n = graph.num_nodes;
        let t = graph.num_snapshots();
        if t != config.num_snapshots {
            return Err(ModelError::Input(format!(
                "graph has {t} snapshots, model expects {}",
                config.num_snapshots
            )));
        }
        let dim = config.input_dim;
        let features = match features.shape() {
            [rows, c] if *rows == n && *c == dim => {
                let mut data = Vec::with_capacity(t * n * dim);
                for _ in 0..t {
                    data.extend_from_slice(features.data());
                }
                Tensor::matrix(t * n, dim, data)?
            }
            [s, rows, c] if *s == t && *rows == n && *c == dim => {
                features.reshaped(vec![t * n, dim])?
            }
            other => {
                return Err(ModelError::Input(format!(
                    "features have shape {other:?}, expected [{n}, {dim}] or [{t}, {n}, {dim}]"
                )))
            }
        };
        if !features.is_finite() {
            return Err(ModelError::Input("features contain non-finite values".into()));
        }
        let structural_active = graph
            .snapshots
            .iter()
            .flat_map(|s| s.node_active.iter().copied())
            .collect();
        let mut to_node_major = Vec::with_capacity(n * t);
        let mut active = Vec::with_capacity(n * t);
        let mut rows = Vec::with_capacity(n * t);
        for i in 0..n {
            for k in 0..t {
                to_node_major.push(k * n + i);
                active.push(graph.snapshots[k].is_active(i));
                rows.push((i, k));
            }
        }
        let keep = active.iter().map(|&a| f64::from(u8::from(a))).collect();
        let positions = PositionInputs::new(&rows, metrics, &config.temporal())?;
        let mask = temporal::stacked_causal_masks(&active, t);
        Ok(Self {
            num_nodes: n,
            num_snapshots: t,
            features,
            graph: MessageGraph::from_snapshots(&graph.snapshots, config.self_loops),
            structural_active,
            to_node_major,
            active,
            keep,
            positions,
            mask,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_snapshots(&self) -> usize {
        self.num_snapshots
    }

    /// Output row of `node` at snapshot `k`.
    pub fn row(&self, node: usize, k: usize) -> usize {
        node * self.num_snapshots + k
    }

    pub fn is_active(&self, node: usize, k: usize) -> bool {
        self.active[self.row(node, k)]
    }

    /// Stacked causal masks, `[n × T × T]`.
    pub fn mask(&self) -> &Tensor {
        &self.mask
    }
}

pub struct ForwardOutput {
    /// `[n·T × 2]` class probabilities (human, bot), node-major.
    pub probs: Var,
    /// Structural vectors, node-major `[n·T × d]`.
    pub s: Var,
    /// Classifier inputs, node-major `[n·T × F]`.
    pub z: Var,
    /// Per-head temporal attention, each `[n × T × T]`; empty when the
    /// temporal module is disabled.
    pub temporal_attention: Vec<Var>,
    /// Structural edge weights, `[layer][head]`.
    pub structural_attention: Vec<Vec<Var>>,
}

/// `softmax(W_2·σ(W_1·z + b_1) + b_2)` row-wise.
pub fn classify(
    tape: &mut Tape,
    z: Var,
    head: &HeadParams<Var>,
    slope: f64,
) -> Result<Var, AutodiffError> {
    let h = structural::linear(tape, z, head.w_1, head.b_1)?;
    let h = tape.leaky_relu(h, slope);
    let logits = structural::linear(tape, h, head.w_2, head.b_2)?;
    tape.softmax_rows(logits, None)
}

pub fn forward(
    tape: &mut Tape,
    params: &ModelParams<Var>,
    inputs: &ModelInputs,
    config: &ModelConfig,
) -> Result<ForwardOutput> {
    let x = tape.constant(inputs.features.clone());
    let st = structural::forward_snapshot(
        tape,
        x,
        &inputs.graph,
        &inputs.structural_active,
        &params.structural,
        &config.structural(),
    )?;
    let s = tape.gather_rows(st.s, &inputs.to_node_major)?;
    let (z, temporal_attention) = if config.ablation.no_temporal {
        (s, Vec::new())
    } else {
        let positions = temporal::position_embeddings(tape, &params.embeddings, &inputs.positions)?;
        let fused = temporal::fuse_inputs(
            tape,
            s,
            &positions,
            config.ablation.position_terms(),
            &inputs.keep,
        )?;
        let (n, t, f) = (inputs.num_nodes, inputs.num_snapshots, config.hidden_dim);
        let seq = tape.reshape(fused, &[n, t, f])?;
        let out = temporal::temporal_attention(
            tape,
            seq,
            &params.temporal,
            config.temporal_heads,
            &inputs.mask,
        )?;
        (tape.reshape(out.z, &[n * t, f])?, out.attention)
    };
    let probs = classify(tape, z, &params.head, config.slope)?;
    Ok(ForwardOutput {
        probs,
        s,
        z,
        temporal_attention,
        structural_attention: st.attention,
    })
}

/// Mean BCE over the given output rows; `targets` are 1 for bot.
pub fn bce_loss(
    tape: &mut Tape,
    probs: Var,
    rows: &[usize],
    targets: &[f64],
) -> Result<Var, AutodiffError> {
    let picked = tape.gather_rows(probs, rows)?;
    let p_bot = tape.slice_last(picked, 1, 2)?;
    tape.bce(p_bot, targets, 1e-12)
}

/// Mean temporal attention weight for each (query, key) snapshot pair,
/// averaged over heads and over the given nodes that are active at the query
/// snapshot. Rows with no active node are zero.
pub fn mean_temporal_attention(
    tape: &Tape,
    out: &ForwardOutput,
    inputs: &ModelInputs,
    nodes: &[usize],
) -> Vec<Vec<f64>> {
    let t = inputs.num_snapshots;
    let mut sum = vec![vec![0.0; t]; t];
    let mut count = vec![0usize; t];
    for &i in nodes {
        for a in 0..t {
            if !inputs.is_active(i, a) {
                continue;
            }
            count[a] += out.temporal_attention.len();
            for head in &out.temporal_attention {
                let w = tape.value(*head).data();
                for b in 0..t {
                    sum[a][b] += w[(i * t + a) * t + b];
                }
            }
        }
    }
    for (row, &c) in sum.iter_mut().zip(&count) {
        if c > 0 {
            row.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    sum
}
