//! Per-snapshot topology encoder.
//!
//! Raw features go through a fully connected layer, then `L` layers of
//! multi-head neighbor attention: each head scores every edge `j → i` with
//! `exp(q_i·k_jᵀ/√d)`, normalizes the scores within node `i`'s neighborhood,
//! and aggregates the value vectors of the neighbors. Head outputs pass
//! through the nonlinearity and are concatenated.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, EdgeIndex, Tape, Tensor, Var};
use crate::dyngraph::{neighborhood, Snapshot};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuralConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Negative-side slope of the leaky rectifier.
    pub slope: f64,
    /// Every node attends to itself as well as its neighbors.
    pub self_loops: bool,
    /// Adds each layer's input to its output.
    pub residual: bool,
    /// Normalizes every layer output row to zero mean, unit variance.
    pub layer_norm: bool,
}

impl StructuralConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.num_layers == 0 || self.num_heads == 0 || self.hidden_dim == 0 || self.input_dim == 0 {
            return Err("structural dimensions must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(format!(
                "hidden_dim {} not divisible by {} heads",
                self.hidden_dim, self.num_heads
            ));
        }
        Ok(())
    }
}

/// One attention head: `W_*` are `[head_dim × d]`, `b_*` are `[head_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHeadParams<T> {
    pub w_q: T,
    pub b_q: T,
    pub w_k: T,
    pub b_k: T,
    pub w_v: T,
    pub b_v: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StructuralLayerParams<T> {
    pub heads: Vec<AttentionHeadParams<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StructuralParams<T> {
    /// Input projection `[d × input_dim]`.
    pub w_in: T,
    pub b_in: T,
    pub layers: Vec<StructuralLayerParams<T>>,
}

impl<T> AttentionHeadParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AttentionHeadParams<U> {
        AttentionHeadParams {
            w_q: f(&self.w_q),
            b_q: f(&self.b_q),
            w_k: f(&self.w_k),
            b_k: f(&self.b_k),
            w_v: f(&self.w_v),
            b_v: f(&self.b_v),
        }
    }

    fn named(&self) -> [(&'static str, &T); 6] {
        [
            ("w_q", &self.w_q),
            ("b_q", &self.b_q),
            ("w_k", &self.w_k),
            ("b_k", &self.b_k),
            ("w_v", &self.w_v),
            ("b_v", &self.b_v),
        ]
    }

    fn leaves_mut(&mut self) -> [&mut T; 6] {
        [
            &mut self.w_q,
            &mut self.b_q,
            &mut self.w_k,
            &mut self.b_k,
            &mut self.w_v,
            &mut self.b_v,
        ]
    }
}

impl<T> StructuralParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> StructuralParams<U> {
        StructuralParams {
            w_in: f(&self.w_in),
            b_in: f(&self.b_in),
            layers: self
                .layers
                .iter()
                .map(|l| StructuralLayerParams {
                    heads: l.heads.iter().map(|h| h.map(f)).collect(),
                })
                .collect(),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.input.w"), &self.w_in));
        out.push((format!("{prefix}.input.b"), &self.b_in));
        for (li, layer) in self.layers.iter().enumerate() {
            for (hi, head) in layer.heads.iter().enumerate() {
                for (name, t) in head.named() {
                    out.push((format!("{prefix}.layer{li}.head{hi}.{name}"), t));
                }
            }
        }
    }

    pub fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.push(&mut self.w_in);
        out.push(&mut self.b_in);
        for layer in &mut self.layers {
            for head in &mut layer.heads {
                out.extend(head.leaves_mut());
            }
        }
    }
}

/// Message-passing structure for one snapshot, or several snapshots stacked
/// block-diagonally (node `i` of block `k` is row `k·n + i`).
#[derive(Clone, Debug)]
pub struct MessageGraph {
    edges: Arc<EdgeIndex>,
}

impl MessageGraph {
    pub fn from_snapshot(snapshot: &Snapshot, self_loops: bool) -> Self {
        Self::from_snapshots(std::slice::from_ref(snapshot), self_loops)
    }

    pub fn from_snapshots(snapshots: &[Snapshot], self_loops: bool) -> Self {
        let n = snapshots.first().map_or(0, Snapshot::num_nodes);
        let mut lists = Vec::with_capacity(n * snapshots.len());
        for (k, snap) in snapshots.iter().enumerate() {
            for i in 0..n {
                let mut nb = neighborhood(snap, i);
                if self_loops {
                    let pos = nb.binary_search(&i).unwrap_or_else(|p| p);
                    nb.insert(pos, i);
                }
                lists.push(nb.into_iter().map(|j| k * n + j).collect::<Vec<_>>());
            }
        }
        let edges = EdgeIndex::from_neighbor_lists(&lists).expect("neighbor ids are in range");
        Self {
            edges: Arc::new(edges),
        }
    }

    pub fn edges(&self) -> &Arc<EdgeIndex> {
        &self.edges
    }

    pub fn num_nodes(&self) -> usize {
        self.edges.num_nodes()
    }
}

/// `W·x + b` applied row-wise: `x [rows × in]`, `W [out × in]`, `b [out]`.
pub(crate) fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
    let wt = tape.transpose(w)?;
    let xw = tape.matmul(x, wt)?;
    tape.add_bias(xw, b)
}

/// `h⁰ = σ(W_I·x + b_I)` for every row of `features`.
pub fn encode_input(
    tape: &mut Tape,
    features: Var,
    params: &StructuralParams<Var>,
    slope: f64,
) -> Result<Var, AutodiffError> {
    let z = linear(tape, features, params.w_in, params.b_in)?;
    Ok(tape.leaky_relu(z, slope))
}

/// Per-edge attention weights of one head, in the edge order of `graph`.
pub fn attention_weights(
    tape: &mut Tape,
    h: Var,
    graph: &MessageGraph,
    head: &AttentionHeadParams<Var>,
) -> Result<Var, AutodiffError> {
    let d = tape.value(h).cols() as f64;
    let q = linear(tape, h, head.w_q, head.b_q)?;
    let k = linear(tape, h, head.w_k, head.b_k)?;
    let scores = tape.edge_dot(q, k, graph.edges(), 1.0 / d.sqrt())?;
    tape.neighbor_softmax(scores, graph.edges())
}

pub struct LayerOutput {
    pub h: Var,
    /// Per-head edge weights.
    pub attention: Vec<Var>,
}

/// One multi-head aggregation layer.
pub fn aggregate_layer(
    tape: &mut Tape,
    h: Var,
    graph: &MessageGraph,
    layer: &StructuralLayerParams<Var>,
    config: &StructuralConfig,
) -> Result<LayerOutput, AutodiffError> {
    let mut outs = Vec::with_capacity(layer.heads.len());
    let mut attention = Vec::with_capacity(layer.heads.len());
    for head in &layer.heads {
        let alpha = attention_weights(tape, h, graph, head)?;
        let v = linear(tape, h, head.w_v, head.b_v)?;
        let m = tape.edge_aggregate(alpha, v, graph.edges())?;
        outs.push(tape.leaky_relu(m, config.slope));
        attention.push(alpha);
    }
    let mut out = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat(&outs, 1)?
    };
    if config.residual && tape.value(out).shape() == tape.value(h).shape() {
        out = tape.add(out, h)?;
    }
    if config.layer_norm {
        out = tape.normalize_rows(out, 1e-5);
    }
    Ok(LayerOutput { h: out, attention })
}

pub struct StructuralOutput {
    /// `[rows × d]`; rows of inactive nodes are zero.
    pub s: Var,
    /// `attention[layer][head]` edge weights.
    pub attention: Vec<Vec<Var>>,
}

/// Input encoding followed by all aggregation layers. `active[r]` is false for
/// rows whose node does not exist yet; their output is the zero vector.
pub fn forward_snapshot(
    tape: &mut Tape,
    features: Var,
    graph: &MessageGraph,
    active: &[bool],
    params: &StructuralParams<Var>,
    config: &StructuralConfig,
) -> Result<StructuralOutput, AutodiffError> {
    let mut h = encode_input(tape, features, params, config.slope)?;
    let mut attention = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let out = aggregate_layer(tape, h, graph, layer, config)?;
        h = out.h;
        attention.push(out.attention);
    }
    let mask: Vec<f64> = active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
    let s = tape.scale_rows(h, &mask)?;
    Ok(StructuralOutput { s, attention })
}

/// Binds a tensor-valued parameter set to a tape as trainable leaves.
pub fn bind(tape: &mut Tape, params: &StructuralParams<Tensor>) -> StructuralParams<Var> {
    params.map(&mut |t| tape.param(t.clone()))
}
