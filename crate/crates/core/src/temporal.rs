//! Cross-snapshot self-attention with position embeddings.
//!
//! Each node's sequence of per-snapshot structural vectors is shifted by three
//! learned embeddings (the snapshot index and bucketed clustering and
//! reciprocity values) and then attends causally over its own history: the
//! output at snapshot `a` only mixes inputs from snapshots `b <= a`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::dyngraph::SnapshotMetrics;

#[derive(Debug, Error)]
pub enum TemporalError {
    #[error("metric value {value} is outside [0, 1]")]
    MetricRange { value: f64 },
    #[error("bucket count must be positive")]
    ZeroBuckets,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// How the clustering and reciprocity values become vectors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricEncoding {
    /// Lookup in a `[B × F]` table after bucketing the value.
    #[default]
    Bucketed,
    /// `v·row0 + row1` of a `[2 × F]` table.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalConfig {
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub num_snapshots: usize,
    pub num_buckets: usize,
    pub metric_encoding: MetricEncoding,
}

impl TemporalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.hidden_dim == 0 || self.num_heads == 0 || self.num_snapshots == 0 {
            return Err("temporal dimensions must be positive".into());
        }
        if self.num_buckets == 0 {
            return Err("bucket count must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(format!(
                "hidden_dim {} not divisible by {} temporal heads",
                self.hidden_dim, self.num_heads
            ));
        }
        Ok(())
    }

    /// Rows of the clustering and reciprocity tables.
    pub fn metric_table_rows(&self) -> usize {
        match self.metric_encoding {
            MetricEncoding::Bucketed => self.num_buckets,
            MetricEncoding::Linear => 2,
        }
    }
}

/// Which position terms are added to the structural vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionTerms {
    pub snapshot: bool,
    pub lcc: bool,
    pub blr: bool,
}

impl Default for PositionTerms {
    fn default() -> Self {
        Self {
            snapshot: true,
            lcc: true,
            blr: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositionEmbeddingTables<T> {
    /// `[N × F]`, one row per snapshot index.
    pub snapshot: T,
    pub lcc: T,
    pub blr: T,
}

/// Query, key and value projections, each `[F × F]` and right-multiplied.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalParams<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
}

impl<T> PositionEmbeddingTables<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> PositionEmbeddingTables<U> {
        PositionEmbeddingTables {
            snapshot: f(&self.snapshot),
            lcc: f(&self.lcc),
            blr: f(&self.blr),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.snapshot"), &self.snapshot));
        out.push((format!("{prefix}.lcc"), &self.lcc));
        out.push((format!("{prefix}.blr"), &self.blr));
    }

    pub fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.extend([&mut self.snapshot, &mut self.lcc, &mut self.blr]);
    }
}

impl<T> TemporalParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> TemporalParams<U> {
        TemporalParams {
            w_q: f(&self.w_q),
            w_k: f(&self.w_k),
            w_v: f(&self.w_v),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.w_q"), &self.w_q));
        out.push((format!("{prefix}.w_k"), &self.w_k));
        out.push((format!("{prefix}.w_v"), &self.w_v));
    }

    pub fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.extend([&mut self.w_q, &mut self.w_k, &mut self.w_v]);
    }
}

/// `min(floor(v·B), B − 1)` for `v` in `[0, 1]`.
pub fn bucketize(value: f64, num_buckets: usize) -> Result<usize, TemporalError> {
    if num_buckets == 0 {
        return Err(TemporalError::ZeroBuckets);
    }
    if !(0.0..=1.0).contains(&value) {
        return Err(TemporalError::MetricRange { value });
    }
    Ok(((value * num_buckets as f64).floor() as usize).min(num_buckets - 1))
}

/// Metric inputs for a list of `(node, snapshot)` rows, resolved once and
/// reused across forward passes.
#[derive(Clone, Debug)]
pub struct PositionInputs {
    snapshot: Vec<usize>,
    lcc: MetricRows,
    blr: MetricRows,
}

#[derive(Clone, Debug)]
enum MetricRows {
    Buckets(Vec<usize>),
    Values(Vec<f64>),
}

impl MetricRows {
    fn build(values: Vec<f64>, config: &TemporalConfig) -> Result<Self, TemporalError> {
        match config.metric_encoding {
            MetricEncoding::Bucketed => Ok(Self::Buckets(
                values
                    .into_iter()
                    .map(|v| bucketize(v, config.num_buckets))
                    .collect::<Result<_, _>>()?,
            )),
            MetricEncoding::Linear => {
                if let Some(&value) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(TemporalError::MetricRange { value });
                }
                Ok(Self::Values(values))
            }
        }
    }

    fn embed(&self, tape: &mut Tape, table: Var) -> Result<Var, AutodiffError> {
        match self {
            Self::Buckets(idx) => tape.gather_rows(table, idx),
            Self::Values(v) => {
                let slope = tape.gather_rows(table, &vec![0; v.len()])?;
                let slope = tape.scale_rows(slope, v)?;
                let offset = tape.gather_rows(table, &vec![1; v.len()])?;
                tape.add(slope, offset)
            }
        }
    }
}

impl PositionInputs {
    pub fn new(
        rows: &[(usize, usize)],
        metrics: &SnapshotMetrics,
        config: &TemporalConfig,
    ) -> Result<Self, TemporalError> {
        let lcc = rows.iter().map(|&(i, k)| metrics.lcc(i, k)).collect();
        let blr = rows.iter().map(|&(i, k)| metrics.blr(i, k)).collect();
        Ok(Self {
            snapshot: rows.iter().map(|&(_, k)| k).collect(),
            lcc: MetricRows::build(lcc, config)?,
            blr: MetricRows::build(blr, config)?,
        })
    }

    pub fn len(&self) -> usize {
        self.snapshot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshot.is_empty()
    }
}

/// The three position vectors for every input row, each `[rows × F]`.
pub struct PositionVectors {
    pub snapshot: Var,
    pub lcc: Var,
    pub blr: Var,
}

pub fn position_embeddings(
    tape: &mut Tape,
    tables: &PositionEmbeddingTables<Var>,
    inputs: &PositionInputs,
) -> Result<PositionVectors, AutodiffError> {
    Ok(PositionVectors {
        snapshot: tape.gather_rows(tables.snapshot, &inputs.snapshot)?,
        lcc: inputs.lcc.embed(tape, tables.lcc)?,
        blr: inputs.blr.embed(tape, tables.blr)?,
    })
}

/// `ŝ = s + p_AT + p_LCC + p_BLR`, skipping disabled terms. Rows with a zero
/// in `keep` are zeroed.
pub fn fuse_inputs(
    tape: &mut Tape,
    s: Var,
    positions: &PositionVectors,
    terms: PositionTerms,
    keep: &[f64],
) -> Result<Var, AutodiffError> {
    let mut out = s;
    for (on, p) in [
        (terms.snapshot, positions.snapshot),
        (terms.lcc, positions.lcc),
        (terms.blr, positions.blr),
    ] {
        if on {
            out = tape.add(out, p)?;
        }
    }
    tape.scale_rows(out, keep)
}

/// `[T × T]` additive mask: entry `(a, b)` is 0 when `b <= a` and both
/// snapshots are active, `-inf` otherwise. Inactive query rows are fully
/// masked and attend to nothing.
pub fn causal_mask(active: &[bool]) -> Tensor {
    let t = active.len();
    let mut data = vec![f64::NEG_INFINITY; t * t];
    for a in 0..t {
        for b in 0..=a {
            if active[a] && active[b] {
                data[a * t + b] = 0.0;
            }
        }
    }
    Tensor::matrix(t, t, data).expect("square mask")
}

/// Per-node masks stacked into `[n × T × T]`; `active` is node-major.
pub fn stacked_causal_masks(active: &[bool], num_snapshots: usize) -> Tensor {
    let n = active.len() / num_snapshots;
    let mut data = Vec::with_capacity(n * num_snapshots * num_snapshots);
    for seq in active.chunks(num_snapshots) {
        data.extend_from_slice(causal_mask(seq).data());
    }
    Tensor::new(vec![n, num_snapshots, num_snapshots], data).expect("mask shape")
}

pub struct TemporalOutput {
    /// `[n × T × F]`.
    pub z: Var,
    /// Per-head attention weights, each `[n × T × T]`.
    pub attention: Vec<Var>,
}

/// Multi-head causal self-attention over `s_hat [n × T × F]` (a rank-2
/// `[T × F]` input is treated as one sequence). `mask` matches the score
/// shape `[n × T × T]` or `[T × T]`.
pub fn temporal_attention(
    tape: &mut Tape,
    s_hat: Var,
    params: &TemporalParams<Var>,
    num_heads: usize,
    mask: &Tensor,
) -> Result<TemporalOutput, AutodiffError> {
    let shape = tape.value(s_hat).shape().to_vec();
    let (n, t, f) = match shape[..] {
        [t, f] => (1, t, f),
        [n, t, f] => (n, t, f),
        _ => {
            return Err(AutodiffError::RankMismatch {
                op: "temporal_attention",
                expected: 2,
                shape,
            })
        }
    };
    if num_heads == 0 || f % num_heads != 0 {
        return Err(AutodiffError::InvalidShape(vec![f, num_heads]));
    }
    let mask = mask.reshaped(vec![n, t, t])?;
    let flat = tape.reshape(s_hat, &[n * t, f])?;
    let project = |tape: &mut Tape, w: Var| -> Result<Var, AutodiffError> {
        let p = tape.matmul(flat, w)?;
        tape.reshape(p, &[n, t, f])
    };
    let q = project(tape, params.w_q)?;
    let k = project(tape, params.w_k)?;
    let v = project(tape, params.w_v)?;

    let width = f / num_heads;
    let scale = 1.0 / (f as f64).sqrt();
    let mut outs = Vec::with_capacity(num_heads);
    let mut attention = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let (lo, hi) = (h * width, (h + 1) * width);
        let (qh, kh, vh) = if num_heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_last(q, lo, hi)?,
                tape.slice_last(k, lo, hi)?,
                tape.slice_last(v, lo, hi)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scores, Some(&mask))?;
        outs.push(tape.matmul(weights, vh)?);
        attention.push(weights);
    }
    let mut z = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat(&outs, 2)?
    };
    if shape.len() == 2 {
        z = tape.reshape(z, &[t, f])?;
    }
    Ok(TemporalOutput { z, attention })
}
