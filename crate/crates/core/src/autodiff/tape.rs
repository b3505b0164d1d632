use std::sync::Arc;

use super::tensor::{gemm, gemm_nt, gemm_tn, Tensor};
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Destination-grouped edge list (CSR by destination).
///
/// Edges `offsets[i]..offsets[i + 1]` all point into node `i`; `sources[e]`
/// is the node the message on edge `e` comes from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeIndex {
    offsets: Vec<usize>,
    sources: Vec<usize>,
    destinations: Vec<usize>,
}

impl EdgeIndex {
    /// `neighbors[i]` lists the sources aggregated into node `i`.
    pub fn from_neighbor_lists(neighbors: &[Vec<usize>]) -> Result<Self> {
        let n = neighbors.len();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut sources = Vec::new();
        let mut destinations = Vec::new();
        offsets.push(0);
        for (dst, list) in neighbors.iter().enumerate() {
            for &src in list {
                if src >= n {
                    return Err(AutodiffError::IndexOutOfRange { index: src, len: n });
                }
                sources.push(src);
                destinations.push(dst);
            }
            offsets.push(sources.len());
        }
        Ok(Self {
            offsets,
            sources,
            destinations,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_edges(&self) -> usize {
        self.sources.len()
    }

    pub fn group(&self, dst: usize) -> std::ops::Range<usize> {
        self.offsets[dst]..self.offsets[dst + 1]
    }

    pub fn source(&self, edge: usize) -> usize {
        self.sources[edge]
    }

    pub fn destination(&self, edge: usize) -> usize {
        self.destinations[edge]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Transpose { a: Var, batch: usize, m: usize, n: usize },
    Add { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    ScaleRows { a: Var, factors: Arc<[f64]> },
    LeakyRelu { a: Var, slope: f64 },
    NormalizeRows { a: Var, inv_std: Arc<[f64]> },
    Concat { parts: Vec<Var>, outer: usize, widths: Vec<usize> },
    SliceLast { a: Var, start: usize, end: usize },
    Reshape { a: Var },
    GatherRows { table: Var, indices: Arc<[usize]> },
    SoftmaxRows { a: Var },
    EdgeDot { q: Var, k: Var, edges: Arc<EdgeIndex>, scale: f64 },
    NeighborSoftmax { scores: Var, edges: Arc<EdgeIndex> },
    EdgeAggregate { weights: Var, values: Var, edges: Arc<EdgeIndex> },
    Sum { a: Var },
    Mean { a: Var },
    Bce { p: Var, targets: Arc<[f64]>, eps: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so every node's inputs precede it and
/// a reverse sweep visits each node after all of its consumers.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    /// Matrix product of two rank-2 tensors, or a batched product of two
    /// rank-3 tensors sharing their leading axis.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (batch, m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([ba, m, k], [bb, k2, n]) if ba == bb && k == k2 => (*ba, *m, *k, *n),
            _ => return Err(self.mismatch("matmul", a, b)),
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            gemm(
                &av[t * m * k..(t + 1) * m * k],
                &bv[t * k * n..(t + 1) * k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let value = Tensor::from_parts(shape, out);
        Ok(self.derived(value, Op::MatMul { a, b, batch, m, k, n }, &[a, b]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(AutodiffError::RankMismatch {
                op: "transpose",
                expected: 2,
                shape: s,
            });
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = self.value(a).len() / (m * n);
        let out = transpose_blocks(self.value(a).data(), batch, m, n);
        let mut shape = s;
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let value = Tensor::from_parts(shape, out);
        Ok(self.derived(value, Op::Transpose { a, batch, m, n }, &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        Ok(self.derived(value, Op::Add { a, b }, &[a, b]))
    }

    /// Adds a vector to every trailing-axis row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.shape(bias) != [cols] {
            return Err(self.mismatch("add_bias", a, bias));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(cols) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        Ok(self.derived(value, Op::AddBias { a, bias }, &[a, bias]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        Ok(self.derived(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        self.derived(value, Op::Scale { a, c }, &[a])
    }

    /// Multiplies trailing-axis row `r` of `a` by the constant `factors[r]`.
    pub fn scale_rows(&mut self, a: Var, factors: &[f64]) -> Result<Var> {
        let t = self.value(a);
        if t.rows() != factors.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "scale_rows",
                left: t.shape().to_vec(),
                right: vec![factors.len()],
            });
        }
        let cols = t.cols();
        let mut out = t.data().to_vec();
        for (row, &f) in out.chunks_mut(cols).zip(factors) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let factors: Arc<[f64]> = factors.into();
        Ok(self.derived(value, Op::ScaleRows { a, factors }, &[a]))
    }

    /// Leaky rectifier: `x` for `x > 0`, `slope * x` otherwise.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        self.derived(value, Op::LeakyRelu { a, slope }, &[a])
    }

    /// Shifts and scales every trailing-axis row to zero mean and unit variance.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let cols = t.cols();
        let mut out = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(t.rows());
        for row in out.chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            inv_std.push(r);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let inv_std: Arc<[f64]> = inv_std.into();
        self.derived(value, Op::NormalizeRows { a, inv_std }, &[a])
    }

    /// Concatenates tensors of equal rank along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or(AutodiffError::EmptyInput("concat"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::RankMismatch {
                op: "concat",
                expected: axis + 1,
                shape: base,
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_rank = s.len() == base.len();
            let others_agree = same_rank
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !others_agree {
                return Err(self.mismatch("concat", first, p));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis] * inner).collect();
        let row_width: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * row_width);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::from_parts(shape, out);
        Ok(self.derived(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                widths,
            },
            parts,
        ))
    }

    /// Columns `start..end` of the trailing axis.
    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let cols = t.cols();
        if start >= end || end > cols {
            return Err(AutodiffError::IndexOutOfRange { index: end, len: cols });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(t.rows() * w);
        for r in 0..t.rows() {
            out.extend_from_slice(&t.row(r)[start..end]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = w;
        let value = Tensor::from_parts(shape, out);
        Ok(self.derived(value, Op::SliceLast { a, start, end }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape.to_vec())?;
        Ok(self.derived(value, Op::Reshape { a }, &[a]))
    }

    /// Selects rows of a rank-2 `table`; the output has one row per index.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(AutodiffError::RankMismatch {
                op: "gather_rows",
                expected: 2,
                shape: t.shape().to_vec(),
            });
        }
        if indices.is_empty() {
            return Err(AutodiffError::EmptyInput("gather_rows"));
        }
        let rows = t.rows();
        let mut out = Vec::with_capacity(indices.len() * t.cols());
        for &i in indices {
            if i >= rows {
                return Err(AutodiffError::IndexOutOfRange { index: i, len: rows });
            }
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::from_parts(vec![indices.len(), t.cols()], out);
        let indices: Arc<[usize]> = indices.into();
        Ok(self.derived(value, Op::GatherRows { table, indices }, &[table]))
    }

    /// One row of an embedding table as a rank-1 tensor.
    pub fn embedding_lookup(&mut self, table: Var, index: usize) -> Result<Var> {
        let row = self.gather_rows(table, &[index])?;
        let width = self.value(row).cols();
        self.reshape(row, &[width])
    }

    /// Softmax over the trailing axis of `a + mask`.
    ///
    /// `mask` entries must be `0.0` or `f64::NEG_INFINITY`. A row whose entries
    /// are all masked produces an all-zero output row.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Tensor>) -> Result<Var> {
        let t = self.value(a);
        if let Some(m) = mask {
            if m.shape() != t.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "softmax_rows",
                    left: t.shape().to_vec(),
                    right: m.shape().to_vec(),
                });
            }
            if let Some(&bad) = m
                .data()
                .iter()
                .find(|&&v| v != 0.0 && v != f64::NEG_INFINITY)
            {
                return Err(AutodiffError::MaskValue(bad));
            }
        }
        let cols = t.cols();
        let mut out = vec![0.0; t.len()];
        for r in 0..t.rows() {
            let x = t.row(r);
            let mrow = mask.map(|m| m.row(r));
            let visible = |j: usize| mrow.is_none_or(|m| m[j] == 0.0);
            softmax_into(x, visible, &mut out[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.derived(value, Op::SoftmaxRows { a }, &[a]))
    }

    /// Per-edge score `scale · ⟨q[dst], k[src]⟩` for every edge of `edges`.
    pub fn edge_dot(&mut self, q: Var, k: Var, edges: &Arc<EdgeIndex>, scale: f64) -> Result<Var> {
        let (qt, kt) = (self.value(q), self.value(k));
        if qt.shape() != kt.shape() || qt.rank() != 2 || qt.rows() != edges.num_nodes() {
            return Err(self.mismatch("edge_dot", q, k));
        }
        if edges.num_edges() == 0 {
            return Err(AutodiffError::EmptyInput("edge_dot"));
        }
        let out: Vec<f64> = (0..edges.num_edges())
            .map(|e| {
                let qi = qt.row(edges.destination(e));
                let kj = kt.row(edges.source(e));
                scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>()
            })
            .collect();
        let value = Tensor::from_parts(vec![out.len()], out);
        let edges = Arc::clone(edges);
        Ok(self.derived(value, Op::EdgeDot { q, k, edges, scale }, &[q, k]))
    }

    /// Softmax of per-edge scores within each destination group.
    pub fn neighbor_softmax(&mut self, scores: Var, edges: &Arc<EdgeIndex>) -> Result<Var> {
        let s = self.value(scores);
        if s.shape() != [edges.num_edges()] {
            return Err(AutodiffError::ShapeMismatch {
                op: "neighbor_softmax",
                left: s.shape().to_vec(),
                right: vec![edges.num_edges()],
            });
        }
        let mut out = vec![0.0; s.len()];
        for dst in 0..edges.num_nodes() {
            let g = edges.group(dst);
            softmax_into(&s.data()[g.clone()], |_| true, &mut out[g]);
        }
        let value = Tensor::from_parts(s.shape().to_vec(), out);
        let edges = Arc::clone(edges);
        Ok(self.derived(value, Op::NeighborSoftmax { scores, edges }, &[scores]))
    }

    /// `out[dst] = Σ_e weights[e] · values[src(e)]` over the edges into `dst`.
    pub fn edge_aggregate(&mut self, weights: Var, values: Var, edges: &Arc<EdgeIndex>) -> Result<Var> {
        let (w, v) = (self.value(weights), self.value(values));
        if w.shape() != [edges.num_edges()] || v.rank() != 2 || v.rows() != edges.num_nodes() {
            return Err(self.mismatch("edge_aggregate", weights, values));
        }
        let cols = v.cols();
        let mut out = vec![0.0; edges.num_nodes() * cols];
        for dst in 0..edges.num_nodes() {
            let o = &mut out[dst * cols..(dst + 1) * cols];
            for e in edges.group(dst) {
                let we = w.data()[e];
                for (x, &y) in o.iter_mut().zip(v.row(edges.source(e))) {
                    *x += we * y;
                }
            }
        }
        let value = Tensor::from_parts(vec![edges.num_nodes(), cols], out);
        let edges = Arc::clone(edges);
        Ok(self.derived(value, Op::EdgeAggregate { weights, values, edges }, &[weights, values]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.derived(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        self.derived(Tensor::scalar(s), Op::Mean { a }, &[a])
    }

    /// Mean binary cross-entropy `−[y·ln p + (1−y)·ln(1−p)]` with `p` clamped
    /// to `[eps, 1 − eps]`.
    pub fn bce(&mut self, p: Var, targets: &[f64], eps: f64) -> Result<Var> {
        let pt = self.value(p);
        if pt.len() != targets.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "bce",
                left: pt.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let total: f64 = pt
            .data()
            .iter()
            .zip(targets)
            .map(|(&pv, &y)| {
                let pc = pv.clamp(eps, 1.0 - eps);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum();
        let value = Tensor::scalar(total / targets.len() as f64);
        let targets: Arc<[f64]> = targets.into();
        Ok(self.derived(value, Op::Bce { p, targets, eps }, &[p]))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate over every use
    /// of a value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].requires_grad)
                    .map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |var: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[var.0].requires_grad {
                return;
            }
            let slot = grads[var.0].get_or_insert_with(|| vec![0.0; nodes[var.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, batch, m, k, n } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                acc(a, &mut |ga| {
                    for t in 0..batch {
                        gemm_nt(
                            &g[t * m * n..(t + 1) * m * n],
                            &bv[t * k * n..(t + 1) * k * n],
                            &mut ga[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                acc(b, &mut |gb| {
                    for t in 0..batch {
                        gemm_tn(
                            &av[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut gb[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            &Op::Transpose { a, batch, m, n } => {
                // g has the transposed layout (n×m per block)
                let back = transpose_blocks(g, batch, n, m);
                acc(a, &mut |ga| add_into(ga, &back));
            }
            &Op::Add { a, b } => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| add_into(gb, g));
            }
            &Op::AddBias { a, bias } => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(bias, &mut |gb| {
                    let cols = gb.len();
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                });
            }
            &Op::Mul { a, b } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                acc(a, &mut |ga| {
                    for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gi * y;
                    }
                });
                acc(b, &mut |gb| {
                    for ((x, &gi), &y) in gb.iter_mut().zip(g).zip(av) {
                        *x += gi * y;
                    }
                });
            }
            &Op::Scale { a, c } => acc(a, &mut |ga| {
                for (x, &gi) in ga.iter_mut().zip(g) {
                    *x += c * gi;
                }
            }),
            Op::ScaleRows { a, factors } => {
                let cols = self.value(*a).cols();
                acc(*a, &mut |ga| {
                    for ((row, grow), &f) in ga.chunks_mut(cols).zip(g.chunks(cols)).zip(factors.iter()) {
                        for (x, &gi) in row.iter_mut().zip(grow) {
                            *x += f * gi;
                        }
                    }
                });
            }
            &Op::LeakyRelu { a, slope } => {
                let av = self.value(a).data();
                acc(a, &mut |ga| {
                    for ((x, &gi), &xi) in ga.iter_mut().zip(g).zip(av) {
                        *x += if xi > 0.0 { gi } else { slope * gi };
                    }
                });
            }
            Op::NormalizeRows { a, inv_std } => {
                let y = node.value.data();
                let cols = node.value.cols();
                acc(*a, &mut |ga| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let gm = gr.iter().sum::<f64>() / cols as f64;
                        let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for ((x, &gi), &yi) in ga[r * cols..(r + 1) * cols].iter_mut().zip(gr).zip(yr) {
                            *x += is * (gi - gm - yi * gy);
                        }
                    }
                });
            }
            Op::Concat { parts, outer, widths } => {
                let row_width: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    acc(p, &mut |gp| {
                        for o in 0..*outer {
                            let src = &g[o * row_width + offset..o * row_width + offset + w];
                            add_into(&mut gp[o * w..(o + 1) * w], src);
                        }
                    });
                    offset += w;
                }
            }
            &Op::SliceLast { a, start, end } => {
                let cols = self.value(a).cols();
                let w = end - start;
                acc(a, &mut |ga| {
                    for (row, grow) in ga.chunks_mut(cols).zip(g.chunks(w)) {
                        add_into(&mut row[start..end], grow);
                    }
                });
            }
            &Op::Reshape { a } => acc(a, &mut |ga| add_into(ga, g)),
            Op::GatherRows { table, indices } => {
                let cols = self.value(*table).cols();
                acc(*table, &mut |gt| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut gt[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            &Op::SoftmaxRows { a } => {
                let y = node.value.data();
                let cols = node.value.cols();
                acc(a, &mut |ga| {
                    for ((gr, yr), gar) in g.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        softmax_backward(yr, gr, gar);
                    }
                });
            }
            Op::EdgeDot { q, k, edges, scale } => {
                let (qt, kt) = (self.value(*q), self.value(*k));
                let cols = qt.cols();
                acc(*q, &mut |gq| {
                    for e in 0..edges.num_edges() {
                        let d = edges.destination(e);
                        let c = scale * g[e];
                        for (x, &kv) in gq[d * cols..(d + 1) * cols].iter_mut().zip(kt.row(edges.source(e))) {
                            *x += c * kv;
                        }
                    }
                });
                acc(*k, &mut |gk| {
                    for e in 0..edges.num_edges() {
                        let s = edges.source(e);
                        let c = scale * g[e];
                        for (x, &qv) in gk[s * cols..(s + 1) * cols].iter_mut().zip(qt.row(edges.destination(e))) {
                            *x += c * qv;
                        }
                    }
                });
            }
            Op::NeighborSoftmax { scores, edges } => {
                let y = node.value.data();
                acc(*scores, &mut |gs| {
                    for dst in 0..edges.num_nodes() {
                        let r = edges.group(dst);
                        softmax_backward(&y[r.clone()], &g[r.clone()], &mut gs[r]);
                    }
                });
            }
            Op::EdgeAggregate { weights, values, edges } => {
                let (w, v) = (self.value(*weights), self.value(*values));
                let cols = v.cols();
                acc(*weights, &mut |gw| {
                    for (e, x) in gw.iter_mut().enumerate() {
                        let d = edges.destination(e);
                        let gd = &g[d * cols..(d + 1) * cols];
                        *x += gd.iter().zip(v.row(edges.source(e))).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
                acc(*values, &mut |gv| {
                    for e in 0..edges.num_edges() {
                        let (d, s) = (edges.destination(e), edges.source(e));
                        let we = w.data()[e];
                        for (x, &gi) in gv[s * cols..(s + 1) * cols].iter_mut().zip(&g[d * cols..(d + 1) * cols]) {
                            *x += we * gi;
                        }
                    }
                });
            }
            &Op::Sum { a } => acc(a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            &Op::Mean { a } => {
                let n = self.value(a).len() as f64;
                acc(a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::Bce { p, targets, eps } => {
                let pv = self.value(*p).data();
                let n = targets.len() as f64;
                acc(*p, &mut |gp| {
                    for ((x, &pi), &y) in gp.iter_mut().zip(pv).zip(targets.iter()) {
                        if pi < *eps || pi > 1.0 - eps {
                            continue;
                        }
                        *x += g[0] * (-y / pi + (1.0 - y) / (1.0 - pi)) / n;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose_blocks(data: &[f64], batch: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for t in 0..batch {
        let src = &data[t * m * n..(t + 1) * m * n];
        let dst = &mut out[t * m * n..(t + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

/// Max-subtracted softmax over the visible entries of `x`; hidden entries get
/// zero, and a row with no visible entries is all zero.
fn softmax_into(x: &[f64], visible: impl Fn(usize) -> bool, out: &mut [f64]) {
    let max = x
        .iter()
        .enumerate()
        .filter(|&(j, _)| visible(j))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut denom = 0.0;
    for (j, (o, &v)) in out.iter_mut().zip(x).enumerate() {
        *o = if visible(j) { (v - max).exp() } else { 0.0 };
        denom += *o;
    }
    out.iter_mut().for_each(|o| *o /= denom);
}

fn softmax_backward(y: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, &yi), &gi) in out.iter_mut().zip(y).zip(g) {
        *o += yi * (gi - dot);
    }
}
