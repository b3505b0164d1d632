//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use botdgt::autodiff::{finite_difference_check, GradCheckConfig, GradCheckReport, Tensor, Var};
use botdgt::dyngraph::{
    build_snapshots_with_nodes, compute_metrics, DynamicGraph, InteractionRecord, SnapshotConfig,
    SnapshotMetrics, FOLLOW,
};
use botdgt::model::{
    bce_loss, forward, init_params, LossScope, ModelConfig, ModelError, ModelInputs, ModelParams,
    Split, TrainingData,
};
use botdgt::structural::{StructuralConfig, StructuralParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense directed adjacency `adj[u][v][relation]`, built straight from records.
pub struct DenseGraph {
    pub n: usize,
    pub edge: Vec<Vec<Vec<bool>>>,
}

impl DenseGraph {
    pub fn from_records(n: usize, records: &[InteractionRecord], relations: usize) -> Self {
        let mut edge = vec![vec![vec![false; relations]; n]; n];
        for r in records {
            if r.source != r.target {
                edge[r.source][r.target][r.relation as usize] = true;
            }
        }
        Self { n, edge }
    }

    pub fn any(&self, u: usize, v: usize) -> bool {
        self.edge[u][v].iter().any(|&e| e)
    }

    pub fn connected(&self, u: usize, v: usize) -> bool {
        self.any(u, v) || self.any(v, u)
    }

    /// Symmetrized neighbor set of `i`, ascending.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| j != i && self.connected(i, j)).collect()
    }

    /// (numerator, denominator) of the clustering coefficient, plus |e_v| and k_v.
    pub fn lcc_rational(&self, i: usize) -> (u64, u64, usize, usize) {
        let k: usize = (0..self.n)
            .map(|j| {
                self.edge[i][j].iter().filter(|&&e| e).count()
                    + self.edge[j][i].iter().filter(|&&e| e).count()
            })
            .sum();
        let nb = self.neighbors(i);
        let mut links = 0;
        for a in 0..nb.len() {
            for b in (a + 1)..nb.len() {
                if self.connected(nb[a], nb[b]) {
                    links += 1;
                }
            }
        }
        if k < 2 {
            (0, 1, links, k)
        } else {
            (2 * links as u64, (k * (k - 1)) as u64, links, k)
        }
    }

    /// (bidirectional follows, followings).
    pub fn blr_counts(&self, i: usize) -> (usize, usize) {
        let f = FOLLOW as usize;
        let fing = (0..self.n).filter(|&j| j != i && self.edge[i][j][f]).count();
        let blinks = (0..self.n)
            .filter(|&j| j != i && self.edge[i][j][f] && self.edge[j][i][f])
            .count();
        (blinks, fing)
    }
}

/// Random directed multi-relation graph as records, all at timestamp 1.
pub fn random_records(rng: &mut ChaCha8Rng, n: usize, density: f64, relations: u32) -> Vec<InteractionRecord> {
    let mut out = Vec::new();
    for u in 0..n {
        for v in 0..n {
            if u != v && rng.random_bool(density) {
                out.push(InteractionRecord {
                    source: u,
                    target: v,
                    timestamp: 1,
                    relation: rng.random_range(0..relations),
                });
            }
        }
    }
    if out.is_empty() {
        out.push(InteractionRecord { source: 0, target: n - 1, timestamp: 1, relation: FOLLOW });
    }
    out
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Records spread over `t` one-day windows; every window gets at least one
/// edge so each snapshot is non-empty.
pub fn random_dynamic_records(rng: &mut ChaCha8Rng, n: usize, t: usize, density: f64) -> Vec<InteractionRecord> {
    let day = botdgt::dyngraph::SECONDS_PER_DAY;
    let mut out = Vec::new();
    for u in 0..n {
        for v in 0..n {
            if u != v && rng.random_bool(density) {
                let w = rng.random_range(0..t) as u64;
                out.push(InteractionRecord {
                    source: u,
                    target: v,
                    timestamp: w * day + rng.random_range(1..=day),
                    relation: rng.random_range(0..2),
                });
            }
        }
    }
    for w in 0..t as u64 {
        let u = rng.random_range(0..n);
        let v = (u + 1 + rng.random_range(0..n - 1)) % n;
        out.push(InteractionRecord { source: u, target: v, timestamp: w * day + 1, relation: FOLLOW });
    }
    out
}

pub fn build_graph(records: &[InteractionRecord], n: usize, t: usize) -> (DynamicGraph, SnapshotMetrics) {
    let cfg = SnapshotConfig::days(1).with_num_snapshots(t);
    let (g, _) = build_snapshots_with_nodes(records, n, &cfg).unwrap();
    let m = compute_metrics(&g);
    (g, m)
}

/// A small model: d = F = 4, two structural layers and heads, two temporal
/// heads, classifier width 3, five buckets.
pub fn small_config(input_dim: usize, t: usize) -> ModelConfig {
    ModelConfig {
        hidden_dim: 4,
        structural_layers: 2,
        structural_heads: 2,
        temporal_heads: 2,
        classifier_hidden: 3,
        num_buckets: 5,
        ..ModelConfig::new(input_dim, t)
    }
}

/// Replaces every parameter with uniform draws in `[-scale, scale]`, biases
/// and embeddings included.
pub fn randomize(params: &mut ModelParams, rng: &mut ChaCha8Rng, scale: f64) {
    for t in params.leaves_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// `W·x + b` with `W [out × in]`.
pub fn affine(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|o| b.data()[o] + w.row(o).iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect()
}

/// Structural encoder by plain loops over an explicit neighbor list
/// (`nbrs[i]` excludes `i`; self-loops are added here when configured).
pub fn dense_structural(
    x: &Tensor,
    nbrs: &[Vec<usize>],
    active: &[bool],
    params: &StructuralParams<Tensor>,
    cfg: &StructuralConfig,
) -> Vec<Vec<f64>> {
    let n = x.rows();
    let mut h: Vec<Vec<f64>> = (0..n)
        .map(|i| affine(&params.w_in, &params.b_in, x.row(i)).into_iter().map(|v| leaky(v, cfg.slope)).collect())
        .collect();
    for layer in &params.layers {
        let d = h[0].len() as f64;
        let mut next = vec![Vec::new(); n];
        for head in &layer.heads {
            let q: Vec<Vec<f64>> = h.iter().map(|r| affine(&head.w_q, &head.b_q, r)).collect();
            let k: Vec<Vec<f64>> = h.iter().map(|r| affine(&head.w_k, &head.b_k, r)).collect();
            let v: Vec<Vec<f64>> = h.iter().map(|r| affine(&head.w_v, &head.b_v, r)).collect();
            for i in 0..n {
                let mut group = nbrs[i].clone();
                if cfg.self_loops {
                    group.push(i);
                }
                let width = head.w_v.rows();
                if group.is_empty() {
                    next[i].extend(std::iter::repeat_n(0.0, width));
                    continue;
                }
                let scores: Vec<f64> = group
                    .iter()
                    .map(|&j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..width {
                    let m: f64 = group.iter().zip(&e).map(|(&j, w)| w / z * v[j][c]).sum();
                    next[i].push(leaky(m, cfg.slope));
                }
            }
        }
        h = next;
    }
    for (row, &a) in h.iter_mut().zip(active) {
        if !a {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    h
}

/// Masked multi-head attention over one `[T × F]` sequence by plain loops.
/// Returns `(z [T][F], weights[head][a][b])`.
pub fn dense_temporal(
    s: &[Vec<f64>],
    active: &[bool],
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    heads: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let t = s.len();
    let f = s[0].len();
    let proj = |w: &Tensor| -> Vec<Vec<f64>> {
        s.iter()
            .map(|r| (0..f).map(|c| (0..f).map(|g| r[g] * w.get2(g, c)).sum()).collect())
            .collect()
    };
    let (q, k, v) = (proj(wq), proj(wk), proj(wv));
    let width = f / heads;
    let mut z = vec![vec![0.0; f]; t];
    let mut weights = vec![vec![vec![0.0; t]; t]; heads];
    for h in 0..heads {
        let cols = h * width..(h + 1) * width;
        for a in 0..t {
            let keys: Vec<usize> = (0..=a).filter(|&b| active[a] && active[b]).collect();
            if keys.is_empty() {
                continue;
            }
            let scores: Vec<f64> = keys
                .iter()
                .map(|&b| cols.clone().map(|c| q[a][c] * k[b][c]).sum::<f64>() / (f as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|x| (x - max).exp()).collect();
            let sum: f64 = e.iter().sum();
            for (&b, w) in keys.iter().zip(&e) {
                weights[h][a][b] = w / sum;
                for c in cols.clone() {
                    z[a][c] += w / sum * v[b][c];
                }
            }
        }
    }
    (z, weights)
}

pub struct ModelInstance {
    pub config: ModelConfig,
    pub data: TrainingData,
    pub params: ModelParams,
}

/// Random labeled dynamic graph with random parameters (biases and
/// embeddings included), all nodes in the training split.
pub fn model_instance(seed: u64, n: usize, t: usize) -> ModelInstance {
    let mut r = rng(seed);
    let records = random_dynamic_records(&mut r, n, t, 0.25);
    let (g, m) = build_graph(&records, n, t);
    let config = small_config(3, t);
    let x = random_tensor(&mut r, &[n, 3]);
    let inputs = ModelInputs::new(&g, &m, &x, &config).unwrap();
    let labels = (0..n).map(|i| Some(i % 2 == 0)).collect();
    let data = TrainingData::new(inputs, labels, vec![Some(Split::Train); n]).unwrap();
    let mut params = init_params(&config, seed).unwrap();
    randomize(&mut params, &mut r, 0.7);
    ModelInstance { config, data, params }
}

/// Every leaf of `params` in `map` order.
pub fn leaves(params: &ModelParams) -> Vec<Tensor> {
    let mut out = Vec::new();
    params.map(&mut |t| out.push(t.clone()));
    out
}

/// Finite-difference check of the mean training loss over all parameters.
pub fn model_gradcheck(inst: &ModelInstance) -> GradCheckReport {
    let (rows, targets) = inst.data.loss_rows(LossScope::AllSnapshots);
    finite_difference_check(
        |tape, vars: &[Var]| {
            let mut it = vars.iter().copied();
            let bound = inst.params.map(&mut |_| it.next().unwrap());
            let out = forward(tape, &bound, &inst.data.inputs, &inst.config).map_err(|e| match e {
                ModelError::Autodiff(e) => e,
                other => panic!("{other}"),
            })?;
            bce_loss(tape, out.probs, &rows, &targets)
        },
        &leaves(&inst.params),
        &GradCheckConfig::default(),
    )
    .unwrap()
}
