//! Dynamic social graph: timestamped interactions bucketed into an ordered
//! sequence of snapshots, plus the per-node structural metrics (local
//! clustering coefficient and bidirectional links ratio) computed on each one.

mod metrics;

pub use metrics::{
    bidirectional_links_ratio, compute_metrics, local_clustering_coefficient, NodeMetrics,
    SnapshotMetrics,
};

use serde::Serialize;
use thiserror::Error;

pub const SECONDS_PER_DAY: u64 = 86_400;

/// Relation tag used for follow edges unless configured otherwise.
pub const FOLLOW: u32 = 0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("no interactions")]
    NoInteractions,
    #[error("snapshot interval must be positive")]
    ZeroInterval,
    #[error("num_snapshots must be at least 1")]
    ZeroSnapshots,
    #[error("node id {node} out of range for {num_nodes} nodes")]
    NodeOutOfRange { node: usize, num_nodes: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct InteractionRecord {
    pub source: usize,
    pub target: usize,
    pub timestamp: u64,
    pub relation: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SnapshotConfig {
    /// Snapshot spacing in seconds.
    pub interval_secs: u64,
    /// Timestamp the first interval starts from.
    pub origin: u64,
    /// Derived from the latest timestamp when `None`.
    pub num_snapshots: Option<usize>,
    /// Snapshot `k` holds every interaction up to its boundary when true, and
    /// only the interactions of its own interval otherwise.
    pub cumulative: bool,
    pub allow_self_loops: bool,
    /// Relation tag counted as "follow" by the bidirectional links ratio.
    pub follow_relation: u32,
}

impl SnapshotConfig {
    pub fn days(interval_days: u64) -> Self {
        Self {
            interval_secs: interval_days * SECONDS_PER_DAY,
            origin: 0,
            num_snapshots: None,
            cumulative: true,
            allow_self_loops: false,
            follow_relation: FOLLOW,
        }
    }

    pub fn with_origin(mut self, origin: u64) -> Self {
        self.origin = origin;
        self
    }

    pub fn with_num_snapshots(mut self, n: usize) -> Self {
        self.num_snapshots = Some(n);
        self
    }

    pub fn windowed(mut self) -> Self {
        self.cumulative = false;
        self
    }

    /// Boundary `t_k` of snapshot `k`.
    pub fn boundary(&self, k: usize) -> u64 {
        self.origin + (k as u64 + 1) * self.interval_secs
    }

    /// Interval index a timestamp falls into: `(t_{k−1}, t_k]`, with anything at
    /// or before the origin mapped to 0.
    pub fn window_of(&self, timestamp: u64) -> usize {
        if timestamp <= self.origin {
            return 0;
        }
        let offset = timestamp - self.origin;
        (offset.div_ceil(self.interval_secs) - 1) as usize
    }

    fn validate(&self) -> Result<(), GraphError> {
        if self.interval_secs == 0 {
            return Err(GraphError::ZeroInterval);
        }
        if self.num_snapshots == Some(0) {
            return Err(GraphError::ZeroSnapshots);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Direction {
    Out,
    In,
}

/// One adjacency entry: `neighbor` is reached by an edge in `direction`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Adjacency {
    pub neighbor: usize,
    pub direction: Direction,
    pub relation: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Snapshot {
    pub index: usize,
    pub boundary: u64,
    /// Sorted, duplicate-free entries per node.
    pub adjacency: Vec<Vec<Adjacency>>,
    pub node_active: Vec<bool>,
    num_edges: usize,
}

impl Snapshot {
    fn from_edges(index: usize, boundary: u64, num_nodes: usize, edges: &mut Vec<(usize, usize, u32)>) -> Self {
        edges.sort_unstable();
        edges.dedup();
        let mut adjacency = vec![Vec::new(); num_nodes];
        let mut node_active = vec![false; num_nodes];
        for &(u, v, relation) in edges.iter() {
            adjacency[u].push(Adjacency {
                neighbor: v,
                direction: Direction::Out,
                relation,
            });
            adjacency[v].push(Adjacency {
                neighbor: u,
                direction: Direction::In,
                relation,
            });
            node_active[u] = true;
            node_active[v] = true;
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Self {
            index,
            boundary,
            adjacency,
            node_active,
            num_edges: edges.len(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.len()
    }

    /// Number of distinct `(source, target, relation)` triples.
    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    pub fn num_active(&self) -> usize {
        self.node_active.iter().filter(|&&a| a).count()
    }

    pub fn is_active(&self, node: usize) -> bool {
        self.node_active.get(node).copied().unwrap_or(false)
    }

    /// Directed edge triples in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, u32)> + '_ {
        self.adjacency.iter().enumerate().flat_map(|(u, list)| {
            list.iter()
                .filter(|a| a.direction == Direction::Out)
                .map(move |a| (u, a.neighbor, a.relation))
        })
    }

    /// Whether `u → v` exists under `relation`.
    pub fn has_edge(&self, u: usize, v: usize, relation: u32) -> bool {
        self.adjacency[u]
            .binary_search(&Adjacency {
                neighbor: v,
                direction: Direction::Out,
                relation,
            })
            .is_ok()
    }
}

/// Direction-collapsed neighbors of `node`, ascending and without `node` itself.
pub fn neighborhood(snapshot: &Snapshot, node: usize) -> Vec<usize> {
    let Some(list) = snapshot.adjacency.get(node) else {
        return Vec::new();
    };
    let mut out: Vec<usize> = list
        .iter()
        .map(|a| a.neighbor)
        .filter(|&n| n != node)
        .collect();
    out.dedup(); // entries are sorted by neighbor first
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DynamicGraph {
    pub snapshots: Vec<Snapshot>,
    pub num_nodes: usize,
    pub config: SnapshotConfig,
}

impl DynamicGraph {
    pub fn num_snapshots(&self) -> usize {
        self.snapshots.len()
    }

    pub fn last(&self) -> &Snapshot {
        self.snapshots.last().expect("graph has at least one snapshot")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SnapshotStats {
    pub index: usize,
    pub boundary: u64,
    pub active_nodes: usize,
    pub edges: usize,
}

/// What happened to the input records while building snapshots.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub total_records: usize,
    pub clamped_before_origin: usize,
    pub excluded_after_last_boundary: usize,
    pub self_loops_dropped: usize,
    pub duplicate_records: usize,
    pub snapshots: Vec<SnapshotStats>,
}

/// Builds snapshots over `max id + 1` nodes.
pub fn build_snapshots(
    records: &[InteractionRecord],
    config: &SnapshotConfig,
) -> Result<(DynamicGraph, IngestReport), GraphError> {
    let num_nodes = records
        .iter()
        .map(|r| r.source.max(r.target) + 1)
        .max()
        .ok_or(GraphError::NoInteractions)?;
    build_snapshots_with_nodes(records, num_nodes, config)
}

pub fn build_snapshots_with_nodes(
    records: &[InteractionRecord],
    num_nodes: usize,
    config: &SnapshotConfig,
) -> Result<(DynamicGraph, IngestReport), GraphError> {
    config.validate()?;
    if records.is_empty() {
        return Err(GraphError::NoInteractions);
    }
    if let Some(r) = records.iter().find(|r| r.source.max(r.target) >= num_nodes) {
        return Err(GraphError::NodeOutOfRange {
            node: r.source.max(r.target),
            num_nodes,
        });
    }
    let max_ts = records.iter().map(|r| r.timestamp).max().unwrap_or(0);
    let n_snap = config
        .num_snapshots
        .unwrap_or_else(|| config.window_of(max_ts) + 1);

    let mut report = IngestReport {
        total_records: records.len(),
        ..Default::default()
    };
    // (window, source, target, relation)
    let mut windowed: Vec<(usize, usize, usize, u32)> = Vec::with_capacity(records.len());
    for r in records {
        if r.source == r.target && !config.allow_self_loops {
            report.self_loops_dropped += 1;
            continue;
        }
        let w = config.window_of(r.timestamp);
        if w >= n_snap {
            report.excluded_after_last_boundary += 1;
            continue;
        }
        if r.timestamp < config.origin {
            report.clamped_before_origin += 1;
        }
        windowed.push((w, r.source, r.target, r.relation));
    }
    {
        let mut uniq: Vec<_> = windowed.iter().map(|&(_, u, v, r)| (u, v, r)).collect();
        uniq.sort_unstable();
        uniq.dedup();
        report.duplicate_records = windowed.len() - uniq.len();
    }
    windowed.sort_unstable();

    let mut snapshots = Vec::with_capacity(n_snap);
    let mut cursor = 0;
    let mut acc: Vec<(usize, usize, u32)> = Vec::new();
    for k in 0..n_snap {
        if !config.cumulative {
            acc.clear();
        }
        while cursor < windowed.len() && windowed[cursor].0 == k {
            let (_, u, v, rel) = windowed[cursor];
            acc.push((u, v, rel));
            cursor += 1;
        }
        let snap = Snapshot::from_edges(k, config.boundary(k), num_nodes, &mut acc);
        report.snapshots.push(SnapshotStats {
            index: k,
            boundary: snap.boundary,
            active_nodes: snap.num_active(),
            edges: snap.num_edges(),
        });
        snapshots.push(snap);
    }

    Ok((
        DynamicGraph {
            snapshots,
            num_nodes,
            config: config.clone(),
        },
        report,
    ))
}
