use serde::Serialize;

use super::{neighborhood, Direction, DynamicGraph, Snapshot};

/// Raw counts behind the two ratio metrics of one node in one snapshot.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct NodeMetrics {
    pub lcc: f64,
    pub blr: f64,
    /// In-degree plus out-degree; parallel edges with different relations
    /// count separately.
    pub degree_total: usize,
    pub num_followings: usize,
    pub num_bidirectional: usize,
    /// Direction-collapsed edges among the node's neighbors.
    pub neighbor_edge_count: usize,
}

fn node_metrics(snapshot: &Snapshot, node: usize, follow: u32) -> NodeMetrics {
    let Some(list) = snapshot.adjacency.get(node) else {
        return NodeMetrics::default();
    };
    let degree_total = list.len();
    let neighbors = neighborhood(snapshot, node);
    let mut links = 0;
    for (idx, &u) in neighbors.iter().enumerate() {
        let later = &neighbors[idx + 1..];
        // each unordered pair {u, w} is counted once, from the smaller id
        links += neighborhood(snapshot, u)
            .into_iter()
            .filter(|w| later.binary_search(w).is_ok())
            .count();
    }
    let lcc = if degree_total < 2 {
        0.0
    } else {
        2.0 * links as f64 / (degree_total as f64 * (degree_total as f64 - 1.0))
    };

    let mut followings = 0;
    let mut bidirectional = 0;
    for a in list {
        if a.direction == Direction::Out && a.relation == follow && a.neighbor != node {
            followings += 1;
            if snapshot.has_edge(a.neighbor, node, follow) {
                bidirectional += 1;
            }
        }
    }
    let blr = if followings == 0 {
        0.0
    } else {
        bidirectional as f64 / followings as f64
    };
    NodeMetrics {
        lcc,
        blr,
        degree_total,
        num_followings: followings,
        num_bidirectional: bidirectional,
        neighbor_edge_count: links,
    }
}

/// `2·|e_v| / (k_v·(k_v − 1))`, or 0 when `k_v < 2`.
pub fn local_clustering_coefficient(snapshot: &Snapshot, node: usize) -> f64 {
    node_metrics(snapshot, node, u32::MAX).lcc
}

/// Share of the node's follow targets that follow it back, or 0 when it
/// follows nobody.
pub fn bidirectional_links_ratio(snapshot: &Snapshot, node: usize, follow_relation: u32) -> f64 {
    node_metrics(snapshot, node, follow_relation).blr
}

/// Per-(snapshot, node) metric table, snapshot-major.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SnapshotMetrics {
    pub num_nodes: usize,
    pub num_snapshots: usize,
    entries: Vec<NodeMetrics>,
}

impl SnapshotMetrics {
    pub fn get(&self, node: usize, k: usize) -> &NodeMetrics {
        &self.entries[k * self.num_nodes + node]
    }

    pub fn lcc(&self, node: usize, k: usize) -> f64 {
        self.get(node, k).lcc
    }

    pub fn blr(&self, node: usize, k: usize) -> f64 {
        self.get(node, k).blr
    }

    pub fn snapshot(&self, k: usize) -> &[NodeMetrics] {
        &self.entries[k * self.num_nodes..(k + 1) * self.num_nodes]
    }
}

pub fn compute_metrics(graph: &DynamicGraph) -> SnapshotMetrics {
    let follow = graph.config.follow_relation;
    let entries = graph
        .snapshots
        .iter()
        .flat_map(|s| (0..graph.num_nodes).map(move |i| node_metrics(s, i, follow)))
        .collect();
    SnapshotMetrics {
        num_nodes: graph.num_nodes,
        num_snapshots: graph.num_snapshots(),
        entries,
    }
}
