//! Seeded synthetic social graphs with planted bot behavior.
//!
//! Humans live in small, densely connected, mostly reciprocal communities and
//! add those ties gradually over the whole observation period. Every account
//! (human or bot) also follows a few random accounts, which rarely follow
//! back. Bots differ only in when and how they form ties:
//!
//! * without camouflage, bots never join communities;
//! * with camouflage, bots only make random follows until the final window,
//!   and then form communities among themselves with the same density and
//!   reciprocity as humans, so the final snapshot looks alike for both
//!   classes while the history does not.
//!
//! Windows are `window_days` wide and start at time 0.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::dataset::{stratified_splits, Dataset};
use crate::dyngraph::{InteractionRecord, SnapshotConfig, FOLLOW, SECONDS_PER_DAY};

/// Relation tag reserved for non-follow interactions.
pub const RETWEET: u32 = 1;

/// What the per-node feature vectors contain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// A single constant column.
    Constant,
    /// `[1, ln(1 + in-degree), ln(1 + out-degree)]` over all interactions,
    /// like profile counters read at collection time.
    Degree,
    /// Independent standard normal columns.
    Noise(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_humans: usize,
    pub num_bots: usize,
    pub num_snapshots: usize,
    pub human_cluster_size: usize,
    /// Random follows made by each bot.
    pub bot_out_degree: usize,
    /// Probability that a tie inside a community is mutual.
    pub reciprocity_human: f64,
    /// Probability that a random follow is returned.
    pub reciprocity_bot: f64,
    pub camouflage: bool,
    pub seed: u64,
    /// Random follows made by each human; also returned with
    /// `reciprocity_bot`.
    pub human_out_degree: usize,
    /// Probability that a pair inside a community is connected at all.
    pub cluster_density: f64,
    pub window_days: u64,
    pub features: FeatureKind,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl SynthConfig {
    pub fn separable(num_nodes: usize, num_snapshots: usize, seed: u64) -> Self {
        let num_bots = num_nodes / 2;
        Self {
            num_humans: num_nodes - num_bots,
            num_bots,
            num_snapshots,
            human_cluster_size: 8,
            bot_out_degree: 3,
            reciprocity_human: 0.9,
            reciprocity_bot: 0.1,
            camouflage: false,
            seed,
            human_out_degree: 3,
            cluster_density: 1.0,
            window_days: 60,
            features: FeatureKind::Degree,
            train_fraction: 0.7,
            val_fraction: 0.1,
        }
    }

    pub fn camouflaged(num_nodes: usize, num_snapshots: usize, seed: u64) -> Self {
        Self {
            camouflage: true,
            ..Self::separable(num_nodes, num_snapshots, seed)
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_humans + self.num_bots
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.num_nodes() < 2 {
            return Err("need at least 2 nodes".into());
        }
        if self.num_snapshots == 0 || self.window_days == 0 {
            return Err("num_snapshots and window_days must be positive".into());
        }
        if self.camouflage && self.num_snapshots < 2 {
            return Err("camouflage needs at least 2 snapshots".into());
        }
        if self.human_cluster_size < 2 {
            return Err("human_cluster_size must be at least 2".into());
        }
        if self.human_cluster_size > self.num_humans {
            return Err(format!(
                "cluster size {} exceeds {} humans",
                self.human_cluster_size, self.num_humans
            ));
        }
        if self.features == FeatureKind::Noise(0) {
            return Err("noise features need at least one column".into());
        }
        for (name, p) in [
            ("reciprocity_human", self.reciprocity_human),
            ("reciprocity_bot", self.reciprocity_bot),
            ("cluster_density", self.cluster_density),
            ("train_fraction", self.train_fraction),
            ("val_fraction", self.val_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must be in [0, 1]"));
            }
        }
        if self.train_fraction + self.val_fraction > 1.0 {
            return Err("train_fraction + val_fraction exceeds 1".into());
        }
        Ok(())
    }

    fn window_secs(&self) -> u64 {
        self.window_days * SECONDS_PER_DAY
    }
}

struct Emitter<'a> {
    rng: &'a mut ChaCha8Rng,
    window: u64,
    records: Vec<InteractionRecord>,
    follows: HashSet<(usize, usize)>,
}

impl Emitter<'_> {
    /// A timestamp strictly inside a window drawn uniformly from `windows`.
    fn time_in(&mut self, windows: std::ops::Range<usize>) -> u64 {
        let w = self.rng.random_range(windows) as u64;
        w * self.window + self.rng.random_range(1..=self.window)
    }

    fn follow(&mut self, u: usize, v: usize, ts: u64) {
        self.follows.insert((u, v));
        self.records.push(InteractionRecord {
            source: u,
            target: v,
            timestamp: ts,
            relation: FOLLOW,
        });
    }

    /// Community ties among `members`, each placed in a window from `windows`.
    fn community(&mut self, members: &[usize], cfg: &SynthConfig, windows: std::ops::Range<usize>) {
        for (a, &u) in members.iter().enumerate() {
            for &v in &members[a + 1..] {
                if !self.rng.random_bool(cfg.cluster_density) {
                    continue;
                }
                let ts = self.time_in(windows.clone());
                if self.rng.random_bool(cfg.reciprocity_human) {
                    self.follow(u, v, ts);
                    self.follow(v, u, ts);
                } else if self.rng.random_bool(0.5) {
                    self.follow(u, v, ts);
                } else {
                    self.follow(v, u, ts);
                }
            }
        }
    }

    /// `count` follows from `u` to uniformly random nodes not yet linked to
    /// `u` by a follow in either direction, so that only the follow-back draw
    /// makes a link mutual. Stops early when no such node is found.
    fn random_follows(&mut self, u: usize, n: usize, count: usize, reciprocity: f64, windows: std::ops::Range<usize>) {
        for _ in 0..count {
            let Some(v) = (0..4 * n).find_map(|_| {
                let mut v = self.rng.random_range(0..n - 1);
                if v >= u {
                    v += 1;
                }
                let linked = self.follows.contains(&(u, v)) || self.follows.contains(&(v, u));
                (!linked).then_some(v)
            }) else {
                return;
            };
            let ts = self.time_in(windows.clone());
            self.follow(u, v, ts);
            if self.rng.random_bool(reciprocity) {
                self.follow(v, u, ts);
            }
        }
    }
}

/// Groups of `size`; a short remainder joins the previous group.
fn clusters(nodes: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    while start < nodes.len() {
        let end = if nodes.len() - start < 2 * size { nodes.len() } else { start + size };
        out.push(&nodes[start..end]);
        start = end;
    }
    out
}

pub fn generate(cfg: &SynthConfig) -> Result<Dataset, String> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.num_nodes();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (bots, humans) = order.split_at(cfg.num_bots);
    let mut labels = vec![Some(false); n];
    for &i in bots {
        labels[i] = Some(true);
    }
    let t = cfg.num_snapshots;
    let history = if cfg.camouflage { 0..t - 1 } else { 0..t };

    let mut em = Emitter {
        rng: &mut rng,
        window: cfg.window_secs(),
        records: Vec::new(),
        follows: HashSet::new(),
    };
    for group in clusters(humans, cfg.human_cluster_size) {
        em.community(group, cfg, 0..t);
    }
    if cfg.camouflage && bots.len() >= 2 {
        for group in clusters(bots, cfg.human_cluster_size.min(bots.len())) {
            em.community(group, cfg, t - 1..t);
        }
    }
    for u in 0..n {
        if labels[u] == Some(true) {
            em.random_follows(u, n, cfg.bot_out_degree, cfg.reciprocity_bot, history.clone());
        } else {
            em.random_follows(u, n, cfg.human_out_degree, cfg.reciprocity_bot, 0..t);
        }
    }
    let records = em.records;

    let features = match cfg.features {
        FeatureKind::Constant => Tensor::filled(&[n, 1], 1.0),
        FeatureKind::Degree => {
            let mut deg = vec![[0usize; 2]; n];
            for r in &records {
                deg[r.source][1] += 1;
                deg[r.target][0] += 1;
            }
            let data = deg
                .iter()
                .flat_map(|&[i, o]| [1.0, (i as f64).ln_1p(), (o as f64).ln_1p()])
                .collect();
            Tensor::matrix(n, 3, data).map_err(|e| e.to_string())?
        }
        FeatureKind::Noise(dim) => {
            let data = (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            Tensor::matrix(n, dim, data).map_err(|e| e.to_string())?
        }
    };
    let splits = stratified_splits(&labels, cfg.train_fraction, cfg.val_fraction, cfg.seed ^ 0x5eed);
    let width = n.to_string().len();
    Ok(Dataset {
        node_ids: (0..n).map(|i| format!("{i:0width$}")).collect(),
        records,
        features,
        labels,
        splits,
        relations: vec![("follow".into(), FOLLOW), ("retweet".into(), RETWEET)],
        snapshot: SnapshotConfig::days(cfg.window_days).with_num_snapshots(t),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyngraph::compute_metrics;

    #[test]
    fn deterministic_for_a_seed() {
        let a = generate(&SynthConfig::camouflaged(60, 4, 7)).unwrap();
        let b = generate(&SynthConfig::camouflaged(60, 4, 7)).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.features, b.features);
        let c = generate(&SynthConfig::camouflaged(60, 4, 8)).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn camouflaged_bots_only_cluster_in_final_window() {
        let ds = generate(&SynthConfig::camouflaged(80, 3, 1)).unwrap();
        let (g, _, m) = ds.graph(None).unwrap();
        assert_eq!(g.num_snapshots(), 3);
        let bots: Vec<usize> = (0..80).filter(|&i| ds.labels[i] == Some(true)).collect();
        let early: f64 = bots.iter().map(|&i| m.lcc(i, 0)).sum::<f64>() / bots.len() as f64;
        let late: f64 = bots.iter().map(|&i| m.lcc(i, 2)).sum::<f64>() / bots.len() as f64;
        assert!(late > 2.0 * early, "early {early} late {late}");
        let _ = compute_metrics(&g);
    }
}
