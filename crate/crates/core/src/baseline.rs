//! Decision-stump baseline over final-snapshot degree, clustering and
//! reciprocity.

use serde::Serialize;

use crate::dyngraph::SnapshotMetrics;
use crate::model::{Metrics, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StumpFeature {
    Degree,
    Lcc,
    Blr,
}

/// Predicts bot when `value > threshold` (or `<` when `below` is set).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ThresholdBaseline {
    pub feature: StumpFeature,
    pub threshold: f64,
    pub below: bool,
    pub train_accuracy: f64,
}

fn value(metrics: &SnapshotMetrics, feature: StumpFeature, node: usize) -> f64 {
    let k = metrics.num_snapshots - 1;
    let m = metrics.get(node, k);
    match feature {
        StumpFeature::Degree => m.degree_total as f64,
        StumpFeature::Lcc => m.lcc,
        StumpFeature::Blr => m.blr,
    }
}

impl ThresholdBaseline {
    /// Picks the feature, direction and threshold with the best training
    /// accuracy; earlier candidates win ties.
    pub fn fit(metrics: &SnapshotMetrics, labels: &[Option<bool>], splits: &[Option<Split>]) -> Option<Self> {
        let train: Vec<usize> = (0..labels.len())
            .filter(|&i| labels[i].is_some() && splits[i] == Some(Split::Train))
            .collect();
        if train.is_empty() {
            return None;
        }
        let mut best: Option<Self> = None;
        for feature in [StumpFeature::Degree, StumpFeature::Lcc, StumpFeature::Blr] {
            let mut values: Vec<f64> = train.iter().map(|&i| value(metrics, feature, i)).collect();
            values.sort_by(f64::total_cmp);
            values.dedup();
            let mut cuts = vec![values[0] - 1.0];
            cuts.extend(values.windows(2).map(|w| (w[0] + w[1]) / 2.0));
            for threshold in cuts {
                for below in [false, true] {
                    let stump = Self {
                        feature,
                        threshold,
                        below,
                        train_accuracy: 0.0,
                    };
                    let correct = train
                        .iter()
                        .filter(|&&i| stump.predict(metrics, i) == labels[i].unwrap())
                        .count();
                    let acc = correct as f64 / train.len() as f64;
                    if best.is_none_or(|b| acc > b.train_accuracy) {
                        best = Some(Self {
                            train_accuracy: acc,
                            ..stump
                        });
                    }
                }
            }
        }
        best
    }

    pub fn predict(&self, metrics: &SnapshotMetrics, node: usize) -> bool {
        let v = value(metrics, self.feature, node);
        if self.below {
            v < self.threshold
        } else {
            v > self.threshold
        }
    }

    pub fn evaluate(&self, metrics: &SnapshotMetrics, labels: &[Option<bool>], splits: &[Option<Split>], split: Split) -> Metrics {
        Metrics::from_pairs(
            (0..labels.len())
                .filter(|&i| splits[i] == Some(split))
                .filter_map(|i| labels[i].map(|l| (self.predict(metrics, i), l))),
        )
    }
}
