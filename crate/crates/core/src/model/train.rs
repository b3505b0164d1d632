use serde::{Deserialize, Serialize};

use super::{bce_loss, forward, ModelConfig, ModelError, ModelInputs, ModelParams, Result};
use crate::autodiff::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    /// Every snapshot at which a labeled training node is active.
    #[default]
    AllSnapshots,
    FinalSnapshot,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub loss_scope: LossScope,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            optimizer: OptimizerKind::Adam,
            loss_scope: LossScope::AllSnapshots,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Model inputs plus per-node labels (`true` = bot) and split assignments.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub inputs: ModelInputs,
    pub labels: Vec<Option<bool>>,
    pub splits: Vec<Option<Split>>,
}

impl TrainingData {
    pub fn new(inputs: ModelInputs, labels: Vec<Option<bool>>, splits: Vec<Option<Split>>) -> Result<Self> {
        let n = inputs.num_nodes();
        if labels.len() != n || splits.len() != n {
            return Err(ModelError::Input(format!(
                "{} labels and {} split entries for {n} nodes",
                labels.len(),
                splits.len()
            )));
        }
        Ok(Self { inputs, labels, splits })
    }

    /// Labeled nodes assigned to `split`, ascending.
    pub fn nodes(&self, split: Split) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i].is_some() && self.splits[i] == Some(split))
            .collect()
    }

    /// Output rows and targets scored by the training loss.
    pub fn loss_rows(&self, scope: LossScope) -> (Vec<usize>, Vec<f64>) {
        let t = self.inputs.num_snapshots();
        let ks = match scope {
            LossScope::AllSnapshots => 0..t,
            LossScope::FinalSnapshot => t - 1..t,
        };
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for i in self.nodes(Split::Train) {
            for k in ks.clone() {
                if self.inputs.is_active(i, k) {
                    rows.push(self.inputs.row(i, k));
                    targets.push(if self.labels[i] == Some(true) { 1.0 } else { 0.0 });
                }
            }
        }
        (rows, targets)
    }
}

/// Binary metrics with bot as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
}

impl Metrics {
    /// `pairs` yields `(predicted_bot, actual_bot)`. Undefined ratios are 0.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut m = Metrics::default();
        for (pred, actual) in pairs {
            match (pred, actual) {
                (true, true) => m.true_positives += 1,
                (true, false) => m.false_positives += 1,
                (false, false) => m.true_negatives += 1,
                (false, true) => m.false_negatives += 1,
            }
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let total = m.true_positives + m.false_positives + m.true_negatives + m.false_negatives;
        m.accuracy = ratio(m.true_positives + m.true_negatives, total);
        m.precision = ratio(m.true_positives, m.true_positives + m.false_positives);
        m.recall = ratio(m.true_positives, m.true_positives + m.false_negatives);
        m.f1 = if m.precision + m.recall == 0.0 {
            0.0
        } else {
            2.0 * m.precision * m.recall / (m.precision + m.recall)
        };
        m
    }

    pub fn support(&self) -> usize {
        self.true_positives + self.false_positives + self.true_negatives + self.false_negatives
    }
}

/// Bot when `p_bot >= 0.5`; an exact tie goes to bot.
pub fn is_bot(p_bot: f64) -> bool {
    p_bot >= 0.5
}

fn final_snapshot_metrics(probs: &Tensor, data: &TrainingData, nodes: &[usize]) -> Metrics {
    let last = data.inputs.num_snapshots() - 1;
    Metrics::from_pairs(nodes.iter().map(|&i| {
        let p = probs.get2(data.inputs.row(i, last), 1);
        (is_bot(p), data.labels[i] == Some(true))
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation metrics of the parameters the loss was computed with.
    pub val: Metrics,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation F1 (earliest on ties), or the final
    /// parameters when there is no validation node.
    pub params: ModelParams,
    pub best_epoch: Option<usize>,
    pub final_params: ModelParams,
    pub log: Vec<EpochRecord>,
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: &TrainingConfig) -> Self {
        Self {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            weight_decay: config.weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (idx, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            let g = grads[idx].map(Tensor::data);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j]) + self.weight_decay * *x;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *x -= self.learning_rate * mh / (vh.sqrt() + self.epsilon);
            }
        }
    }
}

fn sgd_step(params: &mut [&mut Tensor], grads: &[Option<&Tensor>], lr: f64, wd: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        let g = g.map(Tensor::data);
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let gj = g.map_or(0.0, |g| g[j]) + wd * *x;
            *x -= lr * gj;
        }
    }
}

fn collect_grads<'a>(vars: &ModelParams<Var>, grads: &'a Gradients) -> Vec<Option<&'a Tensor>> {
    vars.named().into_iter().map(|(_, v)| grads.get(*v)).collect()
}

/// Full-batch training. Each epoch runs one forward pass, records the loss
/// and validation metrics, then takes one optimizer step.
pub fn train(
    data: &TrainingData,
    model: &ModelConfig,
    training: &TrainingConfig,
    init: ModelParams,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    model.validate()?;
    let (rows, targets) = data.loss_rows(training.loss_scope);
    if rows.is_empty() {
        return Err(ModelError::Input("no active labeled training rows".into()));
    }
    let val_nodes = data.nodes(Split::Val);
    let mut params = init;
    let mut adam = Adam::new(training);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut log = Vec::with_capacity(training.epochs);

    for epoch in 0..training.epochs {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let out = forward(&mut tape, &vars, &data.inputs, model)?;
        let loss = bce_loss(&mut tape, out.probs, &rows, &targets)?;
        let loss_value = tape.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(ModelError::Divergence {
                epoch,
                loss: loss_value,
            });
        }
        let val = final_snapshot_metrics(tape.value(out.probs), data, &val_nodes);
        let record = EpochRecord {
            epoch,
            train_loss: loss_value,
            val,
        };
        on_epoch(&record);
        log.push(record);
        if !val_nodes.is_empty() && best.as_ref().is_none_or(|(f1, _, _)| val.f1 > *f1) {
            best = Some((val.f1, epoch, params.clone()));
        }

        let grads = tape.backward(loss)?;
        let g = collect_grads(&vars, &grads);
        let mut leaves = params.leaves_mut();
        match training.optimizer {
            OptimizerKind::Adam => adam.step(&mut leaves, &g),
            OptimizerKind::Sgd => sgd_step(&mut leaves, &g, training.learning_rate, training.weight_decay),
        }
        if leaves.iter().any(|t| !t.is_finite()) {
            return Err(ModelError::Divergence {
                epoch,
                loss: f64::NAN,
            });
        }
    }
    let (params_out, best_epoch) = match best {
        Some((_, e, p)) => (p, Some(e)),
        None => (params.clone(), None),
    };
    Ok(TrainOutcome {
        params: params_out,
        best_epoch,
        final_params: params,
        log,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub node: usize,
    pub snapshot: usize,
    pub p_bot: f64,
    pub bot: bool,
}

/// Class probabilities for every active `(node, snapshot)` pair.
pub fn predict(params: &ModelParams, inputs: &ModelInputs, model: &ModelConfig) -> Result<Vec<Prediction>> {
    let mut tape = Tape::new();
    let vars = params.map(&mut |t| tape.constant(t.clone()));
    let out = forward(&mut tape, &vars, inputs, model)?;
    let probs = tape.value(out.probs);
    let mut preds = Vec::new();
    for node in 0..inputs.num_nodes() {
        for snapshot in 0..inputs.num_snapshots() {
            if inputs.is_active(node, snapshot) {
                let p_bot = probs.get2(inputs.row(node, snapshot), 1);
                preds.push(Prediction {
                    node,
                    snapshot,
                    p_bot,
                    bot: is_bot(p_bot),
                });
            }
        }
    }
    Ok(preds)
}

/// Metrics of the final-snapshot predictions over the labeled nodes of
/// `split`; an empty split is an error.
pub fn evaluate(params: &ModelParams, data: &TrainingData, split: Split, model: &ModelConfig) -> Result<Metrics> {
    let nodes = data.nodes(split);
    if nodes.is_empty() {
        return Err(ModelError::Input(format!("{split:?} split has no labeled nodes")));
    }
    let mut tape = Tape::new();
    let vars = params.map(&mut |t| tape.constant(t.clone()));
    let out = forward(&mut tape, &vars, &data.inputs, model)?;
    Ok(final_snapshot_metrics(tape.value(out.probs), data, &nodes))
}
