//! End-to-end model: gradients, ablations, loss, training loop, checkpoints.

mod common;

use botdgt::autodiff::{Tape, Tensor};
use botdgt::dyngraph::{InteractionRecord, SECONDS_PER_DAY};
use botdgt::model::{
    bce_loss, classify, evaluate, forward, init_params, predict, read_params, train, write_params,
    Ablation, HeadParams, LossScope, Metrics, ModelError, ModelInputs, ModelParams, OptimizerKind,
    Split, TrainingConfig, TrainingData,
};
use botdgt::structural::{self, MessageGraph};
use botdgt::temporal::temporal_attention;
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn forward_values(inst: &ModelInstance) -> (Tensor, Tensor, Tensor) {
    let mut tape = Tape::new();
    let vars = inst.params.bind(&mut tape);
    let out = forward(&mut tape, &vars, &inst.data.inputs, &inst.config).unwrap();
    (
        tape.value(out.probs).clone(),
        tape.value(out.s).clone(),
        tape.value(out.z).clone(),
    )
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for seed in 0..3 {
        let report = model_gradcheck(&model_instance(seed, 10, 3));
        assert!(report.passed(), "seed {seed}: {}", report.max_rel_error());
    }
}

#[test]
fn no_dead_parameters() {
    let inst = model_instance(4, 10, 3);
    let (rows, targets) = inst.data.loss_rows(LossScope::AllSnapshots);
    let mut tape = Tape::new();
    let vars = inst.params.bind(&mut tape);
    let out = forward(&mut tape, &vars, &inst.data.inputs, &inst.config).unwrap();
    let loss = bce_loss(&mut tape, out.probs, &rows, &targets).unwrap();
    let grads = tape.backward(loss).unwrap();
    for (name, var) in vars.named() {
        let g = grads.get(*var).map(|g| g.data().to_vec()).unwrap_or_default();
        let max = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if name.ends_with(".b_k") {
            // A key bias shifts every score of a neighborhood equally, which the
            // softmax cancels.
            assert!(max < 1e-15, "{name}: {max}");
        } else {
            assert!(max > 1e-12, "{name} has no gradient");
        }
    }
}

#[test]
fn probabilities_sum_to_one() {
    let inst = model_instance(5, 12, 3);
    let (probs, _, _) = forward_values(&inst);
    for r in 0..probs.rows() {
        let (h, b) = (probs.get2(r, 0), probs.get2(r, 1));
        assert!((h + b - 1.0).abs() <= 1e-12);
        assert!((0.0..=1.0).contains(&h) && (0.0..=1.0).contains(&b));
    }
}

#[test]
fn without_position_terms_temporal_input_is_structural_output() {
    let mut inst = model_instance(6, 10, 3);
    inst.config.ablation = "no_p_at,no_p_lcc,no_p_blr".parse().unwrap();
    let (_, s, z) = forward_values(&inst);
    let (n, t, f) = (10, 3, inst.config.hidden_dim);
    let mut tape = Tape::new();
    let p = inst.params.temporal.map(&mut |w| tape.constant(w.clone()));
    let seq = tape.constant(s.reshaped(vec![n, t, f]).unwrap());
    let out = temporal_attention(&mut tape, seq, &p, inst.config.temporal_heads, inst.data.inputs.mask()).unwrap();
    assert_eq!(tape.value(out.z).data(), z.data());
}

#[test]
fn single_snapshot_without_temporal_is_static_classifier() {
    let mut inst = model_instance(7, 9, 1);
    inst.config.ablation.no_temporal = true;
    let (probs, _, _) = forward_values(&inst);

    let mut r = rng(7);
    let records = random_dynamic_records(&mut r, 9, 1, 0.25);
    let (g, _) = build_graph(&records, 9, 1);
    let x = random_tensor(&mut r, &[9, 3]);
    let snap = &g.snapshots[0];
    let mut tape = Tape::new();
    let p = inst.params.bind(&mut tape);
    let xv = tape.constant(x);
    let graph = MessageGraph::from_snapshot(snap, true);
    let st = structural::forward_snapshot(&mut tape, xv, &graph, &snap.node_active, &p.structural, &inst.config.structural()).unwrap();
    let direct = classify(&mut tape, st.s, &p.head, inst.config.slope).unwrap();
    assert_eq!(tape.value(direct).data(), probs.data());
}

/// Moves every record of the first window into window `t − 2`, which leaves
/// the final cumulative snapshot unchanged.
fn history_edit(seed: u64, n: usize, t: usize) -> (Vec<InteractionRecord>, Vec<InteractionRecord>) {
    let mut r = rng(seed);
    let records = random_dynamic_records(&mut r, n, t, 0.25);
    let edited = records
        .iter()
        .map(|rec| {
            let mut rec = *rec;
            if rec.timestamp <= SECONDS_PER_DAY {
                rec.timestamp += (t as u64 - 2) * SECONDS_PER_DAY;
            }
            rec
        })
        .collect();
    (records, edited)
}

fn final_rows(records: &[InteractionRecord], x: &Tensor, params: &ModelParams, ablation: Ablation) -> (Vec<f64>, Vec<f64>) {
    let (n, t) = (x.rows(), 4);
    let (g, m) = build_graph(records, n, t);
    let mut config = small_config(3, t);
    config.ablation = ablation;
    let inputs = ModelInputs::new(&g, &m, x, &config).unwrap();
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let out = forward(&mut tape, &vars, &inputs, &config).unwrap();
    let (mut p, mut z) = (Vec::new(), Vec::new());
    for i in 0..n {
        let row = inputs.row(i, t - 1);
        p.extend_from_slice(tape.value(out.probs).row(row));
        z.extend_from_slice(tape.value(out.z).row(row));
    }
    (p, z)
}

#[test]
fn history_only_matters_with_temporal_module() {
    let n = 10;
    let (records, edited) = history_edit(8, n, 4);
    let (ga, _) = build_graph(&records, n, 4);
    let (gb, _) = build_graph(&edited, n, 4);
    assert_eq!(ga.last(), gb.last());
    assert_ne!(ga.snapshots[0], gb.snapshots[0]);

    let mut r = rng(8);
    let x = random_tensor(&mut r, &[n, 3]);
    let mut params = init_params(&small_config(3, 4), 8).unwrap();
    randomize(&mut params, &mut r, 0.7);

    let static_only = Ablation { no_temporal: true, ..Default::default() };
    assert_eq!(
        final_rows(&records, &x, &params, static_only),
        final_rows(&edited, &x, &params, static_only)
    );
    let (_, za) = final_rows(&records, &x, &params, Ablation::default());
    let (_, zb) = final_rows(&edited, &x, &params, Ablation::default());
    assert_ne!(za, zb);
}

#[test]
fn bce_examples_and_scalar_oracle() {
    let eps = 1e-12;
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::matrix(2, 1, vec![1.0 - eps, 1.0 - eps]).unwrap());
    let l = tape.bce(p, &[1.0, 1.0], eps).unwrap();
    assert!(tape.value(l).data()[0] < 1e-11);
    let p = tape.constant(Tensor::matrix(3, 1, vec![0.5; 3]).unwrap());
    let l = tape.bce(p, &[1.0, 0.0, 1.0], eps).unwrap();
    assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);

    let mut r = rng(9);
    for _ in 0..20 {
        let rows = r.random_range(1..30);
        let probs: Vec<f64> = (0..rows).map(|_| r.random_range(0.0..=1.0)).collect();
        let targets: Vec<f64> = (0..rows).map(|_| f64::from(u8::from(r.random_bool(0.5)))).collect();
        let mut pairs = Vec::new();
        for &p in &probs {
            pairs.extend([1.0 - p, p]);
        }
        let mut tape = Tape::new();
        let pv = tape.constant(Tensor::matrix(rows, 2, pairs).unwrap());
        let idx: Vec<usize> = (0..rows).collect();
        let l = bce_loss(&mut tape, pv, &idx, &targets).unwrap();
        let mut sum = 0.0;
        for (p, y) in probs.iter().zip(&targets) {
            let p = p.clamp(eps, 1.0 - eps);
            sum -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        let want = sum / rows as f64;
        assert!((tape.value(l).data()[0] - want).abs() <= 1e-12 * want.max(1.0));
    }
}

#[test]
fn all_snapshot_loss_is_mean_of_per_snapshot_losses() {
    let (n, t) = (8, 3);
    let mut r = rng(10);
    let mut records = random_dynamic_records(&mut r, n, t, 0.2);
    // a ring in the first window keeps every node active throughout
    records.extend((0..n).map(|i| InteractionRecord { source: i, target: (i + 1) % n, timestamp: 1, relation: 0 }));
    let (g, m) = build_graph(&records, n, t);
    let config = small_config(3, t);
    let x = random_tensor(&mut r, &[n, 3]);
    let inputs = ModelInputs::new(&g, &m, &x, &config).unwrap();
    let labels = (0..n).map(|i| Some(i % 3 == 0)).collect();
    let data = TrainingData::new(inputs, labels, vec![Some(Split::Train); n]).unwrap();
    let mut params = init_params(&config, 10).unwrap();
    randomize(&mut params, &mut r, 0.7);

    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let out = forward(&mut tape, &vars, &data.inputs, &config).unwrap();
    let (rows, targets) = data.loss_rows(LossScope::AllSnapshots);
    let all = bce_loss(&mut tape, out.probs, &rows, &targets).unwrap();
    let all = tape.value(all).data()[0];
    let mut per = 0.0;
    for k in 0..t {
        let rows: Vec<usize> = (0..n).map(|i| data.inputs.row(i, k)).collect();
        let targets: Vec<f64> = (0..n).map(|i| f64::from(u8::from(i % 3 == 0))).collect();
        let l = bce_loss(&mut tape, out.probs, &rows, &targets).unwrap();
        per += tape.value(l).data()[0] / t as f64;
    }
    assert!((all - per).abs() <= 1e-12, "{all} vs {per}");

    let (final_rows, _) = data.loss_rows(LossScope::FinalSnapshot);
    assert_eq!(final_rows, (0..n).map(|i| data.inputs.row(i, t - 1)).collect::<Vec<_>>());
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let inst = model_instance(11, 10, 3);
    for optimizer in [OptimizerKind::Adam, OptimizerKind::Sgd] {
        let cfg = TrainingConfig { epochs: 3, learning_rate: 0.0, optimizer, ..Default::default() };
        let out = train(&inst.data, &inst.config, &cfg, inst.params.clone(), |_| {}).unwrap();
        assert_eq!(out.final_params, inst.params);
        assert_eq!(out.log.len(), 3);
        assert_eq!(out.log[0].train_loss.to_bits(), out.log[2].train_loss.to_bits());
    }
}

fn two_node_toy() -> (TrainingData, botdgt::model::ModelConfig) {
    let records = vec![InteractionRecord { source: 0, target: 1, timestamp: 1, relation: 0 }];
    let (g, m) = build_graph(&records, 2, 1);
    // Both nodes share one neighborhood; the residual path keeps their
    // features apart.
    let config = botdgt::model::ModelConfig { residual: true, ..small_config(2, 1) };
    let x = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let inputs = ModelInputs::new(&g, &m, &x, &config).unwrap();
    let data = TrainingData::new(inputs, vec![Some(true), Some(false)], vec![Some(Split::Train); 2]).unwrap();
    (data, config)
}

#[test]
fn toy_loss_strictly_decreases() {
    let (data, config) = two_node_toy();
    let cfg = TrainingConfig { epochs: 11, learning_rate: 1e-2, ..Default::default() };
    for seed in 0..3 {
        let out = train(&data, &config, &cfg, init_params(&config, seed).unwrap(), |_| {}).unwrap();
        let losses: Vec<f64> = out.log.iter().map(|r| r.train_loss).collect();
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "seed {seed}: {losses:?}");
        }
    }
    let out = train(&data, &config, &cfg, init_params(&config, 0).unwrap(), |_| {}).unwrap();
    // no validation nodes: the final parameters are returned
    assert_eq!(out.best_epoch, None);
    assert_eq!(out.params, out.final_params);
}

#[test]
fn training_is_deterministic() {
    let inst = model_instance(12, 10, 3);
    let cfg = TrainingConfig { epochs: 5, learning_rate: 1e-2, ..Default::default() };
    let a = train(&inst.data, &inst.config, &cfg, init_params(&inst.config, 1).unwrap(), |_| {}).unwrap();
    let b = train(&inst.data, &inst.config, &cfg, init_params(&inst.config, 1).unwrap(), |_| {}).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.final_params, b.final_params);
}

#[test]
fn best_validation_epoch_is_selected() {
    let mut inst = model_instance(13, 12, 3);
    for i in (0..12).step_by(3) {
        inst.data.splits[i] = Some(Split::Val);
    }
    let cfg = TrainingConfig { epochs: 30, learning_rate: 2e-2, ..Default::default() };
    let out = train(&inst.data, &inst.config, &cfg, init_params(&inst.config, 2).unwrap(), |_| {}).unwrap();
    let best = out.best_epoch.unwrap();
    let f1s: Vec<f64> = out.log.iter().map(|r| r.val.f1).collect();
    let max = f1s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(f1s[best], max);
    assert!(f1s[..best].iter().all(|&f| f < max));
    let val = evaluate(&out.params, &inst.data, Split::Val, &inst.config).unwrap();
    assert_eq!(val, out.log[best].val);
}

#[test]
fn non_finite_loss_reports_divergence() {
    let mut r = rng(14);
    let records = random_dynamic_records(&mut r, 6, 2, 0.3);
    let (g, m) = build_graph(&records, 6, 2);
    let config = small_config(3, 2);
    let x = Tensor::filled(&[6, 3], 1e300);
    let inputs = ModelInputs::new(&g, &m, &x, &config).unwrap();
    let data = TrainingData::new(inputs, vec![Some(true); 6], vec![Some(Split::Train); 6]).unwrap();
    let err = train(&data, &config, &TrainingConfig::default(), init_params(&config, 0).unwrap(), |_| {}).unwrap_err();
    assert!(matches!(err, ModelError::Divergence { epoch: 0, .. }), "{err}");
}

#[test]
fn evaluate_matches_hand_counting() {
    let mut inst = model_instance(15, 14, 3);
    for i in 0..14 {
        inst.data.splits[i] = Some(if i < 7 { Split::Train } else { Split::Test });
    }
    let m = evaluate(&inst.params, &inst.data, Split::Test, &inst.config).unwrap();
    let preds = predict(&inst.params, &inst.data.inputs, &inst.config).unwrap();
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for p in preds.iter().filter(|p| p.snapshot == 2 && p.node >= 7) {
        assert_eq!(p.bot, p.p_bot >= 0.5);
        match (p.bot, inst.data.labels[p.node].unwrap()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    assert_eq!((m.true_positives, m.false_positives, m.true_negatives, m.false_negatives), (tp, fp, tn, fn_));
    assert!(evaluate(&inst.params, &inst.data, Split::Val, &inst.config).is_err());
}

proptest! {
    #[test]
    fn metrics_match_brute_force(pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..60)) {
        let m = Metrics::from_pairs(pairs.iter().copied());
        let count = |p: bool, a: bool| pairs.iter().filter(|&&x| x == (p, a)).count();
        let (tp, fp, tn, fn_) = (count(true, true), count(true, false), count(false, false), count(false, true));
        prop_assert_eq!((m.true_positives, m.false_positives, m.true_negatives, m.false_negatives), (tp, fp, tn, fn_));
        prop_assert_eq!(m.accuracy, (tp + tn) as f64 / pairs.len() as f64);
        let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        prop_assert_eq!((m.precision, m.recall, m.f1), (precision, recall, f1));
    }
}

#[test]
fn degenerate_metrics() {
    let perfect = Metrics::from_pairs([(true, true), (false, false)]);
    assert_eq!((perfect.accuracy, perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0, 1.0));
    let missed = Metrics::from_pairs([(false, true), (false, true)]);
    assert_eq!((missed.recall, missed.f1), (0.0, 0.0));
}

#[test]
fn zero_head_gives_uniform_probabilities() {
    let mut tape = Tape::new();
    let head = HeadParams {
        w_1: tape.constant(Tensor::zeros(&[3, 4])),
        b_1: tape.constant(Tensor::zeros(&[3])),
        w_2: tape.constant(Tensor::zeros(&[2, 3])),
        b_2: tape.constant(Tensor::zeros(&[2])),
    };
    let z = tape.constant(Tensor::filled(&[5, 4], 0.7));
    let p = classify(&mut tape, z, &head, 0.01).unwrap();
    assert!(tape.value(p).data().iter().all(|&v| v == 0.5));
}

#[test]
fn classifier_matches_dense_oracle() {
    let mut r = rng(16);
    let w_1 = random_tensor(&mut r, &[5, 4]);
    let b_1 = random_tensor(&mut r, &[5]);
    let w_2 = random_tensor(&mut r, &[2, 5]);
    let b_2 = random_tensor(&mut r, &[2]);
    let z = random_tensor(&mut r, &[6, 4]);
    let mut tape = Tape::new();
    let head = HeadParams {
        w_1: tape.constant(w_1.clone()),
        b_1: tape.constant(b_1.clone()),
        w_2: tape.constant(w_2.clone()),
        b_2: tape.constant(b_2.clone()),
    };
    let zv = tape.constant(z.clone());
    let p = classify(&mut tape, zv, &head, 0.01).unwrap();
    for i in 0..6 {
        let h: Vec<f64> = affine(&w_1, &b_1, z.row(i)).into_iter().map(|v| leaky(v, 0.01)).collect();
        let logits = affine(&w_2, &b_2, &h);
        let pb = 1.0 / (1.0 + (logits[0] - logits[1]).exp());
        assert!((tape.value(p).get2(i, 1) - pb).abs() <= 1e-14);
    }
}

#[test]
fn init_is_seeded_glorot_with_zero_biases() {
    let mut config = small_config(8, 4);
    config.hidden_dim = 64;
    config.classifier_hidden = 32;
    let a = init_params(&config, 5).unwrap();
    assert_eq!(a, init_params(&config, 5).unwrap());
    assert_ne!(a, init_params(&config, 6).unwrap());

    let (mut sum, mut var, mut count) = (0.0, 0.0, 0usize);
    for (name, t) in a.named() {
        let leaf = name.rsplit('.').next().unwrap();
        if name.starts_with("embeddings.") {
            continue;
        }
        if leaf.starts_with('b') {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        } else {
            let bound = (6.0 / (t.shape()[0] + t.shape()[1]) as f64).sqrt();
            assert!(t.data().iter().all(|v| v.abs() <= bound), "{name}");
            sum += t.data().iter().sum::<f64>();
            var += t.len() as f64 * bound * bound / 3.0;
            count += t.len();
        }
    }
    assert!(count >= 10_000);
    assert!(sum.abs() <= 3.0 * var.sqrt(), "sum {sum} sd {}", var.sqrt());
}

#[test]
fn checkpoint_roundtrip() {
    let inst = model_instance(17, 6, 2);
    let mut buf = Vec::new();
    write_params(&mut buf, &inst.params).unwrap();
    let back = read_params(buf.as_slice(), &inst.config).unwrap();
    assert_eq!(back, inst.params);

    let mut other = inst.config.clone();
    other.classifier_hidden = 5;
    assert!(read_params(buf.as_slice(), &other).is_err());
}
