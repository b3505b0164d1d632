//! Finite-difference checks for every tape operation.

use std::sync::Arc;

use botdgt::autodiff::{
    finite_difference_check, AutodiffError, EdgeIndex, GradCheckConfig, Tape, Tensor, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_edges(rng: &mut ChaCha8Rng, n: usize) -> Arc<EdgeIndex> {
    let lists: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut l = vec![i];
            for j in 0..n {
                if j != i && rng.random_bool(0.4) {
                    l.push(j);
                }
            }
            l.sort_unstable();
            l
        })
        .collect();
    Arc::new(EdgeIndex::from_neighbor_lists(&lists).unwrap())
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_tensor(&mut rng, &[7, 5]);
    let b = random_tensor(&mut rng, &[5, 3]);
    let w = random_tensor(&mut rng, &[7, 3]);
    let report = finite_difference_check(
        |tape, v| {
            let p = tape.matmul(v[0], v[1])?;
            let c = tape.constant(w.clone());
            let m = tape.mul(p, c)?;
            Ok(tape.sum(m))
        },
        &[a, b],
        &GradCheckConfig { tolerance: 1e-6, ..Default::default() },
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn masked_softmax_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor(&mut rng, &[4, 4]);
    let w = random_tensor(&mut rng, &[4, 4]);
    let mut mask = Tensor::zeros(&[4, 4]);
    for a in 0..4 {
        for b in (a + 1)..4 {
            mask.data_mut()[a * 4 + b] = f64::NEG_INFINITY;
        }
    }
    let report = finite_difference_check(
        |tape, v| {
            let s = tape.softmax_rows(v[0], Some(&mask))?;
            let c = tape.constant(w.clone());
            let m = tape.mul(s, c)?;
            Ok(tape.sum(m))
        },
        &[x],
        &GradCheckConfig { tolerance: 1e-6, ..Default::default() },
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn sum_check_is_exact() {
    let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
    let report = finite_difference_check(
        |tape, v| Ok(tape.sum(v[0])),
        &[x],
        &GradCheckConfig { tolerance: 1e-10, ..Default::default() },
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    assert!(report.tensors[0].max_abs_error < 1e-10);
}

#[test]
fn softmax_row_sums_have_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, &[3, 5]);
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let s = tape.softmax_rows(v, None).unwrap();
    let l = tape.sum(s);
    let g = tape.backward(l).unwrap();
    assert!(g.get(v).unwrap().data().iter().all(|g| g.abs() < 1e-15));
    let report = finite_difference_check(
        |tape, v| {
            let s = tape.softmax_rows(v[0], None)?;
            Ok(tape.sum(s))
        },
        &[x],
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn gradients_accumulate_over_reuse() {
    let x = Tensor::vector(vec![1.0, 2.0, -3.0]);
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let sq = tape.mul(v, v).unwrap();
    let a = tape.sum(sq);
    let b = tape.scale(v, 3.0);
    let b = tape.sum(b);
    let loss = tape.add(a, b).unwrap();
    let combined = tape.backward(loss).unwrap().get(v).unwrap().clone();

    let single = |f: &dyn Fn(&mut Tape, Var) -> Var| {
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let l = f(&mut tape, v);
        tape.backward(l).unwrap().get(v).unwrap().clone()
    };
    let ga = single(&|t, v| {
        let sq = t.mul(v, v).unwrap();
        t.sum(sq)
    });
    let gb = single(&|t, v| {
        let s = t.scale(v, 3.0);
        t.sum(s)
    });
    for i in 0..3 {
        assert_eq!(combined.data()[i], ga.data()[i] + gb.data()[i]);
    }
}

/// Exercises every operation on the tape in one scalar function.
fn composite(
    tape: &mut Tape,
    v: &[Var],
    edges: &Arc<EdgeIndex>,
    indices: &[usize],
    mask: &Tensor,
    factors: &[f64],
    targets: &[f64],
) -> Result<Var, AutodiffError> {
    let (a, b, bias, table, w, head) = (v[0], v[1], v[2], v[3], v[4], v[5]);
    let m = tape.value(a).shape()[0];
    let n = tape.value(b).shape()[1];
    let p = tape.matmul(a, b)?;
    let p = tape.add_bias(p, bias)?;
    let h = tape.leaky_relu(p, 0.01);
    let t = tape.transpose(h)?;
    let h = tape.transpose(t)?;
    let e = tape.gather_rows(table, indices)?;
    let h2 = tape.add(h, e)?;
    let half = tape.scale(h2, 0.5);
    let c = tape.concat(&[h2, half], 1)?;
    let sl = tape.slice_last(c, 1, 1 + n)?;
    let sl = tape.normalize_rows(sl, 0.5);
    let sm = tape.softmax_rows(sl, Some(mask))?;
    let q = tape.matmul(sm, w)?;
    let k = tape.matmul(h2, w)?;
    let scores = tape.edge_dot(q, k, edges, 0.7)?;
    let alpha = tape.neighbor_softmax(scores, edges)?;
    let agg = tape.edge_aggregate(alpha, h2, edges)?;
    let r = tape.scale_rows(agg, factors)?;
    let r3 = tape.reshape(r, &[1, m, n])?;
    let rt = tape.transpose(r3)?;
    let gram = tape.matmul(r3, rt)?;
    let sq = tape.mul(gram, gram)?;
    let quad = tape.mean(sq);
    let logits = tape.matmul(r, head)?;
    let probs = tape.softmax_rows(logits, None)?;
    let pb = tape.slice_last(probs, 1, 2)?;
    let bce = tape.bce(pb, targets, 1e-12)?;
    let row = tape.embedding_lookup(table, 0)?;
    let row_sum = tape.sum(row);
    let s = tape.add(quad, bce)?;
    tape.add(s, row_sum)
}

#[test]
fn random_composites_pass_gradient_check() {
    let mut worst: f64 = 0.0;
    for seed in 0..120u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let m = rng.random_range(2..6);
        let k = rng.random_range(1..5);
        let n = rng.random_range(2..5);
        let vocab = rng.random_range(1..4);
        let params = vec![
            random_tensor(&mut rng, &[m, k]),
            random_tensor(&mut rng, &[k, n]),
            random_tensor(&mut rng, &[n]),
            random_tensor(&mut rng, &[vocab, n]),
            random_tensor(&mut rng, &[n, n]),
            random_tensor(&mut rng, &[n, 2]),
        ];
        let edges = random_edges(&mut rng, m);
        let indices: Vec<usize> = (0..m).map(|_| rng.random_range(0..vocab)).collect();
        let mut mask = Tensor::zeros(&[m, n]);
        for r in 0..m {
            for c in 0..n {
                // keep column 0 visible; occasionally hide a whole row
                if (c > 0 && rng.random_bool(0.3)) || (r == 0 && seed % 3 == 0) {
                    mask.data_mut()[r * n + c] = f64::NEG_INFINITY;
                }
            }
        }
        let factors: Vec<f64> = (0..m).map(|_| rng.random_range(-1.5..1.5)).collect();
        let targets: Vec<f64> = (0..m).map(|_| f64::from(rng.random_bool(0.5) as u8)).collect();
        let report = finite_difference_check(
            |tape, v| composite(tape, v, &edges, &indices, &mask, &factors, &targets),
            &params,
            &GradCheckConfig { seed, ..Default::default() },
        )
        .unwrap();
        worst = worst.max(report.max_rel_error());
        assert!(report.passed(), "seed {seed}: {report:?}");
    }
    eprintln!("worst relative error over composites: {worst:e}");
}

#[test]
fn batched_matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random_tensor(&mut rng, &[3, 2, 4]);
    let b = random_tensor(&mut rng, &[3, 4, 5]);
    let w = random_tensor(&mut rng, &[3, 2, 5]);
    let report = finite_difference_check(
        |tape, v| {
            let p = tape.matmul(v[0], v[1])?;
            let c = tape.constant(w.clone());
            let m = tape.mul(p, c)?;
            Ok(tape.sum(m))
        },
        &[a, b],
        &GradCheckConfig { tolerance: 1e-6, ..Default::default() },
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let params = [random_tensor(&mut rng, &[4, 3]), random_tensor(&mut rng, &[3, 3])];
        let mut tape = Tape::new();
        let a = tape.param(params[0].clone());
        let b = tape.param(params[1].clone());
        let p = tape.matmul(a, b).unwrap();
        let s = tape.softmax_rows(p, None).unwrap();
        let l = tape.sum(s);
        let g = tape.backward(l).unwrap();
        (tape.value(s).clone(), g.get(a).unwrap().clone())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn neighbor_softmax_groups_sum_to_one(
        groups in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 1..8), 1..10)
    ) {
        let lists: Vec<Vec<usize>> = groups
            .iter()
            .map(|g| (0..g.len()).map(|j| j % groups.len()).collect())
            .collect();
        let edges = Arc::new(EdgeIndex::from_neighbor_lists(&lists).unwrap());
        let scores: Vec<f64> = groups.iter().flatten().copied().collect();
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::vector(scores));
        let w = tape.neighbor_softmax(s, &edges).unwrap();
        let w = tape.value(w).data();
        for dst in 0..edges.num_nodes() {
            let total: f64 = w[edges.group(dst)].iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(w[edges.group(dst)].iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_or_zero(
        rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[rows, cols]).data().iter().map(|v| v * 40.0).collect();
        let x = Tensor::matrix(rows, cols, x).unwrap();
        let mask_vals = (0..rows * cols)
            .map(|_| if rng.random_bool(0.4) { f64::NEG_INFINITY } else { 0.0 })
            .collect();
        let mask = Tensor::matrix(rows, cols, mask_vals).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax_rows(v, Some(&mask)).unwrap();
        for r in 0..rows {
            let total: f64 = tape.value(s).row(r).iter().sum();
            let any_visible = mask.row(r).contains(&0.0);
            if any_visible {
                prop_assert!((total - 1.0).abs() < 1e-9);
            } else {
                prop_assert_eq!(total, 0.0);
            }
        }
    }
}
