use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_gradients, random_tensor, DEFAULT_STEP};
use super::{DTensor, Tape};
use crate::error::Error;

fn t2(rows: &[Vec<f64>]) -> DTensor {
    DTensor::from_rows(rows).unwrap()
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let i2 = tape.constant(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    let a = tape.constant(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let c = tape.matmul(i2, a).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_zero_selection() {
    let mut tape = Tape::new();
    let a = tape.constant(t2(&[vec![1.0, 0.0]]));
    let b = tape.constant(t2(&[vec![0.0], vec![5.0]]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[0.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(DTensor::zeros(vec![2, 3]));
    let b = tape.constant(DTensor::zeros(vec![2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_tensor(&[3, 4], &mut rng);
    let b = random_tensor(&[4, 2], &mut rng);
    let report = check_gradients(&[a, b], DEFAULT_STEP, |tape, ids| {
        let c = tape.matmul(ids[0], ids[1])?;
        Ok(tape.mean_all(c))
    })
    .unwrap();
    report.assert_within(1e-6);
}

#[test]
fn softmax_uniform_on_constant_row() {
    let mut tape = Tape::new();
    let x = tape.constant(t2(&[vec![0.0, 0.0, 0.0]]));
    let y = tape.softmax_rows(x).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_is_stable_under_large_logits() {
    let mut tape = Tape::new();
    let x = tape.constant(t2(&[vec![1000.0, 0.0]]));
    let y = tape.softmax_rows(x).unwrap();
    let d = tape.value(y).data();
    assert!(d[0] > 1.0 - 1e-12 && d[0].is_finite());
    assert!(d[1] < 1e-12);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let x = tape.constant(random_tensor(&[5, 7], &mut rng));
    let y = tape.softmax_rows(x).unwrap();
    let d = tape.value(y).data();
    for i in 0..5 {
        let s: f64 = d[i * 7..(i + 1) * 7].iter().sum();
        assert!((s - 1.0).abs() <= 1e-12);
        assert!(d[i * 7..(i + 1) * 7].iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn softmax_rejects_nan() {
    let mut tape = Tape::new();
    let x = tape.constant(t2(&[vec![f64::NAN, 0.0]]));
    assert!(matches!(tape.softmax_rows(x), Err(Error::Numeric(_))));
}

#[test]
fn softmax_jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&[4, 4], &mut rng);
    // Random projection makes the scalar loss exercise the full Jacobian.
    let w = random_tensor(&[4, 1], &mut rng);
    let report = check_gradients(&[x], DEFAULT_STEP, |tape, ids| {
        let y = tape.softmax_rows(ids[0])?;
        let wc = tape.constant(w.clone());
        let p = tape.matmul(y, wc)?;
        Ok(tape.sum_all(p))
    })
    .unwrap();
    report.assert_within(1e-6);
}

#[test]
fn layer_norm_zero_variance_returns_bias() {
    let mut tape = Tape::new();
    let x = tape.constant(t2(&[vec![5.0, 5.0, 5.0, 5.0]]));
    let g = tape.constant(DTensor::new(vec![4], vec![1.0; 4]).unwrap());
    let b = tape.constant(DTensor::new(vec![4], vec![0.0; 4]).unwrap());
    let y = tape.layer_norm(x, g, b).unwrap();
    for &v in tape.value(y).data() {
        assert!(v.abs() < 1e-12);
    }
}

#[test]
fn layer_norm_on_already_normalized_row() {
    let mut tape = Tape::new();
    let x = tape.constant(t2(&[vec![1.0, -1.0]]));
    let g = tape.constant(DTensor::new(vec![2], vec![1.0, 1.0]).unwrap());
    let b = tape.constant(DTensor::new(vec![2], vec![0.0, 0.0]).unwrap());
    let y = tape.layer_norm(x, g, b).unwrap();
    let d = tape.value(y).data();
    assert!((d[0] - 1.0).abs() < 1e-4 && (d[1] + 1.0).abs() < 1e-4);
}

#[test]
fn layer_norm_single_column_is_epsilon_guarded() {
    let mut tape = Tape::new();
    let x = tape.constant(t2(&[vec![3.0], vec![-7.0]]));
    let g = tape.constant(DTensor::new(vec![1], vec![2.0]).unwrap());
    let b = tape.constant(DTensor::new(vec![1], vec![0.5]).unwrap());
    let y = tape.layer_norm(x, g, b).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 0.5).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tensor(&[2, 8], &mut rng);
    let g = random_tensor(&[8], &mut rng);
    let b = random_tensor(&[8], &mut rng);
    let w = random_tensor(&[8, 1], &mut rng);
    let report = check_gradients(&[x, g, b], DEFAULT_STEP, |tape, ids| {
        let y = tape.layer_norm(ids[0], ids[1], ids[2])?;
        let wc = tape.constant(w.clone());
        let p = tape.matmul(y, wc)?;
        Ok(tape.mean_all(p))
    })
    .unwrap();
    report.assert_within(1e-5);
}

#[test]
fn linear_identity_weight_zero_bias() {
    let mut tape = Tape::new();
    let x = tape.constant(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let w = tape.constant(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    let b = tape.constant(DTensor::new(vec![2], vec![0.0, 0.0]).unwrap());
    let y = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());
}

#[test]
fn linear_zero_input_broadcasts_bias() {
    let mut tape = Tape::new();
    let x = tape.constant(DTensor::zeros(vec![3, 2]));
    let w = tape.constant(random_tensor(&[2, 4], &mut ChaCha8Rng::seed_from_u64(5)));
    let b = tape.constant(DTensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = tape.linear(x, w, b).unwrap();
    for i in 0..3 {
        assert_eq!(&tape.value(y).data()[i * 4..(i + 1) * 4], &[1.0, 2.0, 3.0, 4.0]);
    }
}

#[test]
fn linear_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_tensor(&[3, 4], &mut rng);
    let w = random_tensor(&[4, 2], &mut rng);
    let b = random_tensor(&[2], &mut rng);
    let report = check_gradients(&[x, w, b], DEFAULT_STEP, |tape, ids| {
        let y = tape.linear(ids[0], ids[1], ids[2])?;
        Ok(tape.mean_all(y))
    })
    .unwrap();
    report.assert_within(1e-6);
}

#[test]
fn bce_perfect_prediction_is_near_zero() {
    let mut tape = Tape::new();
    let p = tape.constant(t2(&[vec![1.0, 1.0]]));
    let t = tape.constant(t2(&[vec![1.0, 1.0]]));
    let loss = tape.bce_loss(p, t, 1e-7).unwrap();
    let expected = -(1.0f64 - 1e-7).ln();
    assert!((tape.value(loss).data()[0] - expected).abs() < 1e-12);
}

#[test]
fn bce_half_everywhere_is_ln_two() {
    let mut tape = Tape::new();
    let p = tape.constant(t2(&[vec![0.5, 0.5], vec![0.5, 0.5]]));
    let t = tape.constant(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    let loss = tape.bce_loss(p, t, 1e-7).unwrap();
    assert!((tape.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn bce_rejects_non_binary_targets() {
    let mut tape = Tape::new();
    let p = tape.constant(t2(&[vec![0.5]]));
    let t = tape.constant(t2(&[vec![0.3]]));
    assert!(matches!(
        tape.bce_loss(p, t, 1e-7),
        Err(Error::Validation(_))
    ));
}

#[test]
fn bce_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // Predictions strictly inside (0, 1), away from the clamp boundary.
    let mut p = random_tensor(&[3, 3], &mut rng);
    for v in p.data_mut() {
        *v = 0.05 + 0.9 * (*v * 0.5 + 0.5);
    }
    let t = DTensor::new(
        vec![3, 3],
        vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0],
    )
    .unwrap();
    let report = check_gradients(&[p], DEFAULT_STEP, |tape, ids| {
        let tc = tape.constant(t.clone());
        tape.bce_loss(ids[0], tc, 1e-7)
    })
    .unwrap();
    report.assert_within(1e-6);
}

#[test]
fn backward_of_sum_is_all_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let s = tape.sum_all(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_zero_times_function_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(t2(&[vec![1.0, 2.0]]));
    let y = tape.sigmoid(x);
    let s = tape.mean_all(y);
    let z = tape.scale(s, 0.0);
    tape.backward(z).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(t2(&[vec![1.0, 2.0]]));
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn composed_chain_matches_finite_differences() {
    // softmax . matmul . layernorm chain, checked end to end.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_tensor(&[3, 4], &mut rng);
    let g = random_tensor(&[4], &mut rng);
    let b = random_tensor(&[4], &mut rng);
    let w = random_tensor(&[4, 4], &mut rng);
    let report = check_gradients(&[x, g, b, w], DEFAULT_STEP, |tape, ids| {
        let normed = tape.layer_norm(ids[0], ids[1], ids[2])?;
        let mixed = tape.matmul(normed, ids[3])?;
        let soft = tape.softmax_rows(mixed)?;
        let sq = tape.mul(soft, soft)?;
        Ok(tape.mean_all(sq))
    })
    .unwrap();
    report.assert_within(1e-5);
}

#[test]
fn backward_twice_with_cleared_grads_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_tensor(&[4, 4], &mut rng);
    let mut tape = Tape::new();
    let id = tape.leaf(x);
    let y = tape.softmax_rows(id).unwrap();
    let z = tape.mul(y, y).unwrap();
    let loss = tape.mean_all(z);
    tape.backward(loss).unwrap();
    let first: Vec<u64> = tape.grad(id).unwrap().iter().map(|v| v.to_bits()).collect();
    tape.clear_grads();
    tape.backward(loss).unwrap();
    let second: Vec<u64> = tape.grad(id).unwrap().iter().map(|v| v.to_bits()).collect();
    assert_eq!(first, second);
}

#[test]
fn transpose_concat_slice_broadcast_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = random_tensor(&[3, 2], &mut rng);
    let b = random_tensor(&[3, 4], &mut rng);
    let c = random_tensor(&[1, 6], &mut rng);
    let report = check_gradients(&[a, b, c], DEFAULT_STEP, |tape, ids| {
        let cat = tape.concat_cols(&[ids[0], ids[1]])?; // [3 x 6]
        let bc = tape.broadcast_rows(ids[2], 3)?; // [3 x 6]
        let sum = tape.add(cat, bc)?;
        let t = tape.transpose(sum)?; // [6 x 3]
        let sliced = tape.slice_rows(t, 1, 5)?; // [4 x 3]
        let m = tape.mean_rows(sliced)?; // [1 x 3]
        Ok(tape.sum_all(m))
    })
    .unwrap();
    report.assert_within(1e-6);
}

#[test]
fn concat_rows_gradients_and_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let a = random_tensor(&[2, 3], &mut rng);
    let b = random_tensor(&[4, 3], &mut rng);
    let report = check_gradients(&[a, b], DEFAULT_STEP, |tape, ids| {
        let stacked = tape.concat_rows(&[ids[0], ids[1]])?; // [6 x 3]
        let back = tape.slice_rows(stacked, 1, 5)?;
        let act = tape.sigmoid(back);
        Ok(tape.mean_all(act))
    })
    .unwrap();
    report.assert_within(1e-6);

    let mut tape = Tape::new();
    let x = tape.constant(t2(&[vec![1.0, 2.0]]));
    let y = tape.constant(t2(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
    let s = tape.concat_rows(&[x, y]).unwrap();
    assert_eq!(tape.value(s).shape(), &[3, 2]);
    assert_eq!(tape.value(s).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
}

#[test]
fn elementwise_and_reduction_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random_tensor(&[2, 5], &mut rng);
    let b = random_tensor(&[2, 5], &mut rng);
    let report = check_gradients(&[a, b], DEFAULT_STEP, |tape, ids| {
        let prod = tape.mul(ids[0], ids[1])?;
        let act = tape.sigmoid(prod);
        let r = tape.relu(act);
        let e = tape.exp(r);
        let scaled = tape.affine(e, 0.5, 0.25);
        let diff = tape.sub(scaled, ids[1])?;
        Ok(tape.mean_all(diff))
    })
    .unwrap();
    report.assert_within(1e-6);
}

#[test]
fn log_and_clamp_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut a = random_tensor(&[3, 3], &mut rng);
    for v in a.data_mut() {
        *v = 0.5 + (*v * 0.5 + 0.5); // in (0.5, 1.5), inside the clamp
    }
    let report = check_gradients(&[a], DEFAULT_STEP, |tape, ids| {
        let c = tape.clamp(ids[0], 0.01, 10.0);
        let l = tape.log(c);
        Ok(tape.sum_all(l))
    })
    .unwrap();
    report.assert_within(1e-6);
}

#[test]
fn randomized_op_sweep_passes_gradient_checks() {
    // Broad randomized coverage over shapes and values for every op family.
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for case in 0..25 {
        let m = 1 + (case % 4);
        let p = 1 + ((case * 7) % 5);
        let q = 1 + ((case * 3) % 4);
        let x = random_tensor(&[m, p], &mut rng);
        let w = random_tensor(&[p, q], &mut rng);
        let g = random_tensor(&[q], &mut rng);
        let b = random_tensor(&[q], &mut rng);
        let report = check_gradients(&[x, w, g, b], DEFAULT_STEP, |tape, ids| {
            let h = tape.matmul(ids[0], ids[1])?;
            let n = tape.layer_norm(h, ids[2], ids[3])?;
            let s = tape.softmax_rows(n)?;
            let act = tape.sigmoid(s);
            Ok(tape.mean_all(act))
        })
        .unwrap();
        report.assert_within(1e-4);
    }
}
