use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
    assert_eq!(actual.len(), expected.len());
    for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
        assert!(
            (a - e).abs() <= tol,
            "entry {i}: {a} vs {e} (tol {tol})"
        );
    }
}

#[test]
fn tensor_new_validates_length_and_extents() {
    assert!(matches!(
        Tensor::new(vec![2, 3], vec![0.0; 5]),
        Err(TensorError::LengthMismatch { .. })
    ));
    assert!(matches!(
        Tensor::new(vec![2, 0], vec![]),
        Err(TensorError::InvalidShape { .. })
    ));
}

// ── matmul ──────────────────────────────────────────────────────────────

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(), false);
    let i = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), false);
    let out = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_hand_sum() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(), false);
    let ones = tape.leaf(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap(), false);
    let out = tape.matmul(a, ones).unwrap();
    assert_eq!(tape.value(out).shape(), &[2, 1]);
    assert_eq!(tape.value(out).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(vec![2, 3]), false);
    let b = tape.leaf(Tensor::zeros(vec![2, 3]), false);
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "message should name shapes: {msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let err = grad_check_multi(
        |tape, ids| {
            let out = tape.matmul(ids[0], ids[1])?;
            Ok(tape.sum(out))
        },
        &[a, b],
        DEFAULT_FD_STEP,
    )
    .unwrap();
    assert!(err < 1e-6, "matmul grad error {err}");
}

#[test]
fn matmul_batched_matches_per_slice_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);

    let mut tape = Tape::new();
    let aid = tape.leaf(a.clone(), false);
    let bid = tape.leaf(b.clone(), false);
    let out = tape.matmul(aid, bid).unwrap();
    assert_eq!(tape.value(out).shape(), &[2, 3, 2]);

    for slice in 0..2 {
        let mut t2 = Tape::new();
        let asl = Tensor::new(vec![3, 4], a.data()[slice * 12..(slice + 1) * 12].to_vec()).unwrap();
        let a2 = t2.leaf(asl, false);
        let b2 = t2.leaf(b.clone(), false);
        let o2 = t2.matmul(a2, b2).unwrap();
        assert_close(
            &tape.value(out).data()[slice * 6..(slice + 1) * 6],
            t2.value(o2).data(),
            1e-15,
        );
    }

    let err = grad_check_multi(
        |tape, ids| {
            let out = tape.matmul(ids[0], ids[1])?;
            Ok(tape.sum(out))
        },
        &[a, b],
        DEFAULT_FD_STEP,
    )
    .unwrap();
    assert!(err < 1e-6, "batched matmul grad error {err}");
}

// ── add / mul / scale ───────────────────────────────────────────────────

#[test]
fn add_zero_is_identity() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 4.0]]).unwrap(), false);
    let z = tape.leaf(Tensor::zeros(vec![2, 2]), false);
    let out = tape.add(x, z).unwrap();
    assert_eq!(tape.value(out).data(), tape.value(x).data());
}

#[test]
fn bias_broadcast_grad_is_column_sum_of_upstream() {
    // loss = sum((a + bias) * c): upstream grad of (a + bias) is c,
    // so d loss / d bias = column sums of c.
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(vec![3, 2]), false);
    let bias = tape.leaf(Tensor::new(vec![2], vec![0.3, -0.7]).unwrap(), true);
    let c = tape.leaf(
        Tensor::from_rows(&[vec![1.0, 10.0], vec![2.0, 20.0], vec![4.0, 40.0]]).unwrap(),
        false,
    );
    let out = tape.add(a, bias).unwrap();
    let weighted = tape.mul(out, c).unwrap();
    let loss = tape.sum(weighted);
    tape.backward(loss).unwrap();
    assert_close(tape.grad(bias).unwrap(), &[7.0, 70.0], 1e-12);
}

#[test]
fn add_rejects_non_broadcastable_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(vec![3, 2]), false);
    let b = tape.leaf(Tensor::zeros(vec![3]), false);
    assert!(matches!(
        tape.add(a, b),
        Err(TensorError::ShapeMismatch { .. })
    ));
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = rand_tensor(&mut rng, &[4, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    let err = grad_check_multi(
        |tape, ids| {
            let s = tape.add(ids[0], ids[1])?;
            let p = tape.mul(s, ids[1])?;
            let scaled = tape.scale(p, 0.7);
            Ok(tape.sum(scaled))
        },
        &[a, b],
        DEFAULT_FD_STEP,
    )
    .unwrap();
    assert!(err < 1e-6, "elementwise grad error {err}");
}

// ── activations ─────────────────────────────────────────────────────────

#[test]
fn sigmoid_at_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(0.0), true);
    let s = tape.sigmoid(x);
    assert_eq!(tape.value(s).item(), 0.5);
    let loss = tape.sum(s);
    tape.backward(loss).unwrap();
    assert_close(tape.grad(x).unwrap(), &[0.25], 1e-15);
}

#[test]
fn relu_clips_negatives() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![-3.0, 3.0]).unwrap(), false);
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 3.0]);
}

#[test]
fn tanh_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = rand_tensor(&mut rng, &[5]);
    let err = grad_check(
        |tape, x| {
            let t = tape.tanh(x);
            Ok(tape.sum(t))
        },
        &x,
        DEFAULT_FD_STEP,
    )
    .unwrap();
    assert!(err < 1e-8, "tanh grad error {err}");
}

#[test]
fn log_clamp_affine_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let n = 6;
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..2.0)).collect();
    let x = Tensor::new(vec![n], data).unwrap();
    let err = grad_check(
        |tape, x| {
            let c = tape.clamp(x, 0.05, 5.0);
            let l = tape.log(c);
            let a = tape.affine(l, -0.5, 1.0);
            Ok(tape.sum(a))
        },
        &x,
        DEFAULT_FD_STEP,
    )
    .unwrap();
    assert!(err < 1e-6, "log/clamp/affine grad error {err}");
}

// ── softmax ─────────────────────────────────────────────────────────────

#[test]
fn softmax_uniform_on_equal_logits() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![0.0; 3]).unwrap(), false);
    let s = tape.softmax_last(x);
    assert_close(tape.value(s).data(), &[1.0 / 3.0; 3], 1e-15);
}

#[test]
fn softmax_survives_large_logits() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![1000.0, 1000.0]).unwrap(), false);
    let s = tape.softmax_last(x);
    assert_close(tape.value(s).data(), &[0.5, 0.5], 1e-15);
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = rand_tensor(&mut rng, &[5]);
    let w = rand_tensor(&mut rng, &[5]);
    let err = grad_check(
        |tape, x| {
            let s = tape.softmax_last(x);
            let wid = tape.leaf(w.clone(), false);
            let weighted = tape.mul(s, wid)?;
            Ok(tape.sum(weighted))
        },
        &x,
        DEFAULT_FD_STEP,
    )
    .unwrap();
    assert!(err < 1e-6, "softmax grad error {err}");
}

proptest! {
    #[test]
    fn softmax_rows_are_stochastic(rows in 1usize..4, cols in 1usize..6, seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[rows, cols]);
        let mut tape = Tape::new();
        let id = tape.leaf(x, false);
        let s = tape.softmax_last(id);
        for row in tape.value(s).data().chunks_exact(cols) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn concat_last_then_slice_is_identity(t in 1usize..5, w1 in 1usize..4, w2 in 1usize..4, seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[t, w1]);
        let b = rand_tensor(&mut rng, &[t, w2]);
        let mut tape = Tape::new();
        let aid = tape.leaf(a.clone(), false);
        let bid = tape.leaf(b.clone(), false);
        let cat = tape.concat_last(&[aid, bid]).unwrap();
        let total = w1 + w2;
        for r in 0..t {
            let row = &tape.value(cat).data()[r * total..(r + 1) * total];
            prop_assert_eq!(&row[..w1], a.row(r));
            prop_assert_eq!(&row[w1..], b.row(r));
        }
    }
}

// ── layer_norm ──────────────────────────────────────────────────────────

#[test]
fn layer_norm_constant_row_collapses_to_beta() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(vec![2, 4], 3.5), false);
    let gamma = tape.leaf(Tensor::full(vec![4], 1.0), false);
    let beta = tape.leaf(Tensor::zeros(vec![4]), false);
    let out = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
    assert_close(tape.value(out).data(), &[0.0; 8], 1e-12);
}

#[test]
fn layer_norm_two_point_row() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap(), false);
    let gamma = tape.leaf(Tensor::full(vec![2], 1.0), false);
    let beta = tape.leaf(Tensor::zeros(vec![2]), false);
    let out = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
    assert_close(tape.value(out).data(), &[-1.0, 1.0], 1e-4);
}

#[test]
fn layer_norm_statistics_on_random_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let f = 8;
    let x = rand_tensor(&mut rng, &[5, f]);
    let mut tape = Tape::new();
    let xid = tape.leaf(x, false);
    let gamma = tape.leaf(Tensor::full(vec![f], 1.0), false);
    let beta = tape.leaf(Tensor::zeros(vec![f]), false);
    let out = tape.layer_norm(xid, gamma, beta, 1e-5).unwrap();
    for row in tape.value(out).data().chunks_exact(f) {
        let mean = row.iter().sum::<f64>() / f as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
        assert!(mean.abs() < 1e-9, "row mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "row variance {var}");
    }
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let x = rand_tensor(&mut rng, &[2, 4]);
    let gamma = rand_tensor(&mut rng, &[4]);
    let beta = rand_tensor(&mut rng, &[4]);
    let w = rand_tensor(&mut rng, &[2, 4]);
    let err = grad_check_multi(
        |tape, ids| {
            let out = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
            let wid = tape.leaf(w.clone(), false);
            let weighted = tape.mul(out, wid)?;
            Ok(tape.sum(weighted))
        },
        &[x, gamma, beta],
        DEFAULT_FD_STEP,
    )
    .unwrap();
    assert!(err < 1e-5, "layer_norm grad error {err}");
}

// ── concatenation / slicing / reshaping ─────────────────────────────────

#[test]
fn concat_last_single_part_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let x = rand_tensor(&mut rng, &[3, 4]);
    let mut tape = Tape::new();
    let id = tape.leaf(x.clone(), false);
    let out = tape.concat_last(&[id]).unwrap();
    assert_eq!(tape.value(out).data(), x.data());
}

#[test]
fn concat_last_rejects_mismatched_leading_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(vec![3, 2]), false);
    let b = tape.leaf(Tensor::zeros(vec![4, 2]), false);
    assert!(matches!(
        tape.concat_last(&[a, b]),
        Err(TensorError::ShapeMismatch { .. })
    ));
}

#[test]
fn concat_last_gradient_splits() {
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let a = rand_tensor(&mut rng, &[3, 2]);
    let b = rand_tensor(&mut rng, &[3, 3]);
    let w = rand_tensor(&mut rng, &[3, 5]);
    let err = grad_check_multi(
        |tape, ids| {
            let cat = tape.concat_last(&[ids[0], ids[1]])?;
            let wid = tape.leaf(w.clone(), false);
            let weighted = tape.mul(cat, wid)?;
            Ok(tape.sum(weighted))
        },
        &[a, b],
        DEFAULT_FD_STEP,
    )
    .unwrap();
    assert!(err < 1e-6, "concat_last grad error {err}");
}

#[test]
fn structural_op_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(63);
    let x = rand_tensor(&mut rng, &[4, 3]);
    let y = rand_tensor(&mut rng, &[1, 3]);
    let w = rand_tensor(&mut rng, &[4, 6]);
    let err = grad_check_multi(
        |tape, ids| {
            let top = tape.slice_rows(ids[0], 0, 2)?;
            let bottom = tape.slice_rows(ids[0], 2, 2)?;
            let rep = tape.repeat_rows(ids[1], 2)?;
            let rows = tape.concat_rows(&[top, rep])?;
            let tr = tape.transpose(bottom)?;
            let trt = tape.transpose(tr)?;
            let rows2 = tape.concat_rows(&[trt, bottom])?;
            let wide = tape.concat_last(&[rows, rows2])?;
            let wid = tape.leaf(w.clone(), false);
            let weighted = tape.mul(wide, wid)?;
            Ok(tape.sum(weighted))
        },
        &[x, y],
        DEFAULT_FD_STEP,
    )
    .unwrap();
    assert!(err < 1e-6, "structural op grad error {err}");
}

// ── backward semantics ──────────────────────────────────────────────────

#[test]
fn backward_of_sum_is_all_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![4], vec![1.0, -2.0, 3.0, 0.0]).unwrap(), true);
    let loss = tape.sum(x);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
}

#[test]
fn backward_of_sum_of_squares() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn backward_accumulates_until_zeroed() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
    let loss = tape.sum(x);
    tape.backward(loss).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    tape.zero_grads();
    assert!(tape.grad(x).is_none());
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(vec![2, 2]), true);
    assert!(matches!(
        tape.backward(x),
        Err(TensorError::NonScalarLoss { .. })
    ));
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let x = rand_tensor(&mut rng, &[3, 3]);
        let w = rand_tensor(&mut rng, &[3, 3]);
        let mut tape = Tape::new();
        let xid = tape.leaf(x, true);
        let wid = tape.leaf(w, true);
        let prod = tape.matmul(xid, wid).unwrap();
        let act = tape.tanh(prod);
        let sm = tape.softmax_last(act);
        let loss = tape.sum(sm);
        tape.backward(loss).unwrap();
        (
            tape.grad(xid).unwrap().to_vec(),
            tape.grad(wid).unwrap().to_vec(),
        )
    };
    let (gx1, gw1) = run();
    let (gx2, gw2) = run();
    let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&gx1), bits(&gx2));
    assert_eq!(bits(&gw1), bits(&gw2));
}

// ── grad_check self-tests ───────────────────────────────────────────────

#[test]
fn grad_check_on_sum_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let x = rand_tensor(&mut rng, &[6]);
    let err = grad_check(|tape, x| Ok(tape.sum(x)), &x, DEFAULT_FD_STEP).unwrap();
    assert!(err < 1e-10, "sum self-test error {err}");
}

#[test]
fn grad_check_on_sigmoid_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(82);
    let x = rand_tensor(&mut rng, &[6]);
    let err = grad_check(
        |tape, x| {
            let s = tape.sigmoid(x);
            Ok(tape.sum(s))
        },
        &x,
        DEFAULT_FD_STEP,
    )
    .unwrap();
    assert!(err < 1e-8, "sigmoid self-test error {err}");
}
