//! Every differentiable op checked against central finite differences.

use autograd::{grad_check, AttentionLayout, Tape, Tensor, DEFAULT_STEP};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut rng(seed)).trainable()
}

#[test]
fn matmul_gradient_of_sum() {
    let a = random(&[3, 4], 1);
    let b = random(&[4, 2], 2);
    let report = grad_check(
        |tape, v| {
            let p = tape.matmul(v[0], v[1])?;
            Ok(tape.sum(p))
        },
        &[a, b],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn layernorm_gradient() {
    let x = random(&[3, 5], 3);
    let gain = random(&[5], 4);
    let bias = random(&[5], 5);
    let weights = random(&[3, 5], 6).frozen();
    let report = grad_check(
        |tape, v| {
            let y = tape.layernorm(v[0], v[1], v[2], 1e-5)?;
            let w = tape.mul(y, v[3])?;
            Ok(tape.sum(w))
        },
        &[x, gain, bias, weights],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

#[test]
fn softmax_cross_entropy_on_three_logits() {
    let logits = Tensor::vector(vec![0.3, -1.2, 2.0]).trainable();
    let onehot = Tensor::vector(vec![0.0, 1.0, 0.0]);
    let report = grad_check(
        |tape, v| {
            let p = tape.softmax(v[0])?;
            let lp = tape.ln(p)?;
            let picked = tape.mul(lp, v[1])?;
            let s = tape.sum(picked);
            Ok(tape.scale(s, -1.0))
        },
        &[logits, onehot],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn elementwise_and_broadcast_ops() {
    let a = random(&[4, 3], 7);
    let b = random(&[4, 3], 8);
    let bias = random(&[3], 9);
    let col = random(&[4, 1], 10);
    let report = grad_check(
        |tape, v| {
            let s = tape.sub(v[0], v[1])?;
            let m = tape.mul(s, v[0])?;
            let r = tape.add_row(m, v[2])?;
            let g = tape.gelu(r);
            let t = tape.tanh(g);
            let c = tape.mul_col(t, v[3])?;
            let sc = tape.scale(c, 0.7);
            let sum_r = tape.sum_rows(sc);
            let sm = tape.softmax(sc)?;
            let c1 = tape.column(sm, 1)?;
            let cat = tape.concat_cols(&[sum_r, c1, v[3]])?;
            let sq = tape.mul(cat, cat)?;
            Ok(tape.mean(sq))
        },
        &[a, b, bias, col],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn grouped_row_sums() {
    let a = random(&[6, 2], 21);
    let w = random(&[3, 2], 22).frozen();
    let report = grad_check(
        |tape, v| {
            let s = tape.sum_row_groups(v[0], 2)?;
            let y = tape.mul(s, v[1])?;
            let y = tape.mul(y, y)?;
            Ok(tape.sum(y))
        },
        &[a, w],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-7, "{report:?}");
}

#[test]
fn sqrt_gradient() {
    let a = Tensor::vector(vec![0.5, 2.0, 3.5]).trainable();
    let report = grad_check(
        |tape, v| {
            let s = tape.sqrt(v[0])?;
            Ok(tape.sum(s))
        },
        &[a],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-7, "{report:?}");
}

#[test]
fn gather_rows_scatters_gradient() {
    let table = random(&[6, 3], 11);
    let weights = random(&[4, 3], 12).frozen();
    let report = grad_check(
        |tape, v| {
            let rows = tape.gather_rows(v[0], &[2, 0, 2, 5])?;
            let w = tape.mul(rows, v[1])?;
            Ok(tape.sum(w))
        },
        &[table, weights],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-7, "{report:?}");
}

#[test]
fn attention_gradient_with_padding() {
    let layout = AttentionLayout {
        batch: 2,
        seq: 4,
        heads: 2,
    };
    let mask = [1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    let q = random(&[8, 6], 13);
    let k = random(&[8, 6], 14);
    let v = random(&[8, 6], 15);
    let w = random(&[8, 6], 16).frozen();
    let report = grad_check(
        |tape, p| {
            let o = tape.attention(p[0], p[1], p[2], layout, &mask)?;
            let y = tape.mul(o, p[3])?;
            Ok(tape.sum(y))
        },
        &[q, k, v, w],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn bce_gradient() {
    let logits = Tensor::new(&[4, 1], vec![0.2, -3.0, 1.5, 0.0])
        .unwrap()
        .trainable();
    let report = grad_check(
        |tape, v| tape.bce_with_logits(v[0], &[1.0, 0.0, 0.0, 1.0]),
        &[logits],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-7, "{report:?}");
}

#[test]
fn two_layer_network_gradient() {
    let x = random(&[5, 4], 17).frozen();
    let w1 = random(&[4, 6], 18);
    let b1 = random(&[6], 19);
    let w2 = random(&[6, 1], 20);
    let report = grad_check(
        |tape, v| {
            let h = tape.matmul(v[0], v[1])?;
            let h = tape.add_row(h, v[2])?;
            let h = tape.gelu(h);
            let out = tape.matmul(h, v[3])?;
            tape.bce_with_logits(out, &[1.0, 0.0, 1.0, 1.0, 0.0])
        },
        &[x, w1, b1, w2],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

fn forward_and_grads(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let a = tape.leaf(&random(&[3, 4], seed));
    let b = tape.leaf(&random(&[4, 4], seed + 1));
    let p = tape.matmul(a, b).unwrap();
    let s = tape.softmax(p).unwrap();
    let loss = tape.sum(s);
    let l2 = tape.mul(s, s).unwrap();
    let l2 = tape.sum(l2);
    let total = tape.add(loss, l2).unwrap();
    tape.backward(total).unwrap();
    (tape.value(s).data().to_vec(), tape.grad(b))
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 1..40), width in 1usize..6) {
        let n = values.len() / width * width;
        prop_assume!(n > 0);
        let t = Tensor::new(&[n / width, width], values[..n].to_vec()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(t);
        let s = tape.softmax(x).unwrap();
        for row in tape.value(s).data().chunks(width) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn identical_inputs_give_identical_bits(seed in 0u64..1000) {
        let (v1, g1) = forward_and_grads(seed);
        let (v2, g2) = forward_and_grads(seed);
        prop_assert!(v1.iter().zip(&v2).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert!(v1.iter().chain(&g1).all(|x| x.is_finite()));
    }

    #[test]
    fn layernorm_rows_are_standardized(values in prop::collection::vec(-10.0f64..10.0, 8)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 4], values).unwrap());
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layernorm(x, g, b, 1e-5).unwrap();
        for (src, row) in tape.value(x).data().chunks(4).zip(tape.value(y).data().chunks(4)) {
            let mean = src.iter().sum::<f64>() / 4.0;
            let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            let m = row.iter().sum::<f64>() / 4.0;
            prop_assert!(m.abs() <= 1e-7);
            if var > 1e-2 {
                let v = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
                // eps keeps the variance slightly below one
                prop_assert!((v - var / (var + 1e-5)).abs() <= 1e-7);
            }
        }
    }
}
