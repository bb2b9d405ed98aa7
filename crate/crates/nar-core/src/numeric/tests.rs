use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamHyper, AdamState};
use super::tape::{Tape, Var};
use super::Tensor;

const FD_STEP: f64 = 1e-4;
const FD_TOL: f64 = 1e-3;

fn rand_data(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Inputs shifted away from 0 for ops with a kink there (relu, abs).
fn rand_data_off_zero(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let m: f64 = rng.gen_range(0.2..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Compares analytic gradients of `build` against central finite
/// differences over every input element. The loss is a weighted sum of the
/// op output so no gradient component can cancel out.
fn gradcheck(
    name: &str,
    inputs: &[(usize, usize, Vec<f64>)],
    build: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Var,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut eval =
        |values: &[Vec<f64>], weights: &Option<Vec<f64>>| -> (f64, Vec<Vec<f64>>, Vec<f64>) {
            let mut tape: Tape<'_, f64> = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .zip(values)
                .map(|((r, c, _), data)| tape.leaf_owned(*r, *c, data.clone(), true).unwrap())
                .collect();
            let out = build(&mut tape, &vars);
            let (or, oc) = tape.dims(out);
            let w = weights
                .clone()
                .unwrap_or_else(|| (0..or * oc).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let wv = tape.leaf_owned(or, oc, w.clone(), false).unwrap();
            let weighted = tape.mul(out, wv).unwrap();
            let loss = tape.sum(weighted).unwrap();
            let loss_val = tape.scalar_value(loss).unwrap();
            tape.backward(loss).unwrap();
            let grads = vars
                .iter()
                .map(|&v| tape.grad(v).expect("input grad missing").to_vec())
                .collect();
            (loss_val, grads, w)
        };

    let base_values: Vec<Vec<f64>> = inputs.iter().map(|(_, _, d)| d.clone()).collect();
    let (_, analytic, weights) = eval(&base_values, &None);
    let frozen = Some(weights);

    for (i, base) in base_values.iter().enumerate() {
        for j in 0..base.len() {
            let mut plus = base_values.clone();
            plus[i][j] += FD_STEP;
            let mut minus = base_values.clone();
            minus[i][j] -= FD_STEP;
            let (lp, _, _) = eval(&plus, &frozen);
            let (lm, _, _) = eval(&minus, &frozen);
            let fd = (lp - lm) / (2.0 * FD_STEP);
            let a = analytic[i][j];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(
                rel < FD_TOL,
                "{name}: input {i} element {j}: analytic {a} vs fd {fd} (rel {rel})"
            );
        }
    }
}

#[test]
fn gradcheck_elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = (3, 4, rand_data(&mut rng, 12));
    let b = (3, 4, rand_data(&mut rng, 12));
    gradcheck("add", &[a.clone(), b.clone()], |t, v| {
        t.add(v[0], v[1]).unwrap()
    });
    gradcheck("sub", &[a.clone(), b.clone()], |t, v| {
        t.sub(v[0], v[1]).unwrap()
    });
    gradcheck("mul", &[a.clone(), b], |t, v| t.mul(v[0], v[1]).unwrap());
    gradcheck("scale", &[a.clone()], |t, v| t.scale(v[0], -1.7).unwrap());
    gradcheck("sigmoid", &[a], |t, v| t.sigmoid(v[0]).unwrap());
    let off = (2, 5, rand_data_off_zero(&mut rng, 10));
    gradcheck("relu", &[off.clone()], |t, v| t.relu(v[0]).unwrap());
    gradcheck("abs", &[off], |t, v| t.abs(v[0]).unwrap());
}

#[test]
fn gradcheck_matmul_family() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = (3, 4, rand_data(&mut rng, 12));
    let b = (4, 2, rand_data(&mut rng, 8));
    gradcheck("matmul", &[a.clone(), b], |t, v| {
        t.matmul(v[0], v[1]).unwrap()
    });
    let bt = (5, 4, rand_data(&mut rng, 20));
    gradcheck("matmul_nt", &[a.clone(), bt], |t, v| {
        t.matmul_nt(v[0], v[1]).unwrap()
    });
    let w = (4, 3, rand_data(&mut rng, 12));
    let bias = (1, 3, rand_data(&mut rng, 3));
    gradcheck("affine", &[a, w, bias], |t, v| {
        t.affine(v[0], v[1], v[2]).unwrap()
    });
}

#[test]
fn gradcheck_broadcast_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = (4, 3, rand_data(&mut rng, 12));
    let v = (1, 3, rand_data(&mut rng, 3));
    gradcheck("add_rowvec", &[a.clone(), v.clone()], |t, vs| {
        t.add_rowvec(vs[0], vs[1]).unwrap()
    });
    gradcheck("mul_rowvec", &[a.clone(), v], |t, vs| {
        t.mul_rowvec(vs[0], vs[1]).unwrap()
    });
    gradcheck("sum", &[a.clone()], |t, vs| t.sum(vs[0]).unwrap());
    gradcheck("mean_rows", &[a], |t, vs| t.mean_rows(vs[0]).unwrap());
}

#[test]
fn gradcheck_structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = (2, 3, rand_data(&mut rng, 6));
    let b = (3, 3, rand_data(&mut rng, 9));
    gradcheck("concat_rows", &[a.clone(), b], |t, v| {
        t.concat_rows(&[v[0], v[1]]).unwrap()
    });
    let c = (2, 4, rand_data(&mut rng, 8));
    gradcheck("concat_cols", &[a.clone(), c], |t, v| {
        t.concat_cols(&[v[0], v[1]]).unwrap()
    });
    let big = (5, 4, rand_data(&mut rng, 20));
    gradcheck("slice_rows", &[big.clone()], |t, v| {
        t.slice_rows(v[0], 1, 4).unwrap()
    });
    gradcheck("slice_cols", &[big.clone()], |t, v| {
        t.slice_cols(v[0], 1, 3).unwrap()
    });
    gradcheck("gather_rows", &[big], |t, v| {
        t.gather_rows(v[0], &[4, 0, 2, 0]).unwrap()
    });
}

#[test]
fn gradcheck_normalizations() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = (3, 6, rand_data(&mut rng, 18));
    gradcheck("softmax_rows", &[a.clone()], |t, v| {
        t.softmax_rows(v[0]).unwrap()
    });
    gradcheck("layer_norm_rows", &[a], |t, v| {
        t.layer_norm_rows(v[0]).unwrap()
    });
}

#[test]
fn gradcheck_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let q = (2, 6, rand_data(&mut rng, 12));
    let k = (4, 6, rand_data(&mut rng, 24));
    let v = (4, 6, rand_data(&mut rng, 24));
    gradcheck("attention", &[q, k, v], |t, vs| {
        t.scaled_dot_attention(vs[0], vs[1], vs[2], 2).unwrap()
    });
}

#[test]
fn softmax_uniform_and_stable() {
    let mut tape: Tape<'_, f64> = Tape::inference();
    let x = tape.leaf_owned(1, 4, vec![3.0; 4], false).unwrap();
    let y = tape.softmax_rows(x).unwrap();
    let row = tape.value(y);
    assert!(row.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let big = tape.leaf_owned(1, 3, vec![1e4, -1e4, 0.0], false).unwrap();
    let yb = tape.softmax_rows(big).unwrap();
    assert!(tape.value(yb).iter().all(|v| v.is_finite()));
}

#[test]
fn layer_norm_rows_standardizes() {
    let mut tape: Tape<'_, f64> = Tape::inference();
    let x = tape
        .leaf_owned(2, 8, (0..16).map(|i| i as f64 * 0.7 - 3.0).collect(), false)
        .unwrap();
    let y = tape.layer_norm_rows(x).unwrap();
    for r in 0..2 {
        let row = &tape.value(y)[r * 8..(r + 1) * 8];
        let mean: f64 = row.iter().sum::<f64>() / 8.0;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn attention_single_key_returns_value_row() {
    let mut tape: Tape<'_, f64> = Tape::inference();
    let q = tape.leaf_owned(3, 4, vec![0.3; 12], false).unwrap();
    let k = tape
        .leaf_owned(1, 4, vec![-2.0, 0.5, 1.0, 9.0], false)
        .unwrap();
    let v = tape
        .leaf_owned(1, 4, vec![1.0, 2.0, 3.0, 4.0], false)
        .unwrap();
    let out = tape.scaled_dot_attention(q, k, v, 2).unwrap();
    for r in 0..3 {
        let row = &tape.value(out)[r * 4..(r + 1) * 4];
        assert_eq!(row, &[1.0, 2.0, 3.0, 4.0]);
    }
}

#[test]
fn backward_basics() {
    // loss = sum(x) -> grad all ones
    let mut tape: Tape<'_, f64> = Tape::new();
    let x = tape
        .leaf_owned(2, 2, vec![5.0, -1.0, 2.0, 0.0], true)
        .unwrap();
    let loss = tape.sum(x).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);

    // loss = sum(x^2) at x=[1,2] -> grad [2,4]
    let mut tape: Tape<'_, f64> = Tape::new();
    let x = tape.leaf_owned(2, 1, vec![1.0, 2.0], true).unwrap();
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);

    // a second backward accumulates
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0]);

    // non-scalar loss is rejected
    let mut tape: Tape<'_, f64> = Tape::new();
    let x = tape.leaf_owned(2, 1, vec![1.0, 2.0], true).unwrap();
    assert!(tape.backward(x).is_err());
}

#[test]
fn inference_tape_records_nothing() {
    let p = Tensor::new(2, 2, vec![1.0f64, 2.0, 3.0, 4.0])
        .unwrap()
        .with_grad();
    let mut tape: Tape<'_, f64> = Tape::inference();
    let x = tape.leaf(&p).unwrap();
    let y = tape.relu(x).unwrap();
    let s = tape.sum(y).unwrap();
    assert!(tape.backward(s).is_err() || tape.grad(x).is_none());
}

#[test]
fn strict_mode_rejects_non_finite() {
    let mut tape: Tape<'_, f64> = Tape::new().strict(true);
    assert!(tape.leaf_owned(1, 2, vec![1.0, f64::NAN], false).is_err());
    let mut tape: Tape<'_, f64> = Tape::new();
    assert!(tape.leaf_owned(1, 2, vec![1.0, f64::NAN], false).is_ok());
}

#[test]
fn shape_mismatches_error() {
    let mut tape: Tape<'_, f64> = Tape::new();
    let a = tape.leaf_owned(2, 3, vec![0.0; 6], false).unwrap();
    let b = tape.leaf_owned(3, 2, vec![0.0; 6], false).unwrap();
    assert!(tape.add(a, b).is_err());
    assert!(tape.matmul(a, a).is_err());
    assert!(tape.slice_rows(a, 1, 5).is_err());
    assert!(tape.scaled_dot_attention(a, a, a, 2).is_err());
    assert!(tape.scaled_dot_attention(a, b, b, 1).is_err());
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut tape: Tape<'_, f64> = Tape::new();
        let x = tape
            .leaf_owned(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6], true)
            .unwrap();
        let w = tape
            .leaf_owned(3, 2, vec![1.0, -0.5, 0.25, 0.75, -1.0, 2.0], true)
            .unwrap();
        let h = tape.matmul(x, w).unwrap();
        let s = tape.softmax_rows(h).unwrap();
        tape.value(s).to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn adam_first_step_hand_computed() {
    let mut p = Tensor::scalar(0.0f64);
    let mut state = AdamState::new(1);
    let hp = AdamHyper {
        lr: 0.1,
        ..Default::default()
    };
    adam_step(&mut p, &[1.0], &mut state, &hp).unwrap();
    // bias-corrected first step: m_hat = 1, v_hat = 1 -> delta = lr / (1 + eps)
    let expect = -0.1 / (1.0 + 1e-8);
    assert!((p.data()[0] - expect).abs() < 1e-12, "{}", p.data()[0]);
}

#[test]
fn adam_zero_gradient_no_change() {
    let mut p = Tensor::new(1, 3, vec![1.0f64, -2.0, 0.5]).unwrap();
    let before = p.data().to_vec();
    let mut state = AdamState::new(3);
    let hp = AdamHyper::default();
    for _ in 0..5 {
        adam_step(&mut p, &[0.0, 0.0, 0.0], &mut state, &hp).unwrap();
    }
    assert_eq!(p.data(), before.as_slice());
}

#[test]
fn adam_constant_gradient_step_size() {
    let mut p = Tensor::scalar(0.0f64);
    let mut state = AdamState::new(1);
    let hp = AdamHyper {
        lr: 0.01,
        ..Default::default()
    };
    let mut prev = 0.0;
    for i in 0..200 {
        adam_step(&mut p, &[2.5], &mut state, &hp).unwrap();
        let delta = (p.data()[0] - prev).abs();
        assert!(delta <= hp.lr * 1.0001, "step {i}: delta {delta}");
        prev = p.data()[0];
    }
    // steady state approaches lr per step
    let before = p.data()[0];
    adam_step(&mut p, &[2.5], &mut state, &hp).unwrap();
    assert!(((p.data()[0] - before).abs() - hp.lr).abs() < 1e-6);
}

#[test]
fn adam_shape_mismatch() {
    let mut p = Tensor::scalar(0.0f64);
    let mut state = AdamState::new(2);
    assert!(adam_step(&mut p, &[1.0], &mut state, &AdamHyper::default()).is_err());
    let mut state = AdamState::new(1);
    assert!(adam_step(&mut p, &[1.0, 2.0], &mut state, &AdamHyper::default()).is_err());
}

#[test]
fn tensor_validation() {
    assert!(Tensor::<f64>::new(2, 2, vec![0.0; 3]).is_err());
    let mut t = Tensor::<f64>::zeros(2, 2);
    assert!(t.set_grad(vec![0.0; 4]).is_ok());
    assert!(t.set_grad(vec![0.0; 5]).is_err());
}
