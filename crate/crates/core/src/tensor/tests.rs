use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum with fixed random weights, so every output coordinate
/// contributes to the checked scalar.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, tape.shape(y));
    let w = tape.constant(&w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

#[test]
fn matmul_examples() {
    let b = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
    assert_eq!(Tensor::identity(2).matmul(&b).unwrap(), b);
    let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
    let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
    assert_eq!(a.matmul(&b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    let z = Tensor::zeros(&[2, 2]);
    assert_eq!(z.matmul(&b).unwrap(), z);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(&Tensor::zeros(&[2, 3]));
    let b = tape.constant(&Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[7, 1]);
    let mut tape = Tape::new();
    let xv = tape.constant(&x);
    let k = tape.constant(&Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
    let y = tape.causal_conv1d(xv, k).unwrap();
    assert_eq!(tape.value(y), x.data());
}

#[test]
fn conv_impulse_response_is_reversed_kernel() {
    // Direct-convolution oracle: out[t] = Σ_j k[j]·x[t−K+1+j].
    let t_len = 8;
    let kernel = [0.5, -1.0, 2.0, 3.0];
    let mut x = vec![0.0; t_len];
    x[3] = 1.0;
    let mut expected = vec![0.0; t_len];
    for t in 0..t_len {
        for (j, &k) in kernel.iter().enumerate() {
            let src = t as isize - 3 + j as isize;
            if src >= 0 {
                expected[t] += k * x[src as usize];
            }
        }
    }
    assert_eq!(&expected[3..7], &[3.0, 2.0, -1.0, 0.5]);

    let mut tape = Tape::new();
    let xv = tape.constant(&Tensor::new(vec![t_len, 1], x).unwrap());
    let k = tape.constant(&Tensor::new(vec![4, 1, 1], kernel.to_vec()).unwrap());
    let y = tape.causal_conv1d(xv, k).unwrap();
    assert_eq!(tape.value(y), expected.as_slice());
}

#[test]
fn conv_kernel_longer_than_input_is_all_padding() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::full(&[2, 1], 1.0));
    let k = tape.constant(&Tensor::full(&[5, 1, 1], 1.0));
    let y = tape.causal_conv1d(x, k).unwrap();
    assert_eq!(tape.value(y), &[1.0, 2.0]);
}

#[test]
fn conv_rejects_non_finite_kernel() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::full(&[2, 1], 1.0));
    let k = tape.constant(&Tensor::new(vec![1, 1, 1], vec![f64::NAN]).unwrap());
    assert!(matches!(tape.causal_conv1d(x, k), Err(Error::Numeric(_))));
}

#[test]
fn log_softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::full(&[1, 5], 0.3));
    let y = tape.log_softmax(x);
    for v in tape.value(y) {
        assert!((v + 5f64.ln()).abs() < 1e-15);
    }
    let x = tape.constant(&Tensor::new(vec![2], vec![0.0, 3f64.ln()]).unwrap());
    let y = tape.log_softmax(x);
    let v = tape.value(y);
    assert!((v[0] + 4f64.ln()).abs() < 1e-15);
    assert!((v[1] - 0.75f64.ln()).abs() < 1e-15);
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let one = tape.constant(&Tensor::full(&[2], 1.0));
    let zero = tape.constant(&Tensor::zeros(&[2]));
    let c = tape.constant(&Tensor::full(&[1, 2], 4.0));
    let y = tape.layer_norm(c, one, zero, 1e-5).unwrap();
    assert_eq!(tape.value(y), &[0.0, 0.0]);

    let x = tape.constant(&Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap());
    let y = tape.layer_norm(x, one, zero, 1e-300).unwrap();
    assert!((tape.value(y)[0] + 1.0).abs() < 1e-12);
    assert!((tape.value(y)[1] - 1.0).abs() < 1e-12);

    let b = tape.constant(&Tensor::full(&[2], 0.7));
    let g0 = tape.constant(&Tensor::zeros(&[2]));
    let y = tape.layer_norm(x, g0, b, 1e-5).unwrap();
    assert_eq!(tape.value(y), &[0.7, 0.7]);
}

#[test]
fn batch_norm_train_normalizes_channels() {
    // Two channels with mean 5 / variance 4: values 5 ± 2.
    let mut data = Vec::new();
    for _n in 0..2 {
        for _c in 0..2 {
            for i in 0..6 {
                data.push(if i % 2 == 0 { 3.0 } else { 7.0 });
            }
        }
    }
    let x = Tensor::new(vec![2, 2, 3, 2], data).unwrap();
    let mut stats = BatchNormStats::new(2);
    let out = batch_norm2d(&x, &mut stats, NormMode::Train).unwrap();
    let (mean, var, _) = channel_moments(&out.output).unwrap();
    for c in 0..2 {
        assert!(mean[c].abs() < 1e-6);
        assert!((var[c] - 4.0 / (4.0 + 1e-5)).abs() < 1e-12);
    }
    assert!(!out.used_initial_stats);
}

#[test]
fn batch_norm_eval_with_identity_stats_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[1, 3, 4, 2]);
    let mut stats = BatchNormStats::new(3);
    stats.eps = 0.0;
    let out = batch_norm2d(&x, &mut stats, NormMode::Eval).unwrap();
    assert_eq!(out.output, x);
    assert!(out.used_initial_stats, "eval before training must be flagged");
}

#[test]
fn batch_norm_running_stats_follow_scalar_recurrence() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&mut rng, &[2, 1, 3, 3]);
    let b = rand_tensor(&mut rng, &[2, 1, 3, 3]);
    let mut stats = BatchNormStats::new(1);
    batch_norm2d(&a, &mut stats, NormMode::Train).unwrap();
    batch_norm2d(&b, &mut stats, NormMode::Train).unwrap();

    let moments = |t: &Tensor| {
        let n = t.numel() as f64;
        let m = t.data().iter().sum::<f64>() / n;
        let v = t.data().iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        (m, v)
    };
    let (ma, va) = moments(&a);
    let (mb, vb) = moments(&b);
    let mean = 0.9 * (0.9 * 0.0 + 0.1 * ma) + 0.1 * mb;
    let var = 0.9 * (0.9 * 1.0 + 0.1 * va) + 0.1 * vb;
    assert!((stats.running_mean[0] - mean).abs() < 1e-14);
    assert!((stats.running_var[0] - var).abs() < 1e-14);
    assert_eq!(stats.updates, 2);
}

#[test]
fn activation_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
    let y = tape.relu(x);
    assert_eq!(tape.value(y), &[0.0, 2.0]);
    let z = tape.constant(&Tensor::scalar(0.0));
    let y = tape.silu(z);
    assert_eq!(tape.value(y), &[0.0]);
    let ab = tape.constant(&Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap());
    let y = tape.activation(ab, Activation::Glu).unwrap();
    assert_eq!(tape.value(y), &[1.0]);
    let odd = tape.constant(&Tensor::zeros(&[1, 3]));
    assert!(matches!(
        tape.activation(odd, Activation::Glu),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::full(&[2, 3], 0.5).with_requires_grad());
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
}

#[test]
fn backward_linear_layer_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[4, 3]);
    let w = rand_tensor(&mut rng, &[3, 2]).with_requires_grad();
    let mut tape = Tape::new();
    let xv = tape.constant(&x);
    let wv = tape.leaf(&w);
    let y = tape.matmul(xv, wv).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    // grad(W) = xᵀ·1
    let xt = Tensor::new(vec![3, 4], transpose(4, 3, x.data())).unwrap();
    let expected = xt.matmul(&Tensor::full(&[4, 2], 1.0)).unwrap();
    assert!(tape.grad(wv).unwrap().max_abs_diff(&expected) < 1e-15);
}

#[test]
fn backward_twice_doubles_until_reset() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::full(&[3], 2.0).with_requires_grad());
    let y = tape.mul(x, x).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[8.0, 8.0, 8.0]);
    tape.zero_grad();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 4.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::full(&[3], 2.0).with_requires_grad());
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn fan_out_gradients_sum() {
    let mut tape = Tape::new();
    let t = Tensor::full(&[2], 3.0);
    let a = tape.param(7, &t);
    let b = tape.param(7, &t);
    assert_eq!(a, b);
    let s1 = tape.sum(a);
    let s2 = tape.sum(b);
    let s = tape.add(s1, s2).unwrap();
    tape.backward(s).unwrap();
    let grads = tape.param_grads();
    assert_eq!(grads, vec![(7, &[2.0, 2.0][..])]);
}

#[test]
fn finite_diff_polynomial_oracle() {
    let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    let err = finite_diff_check(
        |t, v| {
            let sq = t.mul(v, v)?;
            Ok(t.sum(sq))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
    let err = finite_diff_check(|t, _v| Ok(t.constant(&Tensor::scalar(3.0))), &x, 1e-5).unwrap();
    assert_eq!(err, 0.0);
}

fn check_unary(name: &str, shape: &[usize], seed: u64, f: impl Fn(&mut Tape, Var) -> Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut rng, shape);
    let err = finite_diff_check(
        |t, v| {
            let y = f(t, v)?;
            weighted_sum(t, y, seed + 100)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{name}: relative error {err}");
}

#[test]
fn isolated_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = rand_tensor(&mut rng, &[4, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    let k3 = rand_tensor(&mut rng, &[3, 2, 2]);
    let kd = rand_tensor(&mut rng, &[3, 4]);
    let other = rand_tensor(&mut rng, &[5, 4]);

    check_unary("matmul lhs", &[5, 4], 1, |t, x| {
        let w = t.constant(&w);
        t.matmul(x, w)
    });
    check_unary("matmul rhs", &[4, 3], 2, |t, x| {
        let a = t.constant(&other);
        t.matmul(a, x)
    });
    check_unary("add_row bias", &[3], 3, |t, x| {
        let a = t.constant(&other.matmul(&w).unwrap());
        t.add_row(a, x)
    });
    check_unary("mul_row", &[3], 4, |t, x| {
        let a = t.constant(&other.matmul(&w).unwrap());
        t.mul_row(a, x)
    });
    check_unary("mul", &[5, 4], 5, |t, x| {
        let o = t.constant(&other);
        t.mul(x, o)
    });
    check_unary("sub", &[5, 4], 6, |t, x| {
        let o = t.constant(&other);
        t.sub(o, x)
    });
    check_unary("relu", &[5, 4], 7, |t, x| Ok(t.relu(x)));
    check_unary("silu", &[5, 4], 8, |t, x| Ok(t.silu(x)));
    check_unary("sigmoid", &[5, 4], 9, |t, x| t.activation(x, Activation::Sigmoid));
    check_unary("glu", &[5, 4], 10, |t, x| t.activation(x, Activation::Glu));
    check_unary("log_softmax", &[5, 4], 11, |t, x| Ok(t.log_softmax(x)));
    check_unary("layer_norm input", &[5, 3], 12, |t, x| {
        let g = t.constant(&w.slice_rows(0, 1).reshape(&[3]).unwrap());
        let b = t.constant(&b);
        t.layer_norm(x, g, b, 1e-5)
    });
    check_unary("layer_norm gain", &[3], 13, |t, g| {
        let x = t.constant(&other.matmul(&w).unwrap());
        let b = t.constant(&b);
        t.layer_norm(x, g, b, 1e-5)
    });
    check_unary("layer_norm bias", &[3], 14, |t, b| {
        let x = t.constant(&other.matmul(&w).unwrap());
        let g = t.constant(&Tensor::full(&[3], 1.5));
        t.layer_norm(x, g, b, 1e-5)
    });
    check_unary("batch_norm2d", &[2, 2, 3, 2], 15, |t, x| t.batch_norm2d(x, 1e-5));
    check_unary("causal_conv input", &[6, 4], 16, |t, x| {
        let k = t.constant(&k3);
        t.causal_conv1d_lanes(x, k, 2)
    });
    check_unary("causal_conv kernel", &[3, 2, 2], 17, |t, k| {
        let x = t.constant(&other.slice_rows(0, 5));
        t.causal_conv1d_lanes(x, k, 2)
    });
    check_unary("depthwise input", &[5, 4], 18, |t, x| {
        let k = t.constant(&kd);
        t.depthwise_conv1d(x, k)
    });
    check_unary("depthwise kernel", &[3, 4], 19, |t, k| {
        let x = t.constant(&other);
        t.depthwise_conv1d(x, k)
    });
    for (i, which) in ["q", "k", "v"].iter().enumerate() {
        check_unary(&format!("attention {which}"), &[5, 4], 20 + i as u64, |t, x| {
            let o = t.constant(&other);
            let (q, k, v) = match i {
                0 => (x, o, o),
                1 => (o, x, o),
                _ => (o, o, x),
            };
            t.causal_attention(q, k, v, 2, 3)
        });
    }
    check_unary("slice/concat/permute", &[5, 4], 23, |t, x| {
        let a = t.slice_cols(x, 1, 2)?;
        let b = t.permute_cols(x, &[3, 0, 2, 1])?;
        t.concat_cols(&[a, b, a])
    });
    check_unary("repeat_elems", &[3], 24, |t, x| t.repeat_elems(x, 4));
    check_unary("scale", &[5, 4], 25, |t, x| Ok(t.scale(x, -2.5)));
    check_unary("log_mean_exp", &[5, 4], 26, |t, x| {
        let y = t.scale(x, 2.0);
        let o = t.constant(&other);
        t.log_mean_exp(&[x, y, o])
    });
}

#[test]
fn attention_single_token_is_value_passthrough() {
    let mut tape = Tape::new();
    let q = tape.constant(&Tensor::new(vec![1, 4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
    let v = tape.constant(&Tensor::new(vec![1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
    let y = tape.causal_attention(q, q, v, 2, 8).unwrap();
    assert_eq!(tape.value(y), tape.value(v));
}

#[test]
fn attention_uniform_values_give_constant_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::new();
    let q = tape.constant(&rand_tensor(&mut rng, &[6, 4]));
    let k = tape.constant(&rand_tensor(&mut rng, &[6, 4]));
    let row = [0.5, -1.0, 2.0, 0.25];
    let v = tape.constant(&Tensor::from_rows(&vec![row.to_vec(); 6]));
    let y = tape.causal_attention(q, k, v, 2, 4).unwrap();
    for r in tape.value(y).chunks(4) {
        for (a, b) in r.iter().zip(&row) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

#[test]
fn log_mean_exp_is_order_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let ts: Vec<Tensor> = (0..5).map(|_| rand_tensor(&mut rng, &[3, 3])).collect();
    let mut tape = Tape::new();
    let vs: Vec<Var> = ts.iter().map(|t| tape.constant(t)).collect();
    let a = tape.log_mean_exp(&vs).unwrap();
    let rev: Vec<Var> = vs.iter().rev().copied().collect();
    let b = tape.log_mean_exp(&rev).unwrap();
    assert_eq!(tape.value(a), tape.value(b));
}

proptest! {
    #[test]
    fn log_softmax_rows_normalize(row in prop::collection::vec(-50.0f64..50.0, 1..40), shift in -100.0f64..100.0) {
        let n = row.len();
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(vec![1, n], row.clone()).unwrap());
        let y = tape.log_softmax(x);
        let s: f64 = tape.value(y).iter().map(|v| v.exp()).sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let xs = tape.constant(&Tensor::new(vec![1, n], shifted).unwrap());
        let ys = tape.log_softmax(xs);
        for (a, b) in tape.value(y).iter().zip(tape.value(ys)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn causal_ops_ignore_the_future(seed in 0u64..1000, cut in 0usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[10, 4]);
        let k = rand_tensor(&mut rng, &[3, 2, 2]);
        let kd = rand_tensor(&mut rng, &[4, 4]);
        let mut y = x.clone();
        for v in &mut y.data_mut()[(cut + 1) * 4..] {
            *v += rng.random_range(-5.0..5.0);
        }
        let run = |input: &Tensor| {
            let mut t = Tape::new();
            let xv = t.constant(input);
            let kv = t.constant(&k);
            let kdv = t.constant(&kd);
            let a = t.causal_conv1d_lanes(xv, kv, 2).unwrap();
            let b = t.depthwise_conv1d(a, kdv).unwrap();
            let c = t.causal_attention(b, a, b, 2, 4).unwrap();
            t.tensor(c)
        };
        let (a, b) = (run(&x), run(&y));
        prop_assert_eq!(&a.data()[..(cut + 1) * 4], &b.data()[..(cut + 1) * 4]);
    }
}
