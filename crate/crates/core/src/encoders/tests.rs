use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::blocks::*;
use super::*;
use crate::ctc::ctc_loss_on_tape;
use crate::tensor::{finite_diff_check, Activation};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn builder(seed: u64) -> Builder {
    Builder::new(ChaCha8Rng::seed_from_u64(seed))
}

/// Replaces every parameter with a random value so that no branch is
/// trivially zero; gains stay near 1.
fn randomize(b: &mut Builder, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in b.names.iter().zip(b.tensors.iter_mut()) {
        let gain = name.ends_with(".gain");
        for v in t.data_mut() {
            let r: f64 = rng.random_range(-0.5..0.5);
            *v = if gain { 1.0 + r } else { r };
        }
    }
}

fn ctx(params: &[Tensor]) -> Ctx<'_> {
    Ctx {
        params,
        frame_offset: 0,
        bypass_norm: false,
    }
}

/// `Σ w ⊙ y` with fixed random weights, reducing a block output to a scalar.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &shape);
    let w = tape.constant(&w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn input(seed: u64, t: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand_tensor(&mut rng, &[t, FEATURES])
}

#[test]
fn paper_configs_match_the_published_table() {
    let t = ArchConfig::paper(ArchKind::Tds);
    assert_eq!((t.d_in, t.blocks, t.channels, t.kernel, t.mlp_dim), (528, 4, 24, 32, 384));
    let x = ArchConfig::paper(ArchKind::TdsTransformer);
    assert_eq!((x.d_in, x.layers, x.heads, x.kernel, x.ffn_dim), (192, 2, 4, 32, 2048));
    let c = ArchConfig::paper(ArchKind::Conformer);
    assert_eq!((c.d_in, c.layers, c.heads, c.kernel, c.ffn_dim), (528, 3, 6, 31, 256));
    for k in ArchKind::ALL {
        assert_eq!(ArchConfig::paper(k).alphabet_size, 30);
        ArchConfig::paper(k).validate().unwrap();
        ArchConfig::toy(k).validate().unwrap();
    }
}

#[test]
fn toy_configs_shrink_widths_and_depths() {
    let t = ArchConfig::toy(ArchKind::Tds);
    assert_eq!((t.mlp_dim, t.channels, t.blocks, t.d_model, t.kernel), (48, 3, 2, 96, 32));
    let x = ArchConfig::toy(ArchKind::TdsTransformer);
    assert_eq!((x.d_model, x.layers, x.heads, x.ffn_dim), (24, 1, 4, 256));
    assert_eq!(x.mlp_out(), 4 * x.d_model);
    let c = ArchConfig::toy(ArchKind::Conformer);
    assert_eq!((c.d_model, c.layers, c.heads, c.ffn_dim, c.kernel), (66, 1, 6, 32, 31));
}

#[test]
fn canonical_text_round_trips() {
    for k in ArchKind::ALL {
        for s in [Scale::Paper, Scale::Toy] {
            let a = ArchConfig::new(k, s);
            assert_eq!(ArchConfig::from_canonical(&a.to_canonical()).unwrap(), a);
        }
    }
    let mut text = ArchConfig::paper(ArchKind::Tds).to_canonical();
    text.push_str("dropout=1\n");
    assert!(matches!(ArchConfig::from_canonical(&text), Err(Error::Config(_))));
}

#[test]
fn invalid_configs_are_config_errors() {
    let mut a = ArchConfig::toy(ArchKind::Tds);
    a.channels = 5;
    assert!(matches!(Model::new(a, 0), Err(Error::Config(_))));
    let mut a = ArchConfig::toy(ArchKind::Conformer);
    a.heads = 5;
    assert!(matches!(Model::new(a, 0), Err(Error::Config(_))));
    let mut a = ArchConfig::toy(ArchKind::Conformer);
    a.kernel = 30;
    assert!(matches!(Model::new(a, 0), Err(Error::Config(_))));
    let m = Model::new(ArchConfig::toy(ArchKind::Tds), 0).unwrap();
    assert!(matches!(m.emissions(&input(0, 4), &[], 0), Err(Error::Config(_))));
    assert!(matches!(m.emissions(&input(0, 4), &[16], 0), Err(Error::Config(_))));
}

/// Closed-form parameter counts, written out independently of the builder.
fn expected_params(a: &ArchConfig) -> usize {
    let lin = |i: usize, o: usize| i * o + o;
    let ln = |d: usize| 2 * d;
    let w = 2 * a.mlp_dim;
    let mlp = 2 * (lin(528, a.mlp_dim) + lin(a.mlp_dim, a.mlp_dim));
    let tds = a.blocks * (a.kernel * a.channels * a.channels + a.channels + 2 * ln(w) + 2 * lin(w, w));
    let d = a.d_model;
    let mhsa = ln(d) + 4 * lin(d, d);
    match a.kind {
        ArchKind::Tds => mlp + tds + lin(w, 30),
        ArchKind::TdsTransformer => {
            let ffn = ln(d) + lin(d, a.ffn_dim) + lin(a.ffn_dim, d);
            mlp + tds + lin(w, d) + a.layers * (mhsa + ffn) + ln(d) + lin(d, 30)
        }
        ArchKind::Conformer => {
            let ffn = ln(d) + lin(d, a.ffn_dim) + lin(a.ffn_dim, d);
            let conv = ln(d) + lin(d, 2 * d) + a.kernel * d + d + ln(d) + lin(d, d);
            mlp + lin(w, d) + a.layers * (2 * ffn + mhsa + conv + ln(d)) + lin(d, 30)
        }
    }
}

#[test]
fn parameter_count_regression() {
    let pinned = [
        (ArchKind::Tds, 5_535_870),
        (ArchKind::TdsTransformer, 7_541_950),
        (ArchKind::Conformer, 8_685_822),
    ];
    for (k, n) in pinned {
        let a = ArchConfig::paper(k);
        assert_eq!(expected_params(&a), n, "{k}");
        assert_eq!(Model::new(a, 0).unwrap().param_count(), n, "{k}");
        let toy = ArchConfig::toy(k);
        assert_eq!(Model::new(toy.clone(), 0).unwrap().param_count(), expected_params(&toy), "{k} toy");
    }
}

#[test]
fn paper_tds_receptive_field_is_one_second() {
    let a = ArchConfig::paper(ArchKind::Tds);
    assert_eq!(a.receptive_field(), 125);
    // 125 frames at a 16-sample hop at 2 kHz.
    assert!((125.0 * 16.0 / 2000.0 - 1.0f64).abs() < 1e-12);
}

#[test]
fn impulse_response_ends_exactly_at_the_receptive_field() {
    let mut tds4 = ArchConfig::toy(ArchKind::Tds);
    tds4.blocks = 4;
    for a in [tds4, ArchConfig::toy(ArchKind::TdsTransformer), ArchConfig::toy(ArchKind::Conformer)] {
        let rf = a.receptive_field();
        let mut m = Model::new(a.clone(), 3).unwrap().with_offsets(vec![0]).unwrap();
        // Open the zero-initialized residual branches.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (name, p) in m.names.clone().iter().zip(m.params_mut()) {
            if name.contains("fc.1") || name.contains(".out.") || name.contains("pointwise2") || name.ends_with("ffn.1.weight") {
                for v in p.data_mut() {
                    *v = rng.random_range(-0.2..0.2);
                }
            }
        }
        let x = input(1, rf + 4);
        let mut y = x.clone();
        y.data_mut()[7] += 1.0;
        let e0 = m.emissions(&x, &[0], 0).unwrap();
        let e1 = m.emissions(&y, &[0], 0).unwrap();
        assert_ne!(e0.row(rf - 1), e1.row(rf - 1), "{}", a.kind);
        for t in rf..rf + 4 {
            assert_eq!(e0.row(t), e1.row(t), "{} frame {t}", a.kind);
        }
    }
}

#[test]
fn forward_rows_are_normalized_and_deterministic() {
    for k in ArchKind::ALL {
        let m = Model::new(ArchConfig::toy(k), 1).unwrap();
        let spec = Spectrogram::new(12, input(2, 12).into_data()).unwrap();
        let a = m.forward(&spec).unwrap();
        let b = m.forward(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.frames(), a.width()), (12, 30));
        assert!(a.normalization_error() < 1e-12, "{k}");
    }
}

#[test]
fn width_mismatch_names_both_dims() {
    let m = Model::new(ArchConfig::toy(ArchKind::Tds), 1).unwrap();
    let x = Tensor::zeros(&[4, 1000]);
    match m.emissions(&x, &[0], 0) {
        Err(Error::Config(msg)) => assert!(msg.contains("1000") && msg.contains("1056"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn future_perturbations_leave_the_past_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for k in ArchKind::ALL {
        let m = Model::new(ArchConfig::toy(k), 4).unwrap();
        let x = input(3, 20);
        let base = m.emissions(&x, &[-1, 0, 1], 0).unwrap();
        for _ in 0..5 {
            let t = rng.random_range(1..20);
            let mut y = x.clone();
            for v in &mut y.data_mut()[t * FEATURES..] {
                *v += rng.random_range(-1.0..1.0);
            }
            let e = m.emissions(&y, &[-1, 0, 1], 0).unwrap();
            assert_eq!(base.data()[..t * 30], e.data()[..t * 30], "{k} t={t}");
        }
    }
}

#[test]
fn tds_block_with_empty_branches_is_identity_without_norms() {
    let mut b = builder(0);
    let blk = TdsBlock::new(&mut b, "b", 3, 96, 32).unwrap();
    for t in b.tensors.iter_mut() {
        t.data_mut().fill(0.0);
    }
    let x = input(4, 6).slice_rows(0, 6);
    let x = Tensor::new(vec![6, 96], x.data()[..6 * 96].to_vec()).unwrap();
    let mut tape = Tape::new();
    let v = tape.constant(&x);
    let cx = Ctx {
        bypass_norm: true,
        ..ctx(&b.tensors)
    };
    let y = blk.forward(&mut tape, &cx, v).unwrap();
    assert_eq!(tape.value(y), x.data());
    assert!(TdsBlock::new(&mut b, "c", 5, 96, 32).is_err());
}

#[test]
fn conformer_block_with_zero_branches_is_final_norm() {
    let mut b = builder(0);
    let blk = ConformerBlock::new(&mut b, "c", 12, 3, 8, 5, 125).unwrap();
    for (name, t) in b.names.iter().zip(b.tensors.iter_mut()) {
        if name.ends_with(".1.weight") || name.contains("pointwise2") || name.contains(".out.") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name} not zero-initialized");
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[5, 12]);
    let mut tape = Tape::new();
    let v = tape.constant(&x);
    let y = blk.forward(&mut tape, &ctx(&b.tensors), v).unwrap();
    let g = tape.constant(&Tensor::full(&[12], 1.0));
    let z = tape.constant(&Tensor::zeros(&[12]));
    let ln = tape.layer_norm(v, g, z, LN_EPS).unwrap();
    assert_eq!(tape.value(y), tape.value(ln));
}

#[test]
fn single_token_transformer_layer_matches_hand_computation() {
    let mut b = builder(2);
    let layer = TransformerLayer::new(&mut b, "t", 8, 2, 16, 125).unwrap();
    randomize(&mut b, 3);
    let p = &b.tensors;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[1, 8]);

    let ln = |v: &[f64], g: &Tensor, bias: &Tensor| -> Vec<f64> {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / v.len() as f64;
        v.iter()
            .enumerate()
            .map(|(i, a)| (a - m) / (var + LN_EPS).sqrt() * g.data()[i] + bias.data()[i])
            .collect()
    };
    let affine = |v: &[f64], l: &Linear| -> Vec<f64> {
        let (w, bias) = (&p[l.w], &p[l.b]);
        let cols = w.cols();
        (0..cols)
            .map(|j| bias.data()[j] + v.iter().enumerate().map(|(i, a)| a * w.data()[i * cols + j]).sum::<f64>())
            .collect()
    };
    // Softmax over a single key is 1, so attention returns v.
    let h = ln(x.data(), &p[layer.ln.g], &p[layer.ln.b]);
    let attn = affine(&affine(&h, &layer.attn.v), &layer.attn.o);
    let x1: Vec<f64> = x.data().iter().zip(&attn).map(|(a, b)| a + b).collect();
    let h = ln(&x1, &p[layer.ff.ln.g], &p[layer.ff.ln.b]);
    let h: Vec<f64> = affine(&h, &layer.ff.l1).into_iter().map(|v| v.max(0.0)).collect();
    let f = affine(&h, &layer.ff.l2);
    let expected: Vec<f64> = x1.iter().zip(&f).map(|(a, b)| a + b).collect();

    let mut tape = Tape::new();
    let v = tape.constant(&x);
    let y = layer.forward(&mut tape, &ctx(p), v).unwrap();
    for (a, e) in tape.value(y).iter().zip(&expected) {
        assert!((a - e).abs() < 1e-12, "{a} vs {e}");
    }
}

#[test]
fn bottleneck_zero_and_identity() {
    let mut b = builder(0);
    let proj = b.linear("p", 96, 24, false);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[4, 96]);

    b.tensors[proj.w].data_mut().fill(0.0);
    let mut tape = Tape::new();
    let v = tape.constant(&x);
    let y = proj.forward(&mut tape, &ctx(&b.tensors), v).unwrap();
    assert!(tape.value(y).iter().all(|&v| v == 0.0));

    for i in 0..24 {
        b.tensors[proj.w].data_mut()[i * 24 + i] = 1.0;
    }
    let mut tape = Tape::new();
    let v = tape.constant(&x);
    let y = proj.forward(&mut tape, &ctx(&b.tensors), v).unwrap();
    for r in 0..4 {
        assert_eq!(&tape.value(y)[r * 24..(r + 1) * 24], &x.row(r)[..24]);
    }
    // 768 -> 192 at paper scale, 96 -> 24 at toy scale.
    let a = ArchConfig::paper(ArchKind::TdsTransformer);
    assert_eq!(a.mlp_out(), 4 * a.d_model);
}

fn block_gradient<F>(name: &str, d: usize, build: F)
where
    F: Fn(&mut Builder) -> Box<dyn Fn(&mut Tape, &Ctx, Var) -> Result<Var>>,
{
    let mut b = builder(7);
    let f = build(&mut b);
    randomize(&mut b, 8);
    let params = b.tensors;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[8, d]);
    let err = finite_diff_check(
        |tape, v| {
            let y = f(tape, &ctx(&params), v)?;
            weighted_sum(tape, y, 10)
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{name}: relative error {err}");
}

#[test]
fn block_gradients_match_finite_differences() {
    block_gradient("tds block", 96, |b| {
        let blk = TdsBlock::new(b, "b", 3, 96, 32).unwrap();
        Box::new(move |t, cx, x| blk.forward(t, cx, x))
    });
    block_gradient("transformer layer", 24, |b| {
        let l = TransformerLayer::new(b, "t", 24, 4, 32, 125).unwrap();
        Box::new(move |t, cx, x| l.forward(t, cx, x))
    });
    block_gradient("conformer block", 66, |b| {
        let l = ConformerBlock::new(b, "c", 66, 6, 32, 31, 125).unwrap();
        Box::new(move |t, cx, x| l.forward(t, cx, x))
    });
    block_gradient("bottleneck", 96, |b| {
        let l = b.linear("p", 96, 24, false);
        Box::new(move |t, cx, x| l.forward(t, cx, x))
    });
    block_gradient("feed-forward", 24, |b| {
        let l = FeedForward::new(b, "f", 24, 16, Activation::Silu);
        Box::new(move |t, cx, x| l.forward(t, cx, x))
    });
}

/// CTC loss of a toy model on fixed input, as a function of its parameters.
fn model_loss(m: &Model, x: &Tensor, target: &[usize], tape: &mut Tape) -> Var {
    let logp = m.forward_tape(tape, x, &[-1, 0, 1], 0).unwrap();
    ctc_loss_on_tape(tape, logp, target).unwrap()
}

#[test]
fn full_model_parameter_gradients_match_finite_differences() {
    for k in ArchKind::ALL {
        let mut m = Model::new(ArchConfig::toy(k), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // Give the zero-initialized projections some weight.
        for p in m.params_mut() {
            if p.data().iter().all(|&v| v == 0.0) {
                for v in p.data_mut() {
                    *v = rng.random_range(-0.1..0.1);
                }
            }
        }
        let x = input(13, 8);
        let target = [3, 5, 3];
        let mut tape = Tape::new();
        let loss = model_loss(&m, &x, &target, &mut tape);
        tape.backward(loss).unwrap();
        let grads: Vec<(usize, Vec<f64>)> = tape.param_grads().into_iter().map(|(i, g)| (i, g.to_vec())).collect();
        assert_eq!(grads.len(), m.params().len(), "{k}: every parameter reached");

        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for (id, g) in grads {
            for _ in 0..2 {
                let j = rng.random_range(0..g.len());
                let orig = m.params()[id].data()[j];
                let mut eval = |v: f64| {
                    m.params_mut()[id].data_mut()[j] = v;
                    let mut t = Tape::new();
                    let l = model_loss(&m, &x, &target, &mut t);
                    t.value(l)[0]
                };
                let numeric = (eval(orig + eps) - eval(orig - eps)) / (2.0 * eps);
                m.params_mut()[id].data_mut()[j] = orig;
                let err = (g[j] - numeric).abs() / (g[j].abs() + numeric.abs()).max(1e-12);
                worst = worst.max(if (g[j] - numeric).abs() < 1e-9 { 0.0 } else { err });
            }
        }
        assert!(worst < 1e-4, "{k}: relative error {worst}");
    }
}

#[test]
fn full_group_averaging_is_rotation_invariant() {
    let all: Vec<i32> = (0..16).collect();
    let m = Model::new(ArchConfig::toy(ArchKind::Tds), 21).unwrap();
    let spec = Spectrogram::new(6, input(22, 6).into_data()).unwrap();
    let base = m.emissions(&spec.to_tensor(), &all, 0).unwrap();
    for r in [1, 5, -3] {
        let rotated = crate::augment::rotate_spectrogram(&spec, r);
        let e = m.emissions(&rotated.to_tensor(), &all, 0).unwrap();
        assert_eq!(e, base, "rotation {r}");
    }
    // The three-offset average is only approximately invariant.
    let three = [-1, 0, 1];
    let a = m.emissions(&spec.to_tensor(), &three, 0).unwrap();
    let b = m
        .emissions(&crate::augment::rotate_spectrogram(&spec, 1).to_tensor(), &three, 0)
        .unwrap();
    assert!(a.data().iter().zip(b.data()).any(|(x, y)| (x - y).abs() > 1e-6));
}

#[test]
fn single_offset_is_the_plain_forward() {
    let m = Model::new(ArchConfig::toy(ArchKind::Conformer), 2).unwrap();
    let x = input(5, 6);
    let a = m.emissions(&x, &[0], 0).unwrap();
    let mut tape = Tape::new();
    let v = m.forward_tape(&mut tape, &x, &[0], 0).unwrap();
    assert_eq!(a.data(), tape.value(v));
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let mut m = Model::new(ArchConfig::toy(ArchKind::TdsTransformer), 3)
        .unwrap()
        .with_offsets(vec![0, 2])
        .unwrap();
    m.norm.update(&[0.5; 32], &[2.0; 32]);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.emgm");
    save_checkpoint(&m, &p).unwrap();
    let back = load_checkpoint(&p).unwrap();
    assert_eq!(back.arch, m.arch);
    assert_eq!(back.rotation_offsets, m.rotation_offsets);
    assert_eq!(back.norm, m.norm);
    assert_eq!(back.params(), m.params());
    assert_eq!(back.param_names(), m.param_names());

    let bytes = encode_checkpoint(&m);
    let mut bad = bytes.clone();
    bad[1] = b'X';
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));
    match decode_checkpoint(&bytes[..bytes.len() - 10]) {
        Err(Error::Format { message, .. }) => assert!(message.contains("truncated"), "{message}"),
        other => panic!("{other:?}"),
    }
}
