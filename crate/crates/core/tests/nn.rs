use meaflow::dataset::{ClassLabel, Dpi, FeatureTable};
use meaflow::nn::{
    build_cnn, extract_embeddings, gradient_check, optimizer_step, train_cnn, Activation,
    CnnConfig, CnnModel, Layer, OptimizerKind, OptimizerState, Tap,
};
use meaflow::par::{self, Exec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(input_length: usize) -> CnnConfig {
    CnnConfig {
        input_length,
        conv_filters: vec![3, 4],
        kernel_size: 3,
        stride: 2,
        dense_widths: vec![5],
        batch_size: 8,
        ..CnnConfig::default()
    }
}

fn random_batch(rows: usize, width: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..rows * width)
        .map(|_| r.random_range(-1.0..1.0))
        .collect();
    let y = (0..rows).map(|i| i % 3).collect();
    (x, y)
}

fn table(width: usize, x: Vec<f64>, y: &[usize]) -> FeatureTable {
    let labels = y
        .iter()
        .map(|&c| ClassLabel::from_index(c).unwrap())
        .collect();
    FeatureTable::with_prefix("f", width, x, labels, Dpi::new(0).unwrap()).unwrap()
}

/// Direct-loop forward pass: explicit zero padding, no im2col, no GEMM.
fn naive_logits(model: &CnnModel<f64>, x: &[f64]) -> Vec<f64> {
    let relu = |v: f64| {
        if model.config.activation == Activation::Relu {
            v.max(0.0)
        } else {
            v
        }
    };
    let n = model.layers.len();
    let mut act = x.to_vec();
    let mut channels = 1;
    for (l, layer) in model.layers.iter().enumerate() {
        let mut out = match layer {
            Layer::Conv(c) => {
                let len = act.len() / channels;
                let out_len = len.div_ceil(c.stride);
                let need = (out_len - 1) * c.stride + c.kernel;
                let pad_left = need.saturating_sub(len) / 2;
                let mut y = vec![0.0; out_len * c.out_ch];
                for o in 0..out_len {
                    for f in 0..c.out_ch {
                        let mut s = c.bias[f];
                        for k in 0..c.kernel {
                            let pos = (o * c.stride + k) as i64 - pad_left as i64;
                            if pos < 0 || pos >= len as i64 {
                                continue;
                            }
                            for ch in 0..channels {
                                s += c.weight[(k * channels + ch) * c.out_ch + f]
                                    * act[pos as usize * channels + ch];
                            }
                        }
                        y[o * c.out_ch + f] = s;
                    }
                }
                channels = c.out_ch;
                y
            }
            Layer::Dense(d) => (0..d.n_out)
                .map(|j| {
                    d.bias[j]
                        + (0..d.n_in)
                            .map(|i| act[i] * d.weight[i * d.n_out + j])
                            .sum::<f64>()
                })
                .collect(),
        };
        if l + 1 < n {
            out.iter_mut().for_each(|v| *v = relu(*v));
        }
        act = out;
    }
    act
}

#[test]
fn forward_matches_direct_loop_convolution() {
    for (len, filters) in [(9, vec![2]), (51, vec![4, 3]), (10, vec![3, 2, 2])] {
        let cfg = CnnConfig {
            input_length: len,
            conv_filters: filters,
            dense_widths: vec![4],
            ..CnnConfig::default()
        };
        let mut model: CnnModel<f64> = build_cnn(&cfg, 11).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for p in model.params_mut() {
            p.iter_mut().for_each(|v| *v = r.random_range(-0.7..0.7));
        }
        let (x, _) = random_batch(5, len, 9);
        let f = model.forward(&x, 5).unwrap();
        for row in 0..5 {
            let oracle = naive_logits(&model, &x[row * len..(row + 1) * len]);
            for c in 0..3 {
                assert!(
                    (f.logits[row * 3 + c] - oracle[c]).abs() < 1e-10,
                    "len {len} row {row}"
                );
            }
        }
    }
}

#[test]
fn same_seed_same_parameters() {
    let a: CnnModel<f32> = build_cnn(&CnnConfig::default(), 5).unwrap();
    let b: CnnModel<f32> = build_cnn(&CnnConfig::default(), 5).unwrap();
    let c: CnnModel<f32> = build_cnn(&CnnConfig::default(), 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn he_uniform_bounds() {
    let m: CnnModel<f64> = build_cnn(&CnnConfig::default(), 1).unwrap();
    for layer in &m.layers {
        let (w, b, fan_in) = match layer {
            Layer::Conv(c) => (&c.weight, &c.bias, c.kernel * c.in_ch),
            Layer::Dense(d) => (&d.weight, &d.bias, d.n_in),
        };
        let limit = (6.0 / fan_in as f64).sqrt();
        assert!(w.iter().all(|v| v.abs() < limit));
        assert!(b.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn sgd_scalar_step() {
    let mut s = OptimizerState::<f64>::new(OptimizerKind::Sgd, &[1]);
    let mut p = vec![1.0];
    optimizer_step(&mut s, &mut [p.as_mut_slice()], &[vec![2.0]], 0.1).unwrap();
    assert!((p[0] - 0.8).abs() < 1e-15);
}

#[test]
fn zero_gradient_is_a_fixed_point() {
    for kind in [
        OptimizerKind::Sgd,
        OptimizerKind::Adagrad,
        OptimizerKind::Adam,
    ] {
        let mut s = OptimizerState::<f64>::new(kind, &[3]);
        let mut p = vec![0.5, -1.5, 2.0];
        for _ in 0..3 {
            optimizer_step(&mut s, &mut [p.as_mut_slice()], &[vec![0.0; 3]], 0.1).unwrap();
        }
        assert_eq!(p, vec![0.5, -1.5, 2.0], "{kind:?}");
    }
}

#[test]
fn every_optimizer_descends_a_quadratic() {
    for kind in OptimizerKind::ALL {
        let lr = if kind == OptimizerKind::Adadelta {
            1.0
        } else {
            0.05
        };
        let mut s = OptimizerState::<f64>::new(kind, &[2]);
        let mut p = vec![3.0, -2.0];
        let f = |p: &[f64]| p[0] * p[0] + 4.0 * p[1] * p[1];
        let start = f(&p);
        for _ in 0..50 {
            let g = vec![2.0 * p[0], 8.0 * p[1]];
            optimizer_step(&mut s, &mut [p.as_mut_slice()], &[g], lr).unwrap();
        }
        assert!(f(&p) < start, "{kind:?}: {} !< {start}", f(&p));
        assert_eq!(s.step, 50);
    }
}

#[test]
fn non_finite_gradient_is_rejected() {
    for bad in [f32::NAN, f32::INFINITY, f32::NEG_INFINITY] {
        let mut s = OptimizerState::<f32>::new(OptimizerKind::Adam, &[2]);
        let mut p = vec![1.0f32, 1.0];
        let err =
            optimizer_step(&mut s, &mut [p.as_mut_slice()], &[vec![0.0, bad]], 0.1).unwrap_err();
        assert!(err.to_string().contains("param[0]"), "{err}");
        assert_eq!(p, vec![1.0, 1.0]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adam_first_step_is_lr_times_sign(g in prop_oneof![-1e3f64..-1e-3, 1e-3f64..1e3]) {
        let mut s = OptimizerState::<f64>::new(OptimizerKind::Adam, &[1]);
        let mut p = vec![0.0];
        optimizer_step(&mut s, &mut [p.as_mut_slice()], &[vec![g]], 0.001).unwrap();
        prop_assert!((p[0] + 0.001 * g.signum()).abs() < 1e-6);
    }

    #[test]
    fn softmax_rows_on_simplex(scale in 0.1f64..1e3, seed in any::<u64>()) {
        let model: CnnModel<f32> = build_cnn(&CnnConfig::default(), 2).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f32> = (0..4 * 51).map(|_| (r.random_range(-1.0..1.0) * scale) as f32).collect();
        let f = model.forward(&x, 4).unwrap();
        for row in f.probs.chunks(3) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}

#[test]
fn gradient_check_relu_network() {
    let cfg = small_config(9);
    let model: CnnModel<f64> = build_cnn(&cfg, 21).unwrap();
    assert!(model.n_params() <= 10_000);
    let (x, y) = random_batch(8, 9, 4);
    let report = gradient_check(&model, &x, &y, 1e-5).unwrap();
    for (name, err) in &report.per_tensor {
        assert!(*err < 1e-4, "{name}: {err}");
    }
    assert!(report.per_tensor.iter().any(|(n, _)| n.contains("conv")));
    assert!(report.per_tensor.iter().any(|(n, _)| n.contains("dense")));
}

#[test]
fn gradient_check_linear_network() {
    let cfg = CnnConfig {
        activation: Activation::Identity,
        ..small_config(9)
    };
    let model: CnnModel<f64> = build_cnn(&cfg, 22).unwrap();
    let (x, y) = random_batch(8, 9, 5);
    let report = gradient_check(&model, &x, &y, 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn near_zero_loss_has_near_zero_gradient() {
    let cfg = small_config(9);
    let mut model: CnnModel<f64> = build_cnn(&cfg, 3).unwrap();
    let last = model.layers.len() - 1;
    if let Layer::Dense(d) = &mut model.layers[last] {
        d.weight.iter_mut().for_each(|w| *w = 0.0);
        d.bias = vec![60.0, 0.0, 0.0];
    }
    let (x, _) = random_batch(8, 9, 6);
    let y = vec![0; 8];
    let rows: Vec<usize> = (0..8).collect();
    let g = model.batch_gradient(&x, &y, &rows).unwrap();
    assert!(g.loss < 1e-20);
    assert!(g.grads.iter().flatten().all(|v| v.abs() < 1e-20));
}

#[test]
fn batch_gradient_is_permutation_invariant() {
    let cfg = small_config(13);
    let model: CnnModel<f64> = build_cnn(&cfg, 8).unwrap();
    let (x, y) = random_batch(600, 13, 7);
    let rows: Vec<usize> = (0..600).collect();
    let base = model.batch_gradient(&x, &y, &rows).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..3 {
        let mut perm = rows.clone();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        let g = model.batch_gradient(&x, &y, &perm).unwrap();
        for (a, b) in base.grads.iter().flatten().zip(g.grads.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((base.loss - g.loss).abs() < 1e-12);
    }
}

fn separable_toy(rows: usize, width: usize) -> FeatureTable {
    let mut r = ChaCha8Rng::seed_from_u64(17);
    let y: Vec<usize> = (0..rows).map(|i| i % 3).collect();
    let mut x = Vec::with_capacity(rows * width);
    for &c in &y {
        for j in 0..width {
            let centre = if j % 3 == c { 2.0 } else { 0.0 };
            x.push(centre + r.random_range(-0.3..0.3));
        }
    }
    table(width, x, &y)
}

#[test]
fn small_net_overfits_separable_toy() {
    let data = separable_toy(64, 12);
    let cfg = CnnConfig {
        epochs: 200,
        batch_size: 16,
        ..small_config(12)
    };
    let mut model: CnnModel<f64> = build_cnn(&cfg, 4).unwrap();
    let h = train_cnn(&mut model, &data, None, 4).unwrap();
    assert_eq!(h.epochs.len(), 200);
    assert_eq!(h.epochs.last().unwrap().train_acc, 1.0);
    assert_eq!(meaflow::nn::evaluate(&model, &data).unwrap().1, 1.0);
}

#[test]
fn one_epoch_reduces_loss() {
    let data = separable_toy(256, 12);
    let cfg = CnnConfig {
        epochs: 1,
        batch_size: 32,
        ..small_config(12)
    };
    let mut model: CnnModel<f64> = build_cnn(&cfg, 9).unwrap();
    let before = meaflow::nn::evaluate(&model, &data).unwrap().0;
    train_cnn(&mut model, &data, Some(&data), 9).unwrap();
    let after = meaflow::nn::evaluate(&model, &data).unwrap().0;
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn zero_epochs_leaves_model_unchanged() {
    let data = separable_toy(30, 12);
    let cfg = CnnConfig {
        epochs: 0,
        ..small_config(12)
    };
    let mut model: CnnModel<f32> = build_cnn(&cfg, 1).unwrap();
    let before = model.clone();
    let h = train_cnn(&mut model, &data, None, 1).unwrap();
    assert!(h.epochs.is_empty());
    assert_eq!(model, before);
}

#[test]
fn training_errors() {
    let cfg = small_config(12);
    let mut model: CnnModel<f32> = build_cnn(&cfg, 1).unwrap();
    let empty = separable_toy(3, 12).select(&[]);
    assert!(train_cnn(&mut model, &empty, None, 0).is_err());
    let two_class = CnnConfig {
        n_classes: 2,
        ..cfg.clone()
    };
    let mut model: CnnModel<f32> = build_cnn(&two_class, 1).unwrap();
    assert!(train_cnn(&mut model, &separable_toy(9, 12), None, 0).is_err());
    let mut model: CnnModel<f32> = build_cnn(&cfg, 1).unwrap();
    assert!(train_cnn(&mut model, &separable_toy(9, 11), None, 0).is_err());
}

#[test]
fn training_is_bit_identical_across_modes() {
    let data = separable_toy(700, 12);
    let cfg = CnnConfig {
        epochs: 2,
        batch_size: 600,
        ..small_config(12)
    };
    let run = |mode| {
        par::set_mode(mode);
        let mut m: CnnModel<f32> = build_cnn(&cfg, 2).unwrap();
        let h = train_cnn(&mut m, &data, None, 2).unwrap();
        par::set_mode(Exec::Parallel);
        (
            m,
            h.epochs
                .iter()
                .map(|e| e.train_loss.to_bits())
                .collect::<Vec<_>>(),
        )
    };
    let (a, la) = run(Exec::Serial);
    let (b, lb) = run(Exec::Parallel);
    let (c, lc) = run(Exec::Parallel);
    assert_eq!(la, lb);
    assert_eq!(lb, lc);
    let bits = |m: &CnnModel<f32>| {
        m.params()
            .iter()
            .flat_map(|p| p.iter().map(|v| v.to_bits()))
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(bits(&b), bits(&c));
}

#[test]
fn embeddings_output_and_penultimate() {
    let data = separable_toy(40, 51);
    let model: CnnModel<f32> = build_cnn(&CnnConfig::default(), 3).unwrap();
    let out = extract_embeddings(&model, &data, Tap::Output).unwrap();
    assert_eq!(out.n_features(), 3);
    assert_eq!(out.labels(), data.labels());
    for row in out.rows() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let pen = extract_embeddings(&model, &data, Tap::Penultimate).unwrap();
    assert_eq!(pen.n_features(), 64);
    assert!(pen.features().iter().all(|&v| v >= 0.0));
    assert_eq!(pen.labels(), data.labels());
    assert!("hidden".parse::<Tap>().is_err());
}

#[test]
fn model_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let model: CnnModel<f32> = build_cnn(&small_config(12), 7).unwrap();
    model.save(&path).unwrap();
    assert_eq!(CnnModel::<f32>::load(&path).unwrap(), model);
    assert!(CnnModel::<f64>::load(&path).is_err());
}
