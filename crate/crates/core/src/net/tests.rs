use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::locking::{calibrate_range, CorruptionMode};

fn dense(out: usize, inp: usize, w: &[f32], b: &[f32]) -> Layer {
    Layer::dense(
        Tensor::new(vec![out, inp], w.to_vec()).unwrap(),
        Tensor::new(vec![out], b.to_vec()).unwrap(),
    )
    .unwrap()
}

fn toy_layers() -> Vec<Layer> {
    vec![
        dense(2, 2, &[1.0, 2.0, 3.0, -1.0], &[0.5, -0.5]),
        Layer::Relu,
        dense(2, 2, &[1.0, -1.0, 2.0, 0.5], &[0.0, 1.0]),
    ]
}

fn toy_scheme() -> PointLockScheme {
    PointLockScheme::new(8, 0, 0.0, 8.0).unwrap()
}

fn key(code: u32) -> KeyMode {
    KeyMode::Hard(KeyVector::new(code, 8).unwrap())
}

#[test]
fn toy_nonlinearity_lock_by_hand() {
    let model = VictimModel::new(toy_layers())
        .unwrap()
        .with_bindings(vec![LockBinding {
            layer_index: 0,
            neuron_indices: vec![0],
            placement: Placement::NonLinearity,
            scheme: toy_scheme(),
        }])
        .unwrap();
    let x = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
    // hidden = relu([3.5, 1.5]); 3.5 sits in code 112 of [0, 8).
    let plain = forward(&model, &x, &KeyMode::Unlocked).unwrap();
    assert_eq!(plain.data(), &[2.0, 8.75]);
    let locked = forward(&model, &x, &key(112)).unwrap();
    assert_eq!(locked.data(), &[6.5, 17.75]);
    let miss = forward(&model, &x, &key(113)).unwrap();
    assert_eq!(miss.data(), plain.data());
}

#[test]
fn toy_multiplier_lock_by_hand() {
    let model = VictimModel::new(toy_layers())
        .unwrap()
        .with_bindings(vec![LockBinding {
            layer_index: 0,
            neuron_indices: vec![1],
            placement: Placement::Multiplier { input_index: 0 },
            scheme: toy_scheme(),
        }])
        .unwrap();
    let x = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
    // s_10 = 3 -> code 96 -> saturated to 8, hidden_1 = 8 - 1 - 0.5.
    let locked = forward(&model, &x, &key(96)).unwrap();
    assert_eq!(locked.data(), &[-3.0, 11.25]);
}

#[test]
fn binding_validation() {
    let base = || VictimModel::new(toy_layers()).unwrap();
    let bind = |layer_index, neurons: Vec<usize>, placement| LockBinding {
        layer_index,
        neuron_indices: neurons,
        placement,
        scheme: toy_scheme(),
    };
    assert!(base().with_bindings(vec![bind(1, vec![0], Placement::NonLinearity)]).is_err());
    assert!(base().with_bindings(vec![bind(0, vec![2], Placement::NonLinearity)]).is_err());
    assert!(base().with_bindings(vec![bind(0, vec![], Placement::NonLinearity)]).is_err());
    assert!(base()
        .with_bindings(vec![bind(0, vec![0], Placement::Multiplier { input_index: 2 })])
        .is_err());
    assert!(base()
        .with_bindings(vec![
            bind(0, vec![0], Placement::NonLinearity),
            bind(0, vec![0], Placement::NonLinearity)
        ])
        .is_err());
    // One multiplier binding per input of the same neuron is allowed.
    assert!(base()
        .with_bindings(vec![
            bind(0, vec![0], Placement::Multiplier { input_index: 0 }),
            bind(0, vec![0], Placement::Multiplier { input_index: 1 }),
            bind(0, vec![0], Placement::NonLinearity),
        ])
        .is_ok());
    let mut other = bind(2, vec![0], Placement::NonLinearity);
    other.scheme.correct_key = 5;
    assert!(base()
        .with_bindings(vec![bind(0, vec![0], Placement::NonLinearity), other])
        .is_err());
}

#[test]
fn forward_rejects_bad_shapes_and_widths() {
    let model = VictimModel::new(toy_layers())
        .unwrap()
        .with_bindings(vec![LockBinding {
            layer_index: 0,
            neuron_indices: vec![0],
            placement: Placement::NonLinearity,
            scheme: toy_scheme(),
        }])
        .unwrap();
    let bad = Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap();
    assert!(matches!(forward(&model, &bad, &KeyMode::Unlocked), Err(Error::Input(_))));
    let x = Tensor::new(vec![1, 2], vec![0.0; 2]).unwrap();
    let narrow = KeyMode::Hard(KeyVector::new(1, 4).unwrap());
    assert!(matches!(forward(&model, &x, &narrow), Err(Error::Config(_))));
}

#[test]
fn unbound_model_ignores_key() {
    let model = VictimModel::new(toy_layers()).unwrap();
    let x = Tensor::new(vec![2, 2], vec![1.0, 1.0, -0.5, 2.0]).unwrap();
    let plain = forward(&model, &x, &KeyMode::Unlocked).unwrap();
    for mode in [key(7), KeyMode::Soft(SoftKey::new(3.0, 2.0))] {
        assert_eq!(forward(&model, &x, &mode).unwrap().data(), plain.data());
    }
    assert!(grad_kappa(&model, &x, &[0, 1], &SoftKey::new(1.0, 1.0)).is_err());
}

#[test]
fn loss_reference_values() {
    let uniform = Tensor::new(vec![1, 10], vec![0.3; 10]).unwrap();
    assert!((loss(&uniform, &[4]).unwrap() - 10f64.ln()).abs() < 1e-12);
    let l = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    assert!((loss(&l, &[2]).unwrap() - 0.407_605_96).abs() < 1e-8);
    let confident = Tensor::new(vec![1, 3], vec![0.0, 200.0, 0.0]).unwrap();
    assert!(loss(&confident, &[1]).unwrap() < 1e-80);
    assert!(matches!(loss(&l, &[3]), Err(Error::Input(_))));
    assert!(loss(&l, &[0, 1]).is_err());
}

#[test]
fn softmax_rows_sum_to_one_for_large_logits() {
    let t = Tensor::new(vec![2, 4], vec![1e4, -1e4, 3.0, 9999.0, -5e3, -5e3, -5e3, 0.0]).unwrap();
    for row in softmax(&t) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|p| p.is_finite()));
    }
}

#[test]
fn central_difference_exact_on_quadratic() {
    let f = |k: f64| 3.0 * k * k - 2.0 * k + 7.0;
    for h in [1e-1, 1e-2, 1e-3] {
        let d = central_difference(f, 1.5, h);
        assert!((d - 7.0).abs() < 1e-9, "h={h}: {d}");
    }
}

/// Random model with 1-2 hidden layers and one or two bindings, with the
/// scheme calibrated on the bound activations of the batch.
pub(crate) struct RandomCase {
    pub model: VictimModel,
    pub batch: Tensor,
    pub labels: Vec<usize>,
    pub soft: SoftKey,
}

fn random_dense(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> Layer {
    let scale = (2.0 / inp as f32).sqrt();
    let w: Vec<f32> = (0..out * inp).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
    let b: Vec<f32> = (0..out).map(|_| rng.random_range(-0.1..0.1)).collect();
    dense(out, inp, &w, &b)
}

pub(crate) fn random_case(seed: u64, bindings: usize) -> RandomCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = rng.random_range(3..8);
    let hidden: Vec<usize> = (0..rng.random_range(1..3)).map(|_| rng.random_range(3..7)).collect();
    let classes = rng.random_range(2..5);
    let mut layers = Vec::new();
    let mut prev = input;
    for &h in &hidden {
        layers.push(random_dense(&mut rng, h, prev));
        layers.push(Layer::Relu);
        prev = h;
    }
    layers.push(random_dense(&mut rng, classes, prev));
    let plain = VictimModel::new(layers.clone()).unwrap();

    let rows = rng.random_range(4..12);
    let data: Vec<f32> = (0..rows * input).map(|_| rng.random_range(0.0..1.0)).collect();
    let batch = Tensor::new(vec![rows, input], data).unwrap();
    let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();

    let mut specs = Vec::new();
    for _ in 0..bindings {
        let h = rng.random_range(0..hidden.len());
        let layer_index = 2 * h;
        let width = hidden[h];
        let neuron = rng.random_range(0..width);
        let placement = if rng.random_bool(0.5) {
            Placement::NonLinearity
        } else {
            let inp = if h == 0 { input } else { hidden[h - 1] };
            Placement::Multiplier {
                input_index: rng.random_range(0..inp),
            }
        };
        if specs.iter().any(|&(l, n, p)| (l, n, p) == (layer_index, neuron, placement)) {
            continue;
        }
        specs.push((layer_index, neuron, placement));
    }
    // Calibrate on the pre-lock value each site sees in the unlocked pass.
    let mut observed = Vec::new();
    for &(l, n, p) in &specs {
        let mut acts = batch.data().to_vec();
        let mut width = input;
        for layer in &plain.layers()[..l] {
            let single = VictimModel::new(vec![layer.clone()]);
            if let Ok(m) = single {
                let t = Tensor::new(vec![rows, width], acts.clone()).unwrap();
                acts = forward(&m, &t, &KeyMode::Unlocked).unwrap().into_data();
                width = m.class_count();
            } else {
                acts = acts.into_iter().map(|v| v.max(0.0)).collect();
            }
        }
        let Layer::Dense { weights, bias } = &plain.layers()[l] else { unreachable!() };
        let inp = weights.shape()[1];
        for r in 0..rows {
            let x = &acts[r * inp..(r + 1) * inp];
            let w = &weights.data()[n * inp..(n + 1) * inp];
            match p {
                Placement::NonLinearity => {
                    let pre: f32 = x.iter().zip(w).map(|(a, b)| a * b).sum::<f32>() + bias.data()[n];
                    observed.push(pre.max(0.0));
                }
                Placement::Multiplier { input_index } => observed.push(x[input_index] * w[input_index]),
            }
        }
    }
    let (lo, mut hi) = calibrate_range(&observed, 0.0, 100.0).unwrap_or((0.0, 1.0));
    if hi - lo < 1e-3 {
        hi = lo + 1.0;
    }
    let mode = match rng.random_range(0..3) {
        0 => CorruptionMode::SaturateHigh,
        1 => CorruptionMode::ForceZero,
        _ => CorruptionMode::AdditiveOffset {
            delta: rng.random_range(-1.0..1.0),
        },
    };
    let scheme = PointLockScheme::new(8, rng.random_range(0..256), lo, hi)
        .unwrap()
        .with_mode(mode)
        .unwrap();
    let bound: Vec<LockBinding> = specs
        .iter()
        .map(|&(layer_index, n, placement)| LockBinding {
            layer_index,
            neuron_indices: vec![n],
            placement,
            scheme: scheme.clone(),
        })
        .collect();
    let model = plain.with_bindings(bound).unwrap();
    // Centre the bump near an observed activation so the gradient is live.
    let pick = observed[rng.random_range(0..observed.len())];
    let sigma = rng.random_range(0.5..12.0);
    let kappa = scheme.soft_coordinate(f64::from(pick)) + rng.random_range(-1.5..1.5) * sigma;
    RandomCase {
        model,
        batch,
        labels,
        soft: SoftKey::new(kappa, sigma),
    }
}

#[test]
fn correct_key_is_bit_identical_on_random_models() {
    for seed in 0..40 {
        let case = random_case(seed, 2);
        let correct = KeyVector::correct(case.model.scheme().unwrap());
        let plain = forward(&case.model, &case.batch, &KeyMode::Unlocked).unwrap();
        let hard = forward(&case.model, &case.batch, &KeyMode::Hard(correct)).unwrap();
        let same = plain.data().iter().zip(hard.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "seed {seed}");
    }
}

#[test]
fn grad_kappa_matches_finite_differences() {
    for seed in 100..150 {
        let case = random_case(seed, 1 + (seed as usize % 2));
        let (_, g) = grad_kappa(&case.model, &case.batch, &case.labels, &case.soft).unwrap();
        let fd = finite_diff_grad(&case.model, &case.batch, &case.labels, &case.soft, 1e-3).unwrap();
        let denom = g.abs().max(fd.abs()).max(1e-10);
        assert!((g - fd).abs() / denom < 1e-3, "seed {seed}: {g} vs {fd}");
    }
}

#[test]
fn grad_kappa_flat_far_from_activations() {
    let case = random_case(7, 1);
    let far = SoftKey::new(1e6, 4.0);
    let (_, g) = grad_kappa(&case.model, &case.batch, &case.labels, &far).unwrap();
    assert!(g.abs() < 1e-12);
}

#[test]
fn grad_kappa_of_duplicated_batch_equals_single() {
    let case = random_case(11, 1);
    let one = case.batch.select_rows(&[0]);
    let many = case.batch.select_rows(&[0, 0, 0, 0]);
    let (l1, g1) = grad_kappa(&case.model, &one, &case.labels[..1], &case.soft).unwrap();
    let (l4, g4) = grad_kappa(&case.model, &many, &[case.labels[0]; 4], &case.soft).unwrap();
    assert!((l1 - l4).abs() < 1e-12 * l1.abs().max(1.0));
    assert!((g1 - g4).abs() <= 1e-12 * g1.abs().max(1e-12));
}

#[test]
fn shared_key_gradient_is_sum_of_binding_contributions() {
    // Two bindings on one hidden layer of the toy network. Perturbing one
    // binding's kappa alone equals shifting its quantization window by the
    // same number of codes, which gives an independent per-binding check.
    let scheme = PointLockScheme::new(8, 0, 0.0, 8.0)
        .unwrap()
        .with_mode(CorruptionMode::ForceZero)
        .unwrap();
    let bindings = |s0: &PointLockScheme, s1: &PointLockScheme| {
        vec![
            LockBinding {
                layer_index: 0,
                neuron_indices: vec![0],
                placement: Placement::NonLinearity,
                scheme: s0.clone(),
            },
            LockBinding {
                layer_index: 0,
                neuron_indices: vec![1],
                placement: Placement::Multiplier { input_index: 0 },
                scheme: s1.clone(),
            },
        ]
    };
    let model = VictimModel::new(toy_layers())
        .unwrap()
        .with_bindings(bindings(&scheme, &scheme))
        .unwrap();
    let x = Tensor::new(vec![3, 2], vec![1.0, 1.0, 0.9, 1.2, 1.1, 0.7]).unwrap();
    let labels = [0, 1, 0];
    let soft = SoftKey::new(130.0, 12.0);
    let parts = grad_kappa_by_binding(&model, &x, &labels, &soft).unwrap();
    let (_, total) = grad_kappa(&model, &x, &labels, &soft).unwrap();
    assert!((parts.iter().sum::<f64>() - total).abs() < 1e-12);

    let h_codes = 0.25;
    let shift = |s: &PointLockScheme, codes: f64| {
        let delta = (codes * (f64::from(s.quant_hi) - f64::from(s.quant_lo)) / 256.0) as f32;
        PointLockScheme {
            quant_lo: s.quant_lo + delta,
            quant_hi: s.quant_hi + delta,
            ..s.clone()
        }
    };
    for b in 0..2 {
        let loss_with = |codes: f64| {
            let shifted = shift(&scheme, codes);
            let (s0, s1) = if b == 0 { (&shifted, &scheme) } else { (&scheme, &shifted) };
            let m = VictimModel::new(toy_layers()).unwrap().with_bindings(bindings(s0, s1)).unwrap();
            soft_loss(&m, &x, &labels, &soft).unwrap()
        };
        // Moving the window up by h codes is moving this binding's kappa up by h.
        let fd = (loss_with(h_codes) - loss_with(-h_codes)) / (2.0 * h_codes);
        assert!(
            (parts[b] - fd).abs() / parts[b].abs().max(1e-9) < 1e-3,
            "binding {b}: {} vs {fd}",
            parts[b]
        );
    }
    assert!(parts.iter().all(|p| p.abs() > 1e-6), "{parts:?}");
}

#[test]
fn finite_difference_error_is_v_shaped() {
    // First seed whose gradient is clearly alive.
    let (case, exact) = (0..)
        .map(|seed| {
            let case = random_case(seed, 1);
            let (_, g) = grad_kappa(&case.model, &case.batch, &case.labels, &case.soft).unwrap();
            (case, g)
        })
        .find(|(_, g)| g.abs() > 1e-2)
        .unwrap();
    let steps: Vec<f64> = (1..=11).map(|e| 10f64.powi(-e)).collect();
    let errors: Vec<f64> = steps
        .iter()
        .map(|&h| (finite_diff_grad(&case.model, &case.batch, &case.labels, &case.soft, h).unwrap() - exact).abs())
        .collect();
    let best = (0..errors.len()).min_by(|&a, &b| errors[a].total_cmp(&errors[b])).unwrap();
    assert!(best > 0 && best < errors.len() - 1, "errors {errors:?}");
    assert!(errors[0] > errors[best] * 10.0);
    assert!(errors[errors.len() - 1] > errors[best] * 10.0);
    assert!(finite_diff_grad(&case.model, &case.batch, &case.labels, &case.soft, 0.0).is_err());
}

#[test]
fn model_file_round_trip_and_errors() {
    let case = random_case(5, 1);
    let bytes = encode_model(&case.model);
    assert_eq!(&bytes[..4], b"TKNN");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let back = decode_model(&bytes, "mem").unwrap();
    assert_eq!(back.layers(), case.model.layers());
    assert_eq!(encode_model(&back), bytes);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_model(&bad, "mem"), Err(Error::Parse { field: "magic", offset: 0, .. })));
    let cut = &bytes[..bytes.len() - 3];
    assert!(matches!(decode_model(cut, "mem"), Err(Error::Parse { field: "dense parameters", .. })));
    let mut tag = bytes.clone();
    tag[12] = 9;
    assert!(matches!(decode_model(&tag, "mem"), Err(Error::Parse { field: "layer tag", offset: 12, .. })));
}

#[test]
fn softmax_layer_backward() {
    // A trailing softmax layer is differentiated like any other layer.
    let mut layers = toy_layers();
    layers.push(Layer::Softmax);
    let model = VictimModel::new(layers)
        .unwrap()
        .with_bindings(vec![LockBinding {
            layer_index: 0,
            neuron_indices: vec![0],
            placement: Placement::NonLinearity,
            scheme: toy_scheme(),
        }])
        .unwrap();
    let x = Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.5, 0.8]).unwrap();
    let soft = SoftKey::new(110.0, 6.0);
    let (_, g) = grad_kappa(&model, &x, &[0, 1], &soft).unwrap();
    let fd = finite_diff_grad(&model, &x, &[0, 1], &soft, 1e-3).unwrap();
    assert!((g - fd).abs() / g.abs().max(1e-12) < 1e-4, "{g} vs {fd}");
}
