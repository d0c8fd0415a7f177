use hybrid_ensemble::image::Image;
use hybrid_ensemble::nn::arch;
use hybrid_ensemble::nn::checkpoint;
use hybrid_ensemble::nn::{predict, to_batch, train_two_phase, LayerKind, LayerSpec, MicroNet, Phase, Tensor, TrainOptions};
use hybrid_ensemble::Label;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const SEED: u64 = 42;

/// conv(2->3, 3x3) relu pool conv(3->4, 3x3) relu | dense(16->5) relu dropout dense(5->1) sigmoid
fn toy_net(rng: &mut ChaCha8Rng) -> MicroNet<f64> {
    let specs = vec![
        LayerSpec::new(LayerKind::Conv2d { in_ch: 2, out_ch: 3, kernel: 3 }),
        LayerSpec::new(LayerKind::Relu),
        LayerSpec::new(LayerKind::MaxPool2),
        LayerSpec::new(LayerKind::Conv2d { in_ch: 3, out_ch: 4, kernel: 3 }),
        LayerSpec::new(LayerKind::Relu),
        LayerSpec::new(LayerKind::Dense { inputs: 16, units: 5 }),
        LayerSpec::new(LayerKind::Relu),
        LayerSpec::new(LayerKind::Dropout { rate: 0.3 }),
        LayerSpec::new(LayerKind::Dense { inputs: 5, units: 1 }),
        LayerSpec::new(LayerKind::SigmoidHead),
    ];
    let mut net = MicroNet::new("toy", [2, 10, 10], specs, 5, rng).unwrap();
    // nonzero biases so their gradients are exercised away from zero
    for i in 0..net.layers().len() {
        let l = &net.layers()[i];
        if l.spec.kind.has_params() {
            let w = l.weight.clone();
            let b = (0..l.bias.len()).map(|_| rng.random_range(-0.1..0.1)).collect();
            net.set_params(i, w, b).unwrap();
        }
    }
    net
}

fn random_batch(n: usize, shape: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len = n * shape.iter().product::<usize>();
    let data = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![n, shape[0], shape[1], shape[2]], data).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn loss_with_mask_seed(net: &MicroNet<f64>, x: &Tensor<f64>, labels: &[Label], mask_seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let cache = net.forward(x, true, &mut rng).unwrap();
    net.loss(&cache, labels).unwrap()
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let net = toy_net(&mut rng);
    let x = random_batch(3, [2, 10, 10], &mut rng);
    let labels = [Label::Positive, Label::Negative, Label::Positive];
    let mask_seed = 7;
    let cache = net.forward(&x, true, &mut ChaCha8Rng::seed_from_u64(mask_seed)).unwrap();
    let grads = net.backward(&cache, &labels).unwrap();

    let mut checked = std::collections::BTreeMap::new();
    for i in 0..net.layers().len() {
        let layer = &net.layers()[i];
        if !layer.spec.kind.has_params() {
            assert!(grads.params[i].is_none());
            continue;
        }
        let g = grads.params[i].as_ref().expect("trainable layer has gradients");
        let (wl, bl) = (layer.weight.len(), layer.bias.len());
        let picks: Vec<usize> = if wl + bl <= 24 {
            (0..wl + bl).collect()
        } else {
            (0..24).map(|_| rng.random_range(0..wl + bl)).collect()
        };
        for j in picks {
            let (analytic, theta) = if j < wl {
                (g.weight[j], layer.weight[j])
            } else {
                (g.bias[j - wl], layer.bias[j - wl])
            };
            let h = 1e-5 * theta.abs().max(1.0);
            let eval = |delta: f64| {
                let mut probe = net.clone();
                let (mut w, mut b) = (layer.weight.clone(), layer.bias.clone());
                if j < wl {
                    w[j] += delta;
                } else {
                    b[j - wl] += delta;
                }
                probe.set_params(i, w, b).unwrap();
                loss_with_mask_seed(&probe, &x, &labels, mask_seed)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let e = rel_err(analytic, numeric);
            assert!(e <= 1e-4, "layer {i} param {j}: analytic {analytic} numeric {numeric} rel {e}");
            *checked.entry(layer.spec.kind.name()).or_insert(0) += 1;
        }
    }
    assert_eq!(checked.len(), 2);
    assert!(checked.values().all(|&c| c >= 20), "{checked:?}");
}

#[test]
fn input_and_activation_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 1);
    let net = toy_net(&mut rng);
    let x = random_batch(2, [2, 10, 10], &mut rng);
    let labels = [Label::Negative, Label::Positive];
    let mask_seed = 3;
    let cache = net.forward(&x, true, &mut ChaCha8Rng::seed_from_u64(mask_seed)).unwrap();
    let grads = net.backward(&cache, &labels).unwrap();
    for _ in 0..25 {
        let j = rng.random_range(0..x.len());
        let h = 1e-5 * x.data()[j].abs().max(1.0);
        let eval = |delta: f64| {
            let mut xp = x.clone();
            xp.data_mut()[j] += delta;
            loss_with_mask_seed(&net, &xp, &labels, mask_seed)
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let e = rel_err(grads.input_grad.data()[j], numeric);
        assert!(e <= 1e-4, "input {j}: rel {e}");
    }
}

#[test]
fn frozen_layers_still_pass_activation_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 2);
    let mut net = toy_net(&mut rng);
    let x = random_batch(2, [2, 10, 10], &mut rng);
    let labels = [Label::Negative, Label::Positive];
    let full = net.backward(&net.infer(&x).unwrap(), &labels).unwrap();
    net.freeze_backbone();
    let frozen = net.backward(&net.infer(&x).unwrap(), &labels).unwrap();
    for i in 0..net.head_start() {
        assert!(frozen.params[i].is_none());
    }
    for i in net.head_start()..net.layers().len() {
        assert_eq!(frozen.params[i], full.params[i]);
    }
    assert_eq!(frozen.input_grad, full.input_grad);
}

/// conv 1x1 on a single pixel feeding one dense unit: the dense gradient is
/// `(p - y) * input` in closed form.
#[test]
fn dense_gradient_is_the_logistic_closed_form() {
    let specs = vec![
        LayerSpec::new(LayerKind::Conv2d { in_ch: 1, out_ch: 1, kernel: 1 }),
        LayerSpec::new(LayerKind::Dense { inputs: 1, units: 1 }),
        LayerSpec::new(LayerKind::SigmoidHead),
    ];
    let mut net: MicroNet<f64> = MicroNet::new("probe", [1, 1, 1], specs, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    net.set_params(0, vec![1.0], vec![0.0]).unwrap();
    net.set_params(1, vec![0.8], vec![-0.3]).unwrap();
    let x = Tensor::new(vec![1, 1, 1, 1], vec![1.5]).unwrap();
    let cache = net.infer(&x).unwrap();
    let p = 1.0 / (1.0 + (-(0.8 * 1.5 - 0.3f64)).exp());
    assert!((cache.probabilities()[0] - p).abs() < 1e-15);
    let g = net.backward(&cache, &[Label::Negative]).unwrap();
    let dense = g.params[1].as_ref().unwrap();
    assert!((dense.weight[0] - p * 1.5).abs() < 1e-15);
    assert!((dense.bias[0] - p).abs() < 1e-15);

    let zero = net.backward_from_logits(&cache, &[0.0]).unwrap();
    for pg in zero.params.iter().flatten() {
        assert!(pg.weight.iter().chain(&pg.bias).all(|&v| v == 0.0));
    }
}

#[test]
fn inference_ignores_the_seed_stream() {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let net = toy_net(&mut rng);
    let x = random_batch(4, [2, 10, 10], &mut rng);
    let a = net.forward(&x, false, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = net.forward(&x, false, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(a.probabilities(), b.probabilities());
    assert_eq!(a.probabilities(), net.infer(&x).unwrap().probabilities());
    assert!(a.probabilities().iter().all(|&p| p > 0.0 && p < 1.0));

    let wrong = random_batch(1, [1, 10, 10], &mut rng);
    let err = net.infer(&wrong).unwrap_err().to_string();
    assert!(err.contains("layer 0"), "{err}");
}

#[test]
fn inverted_dropout_preserves_the_expected_logit() {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 3);
    let net = toy_net(&mut rng);
    let x = random_batch(1, [2, 10, 10], &mut rng);
    let expected = net.infer(&x).unwrap().logits()[0];
    let draws = 20_000;
    let mut sum = 0.0;
    for _ in 0..draws {
        sum += net.forward(&x, true, &mut rng).unwrap().logits()[0];
    }
    let mean = sum / draws as f64;
    assert!((mean - expected).abs() <= 1e-2, "mean {mean} vs {expected}");
}

#[test]
fn adam_first_step_moves_by_the_learning_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut net = toy_net(&mut rng);
    let x = random_batch(3, [2, 10, 10], &mut rng);
    let labels = [Label::Positive, Label::Negative, Label::Positive];
    let before = net.clone();
    let grads = net.backward(&net.infer(&x).unwrap(), &labels).unwrap();
    let lr = 1e-3;
    net.adam_step(&grads, lr).unwrap();
    let mut moved = 0;
    for (i, (a, b)) in before.layers().iter().zip(net.layers()).enumerate() {
        let Some(g) = &grads.params[i] else { continue };
        let pairs = a.weight.iter().zip(&b.weight).zip(&g.weight).chain(a.bias.iter().zip(&b.bias).zip(&g.bias));
        for ((&p0, &p1), &gi) in pairs {
            if gi.abs() > 1e-4 {
                assert!((p1 - p0 + lr * gi.signum()).abs() <= lr * 1e-3, "layer {i}: {p0} -> {p1}, g {gi}");
                moved += 1;
            }
        }
        assert_eq!(b.adam.t, 1);
    }
    assert!(moved > 0);
}

#[test]
fn adam_identity_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut net = toy_net(&mut rng);
    let x = random_batch(2, [2, 10, 10], &mut rng);
    let labels = [Label::Positive, Label::Negative];

    let before = net.flat_params(0..net.layers().len());
    let grads = net.backward(&net.infer(&x).unwrap(), &labels).unwrap();
    net.adam_step(&grads, 0.0).unwrap();
    assert_eq!(before, net.flat_params(0..net.layers().len()));

    for i in 0..net.layers().len() {
        net.set_trainable(i, false);
    }
    let before = net.checksum(0..net.layers().len());
    for _ in 0..5 {
        let grads = net.backward(&net.infer(&x).unwrap(), &labels).unwrap();
        assert!(grads.params.iter().all(Option::is_none));
        net.adam_step(&grads, 0.1).unwrap();
    }
    assert_eq!(before, net.checksum(0..net.layers().len()));
}

#[test]
fn adam_rejects_non_finite_gradients_with_a_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut net = toy_net(&mut rng);
    let x = random_batch(1, [2, 10, 10], &mut rng);
    let mut grads = net.backward(&net.infer(&x).unwrap(), &[Label::Positive]).unwrap();
    grads.params[3].as_mut().unwrap().weight[5] = f64::NAN;
    let err = net.adam_step(&grads, 1e-3).unwrap_err().to_string();
    assert!(err.contains("layers[3].weight[5]"), "{err}");
}

#[test]
fn stale_caches_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut net = toy_net(&mut rng);
    let other = toy_net(&mut rng);
    let x = random_batch(1, [2, 10, 10], &mut rng);
    let cache = net.infer(&x).unwrap();
    assert!(other.backward(&cache, &[Label::Positive]).is_err());
    let grads = net.backward(&cache, &[Label::Positive]).unwrap();
    net.adam_step(&grads, 1e-3).unwrap();
    assert!(net.backward(&cache, &[Label::Positive]).is_err());
}

/// Bright centered blob for positives, dim for negatives, Gaussian noise.
fn blobs(n_per_class: usize, side: usize, rng: &mut ChaCha8Rng) -> (Vec<Image<f64>>, Vec<Label>) {
    let noise = Normal::new(0.0, 0.05).unwrap();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..2 * n_per_class {
        let label = Label::from_bool(i % 2 == 0);
        let amp = if label.is_positive() { 0.9 } else { 0.35 };
        let (cx, cy) = (rng.random_range(10.0..22.0), rng.random_range(10.0..22.0));
        let r: f64 = rng.random_range(3.0..5.0);
        let img = Image::from_fn(side, side, |x, y| {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            (amp * (-d2 / (2.0 * r * r)).exp() + noise.sample(rng)).clamp(0.0, 1.0)
        });
        images.push(img);
        labels.push(label);
    }
    (images, labels)
}

fn opts(freeze: usize, finetune: usize) -> TrainOptions<f64> {
    TrainOptions {
        freeze_epochs: freeze,
        finetune_epochs: finetune,
        head_learning_rate: 1e-3,
        finetune_learning_rate: 2e-5,
        batch_size: 24,
        unfreeze_layers: 1,
        restore_best: false,
    }
}

#[test]
fn freezing_contract_holds_across_both_phases() {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (images, labels) = blobs(16, 32, &mut rng);
    let refs: Vec<&Image<f64>> = images.iter().collect();
    let mut net: MicroNet<f64> = arch::build(0, 32, 0.5, &mut rng).unwrap();
    let hs = net.head_start();
    let n = net.layers().len();
    let init = net.clone();

    train_two_phase(&mut net, (&refs, &labels), None, &opts(3, 0), &mut rng).unwrap();
    assert_eq!(net.checksum(0..hs), init.checksum(0..hs));
    assert_ne!(net.checksum(hs..n), init.checksum(hs..n));

    let after_phase1 = net.clone();
    let history = train_two_phase(&mut net, (&refs, &labels), None, &opts(0, 2), &mut rng).unwrap();
    assert!(history.iter().all(|r| r.phase == Phase::Finetune));
    let unfrozen = (0..hs).rev().find(|&i| net.layers()[i].spec.kind.has_params()).unwrap();
    for i in 0..hs {
        let same = net.checksum(i..i + 1) == after_phase1.checksum(i..i + 1);
        if i == unfrozen {
            assert!(!same, "layer {i} should have been fine-tuned");
        } else {
            assert!(same, "layer {i} changed while frozen");
        }
    }
}

#[test]
fn zero_epochs_return_the_initial_net() {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (images, labels) = blobs(4, 32, &mut rng);
    let refs: Vec<&Image<f64>> = images.iter().collect();
    let mut net: MicroNet<f64> = arch::build(1, 32, 0.5, &mut rng).unwrap();
    let init = net.flat_params(0..net.layers().len());
    let history = train_two_phase(&mut net, (&refs, &labels), None, &opts(0, 0), &mut rng).unwrap();
    assert!(history.is_empty());
    assert_eq!(init, net.flat_params(0..net.layers().len()));
    assert!(train_two_phase(&mut net, (&[], &[]), None, &opts(1, 0), &mut rng).is_err());
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED);
        let (images, labels) = blobs(8, 32, &mut rng);
        let refs: Vec<&Image<f64>> = images.iter().collect();
        let mut net: MicroNet<f64> = arch::build(2, 32, 0.5, &mut rng).unwrap();
        train_two_phase(&mut net, (&refs, &labels), None, &opts(2, 1), &mut rng).unwrap();
        (net, images)
    };
    let (a, images) = run();
    let (b, _) = run();
    let bytes = checkpoint::encode(&a);
    assert_eq!(bytes, checkpoint::encode(&b));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    checkpoint::save(&a, &path).unwrap();
    let c: MicroNet<f64> = checkpoint::load(&path).unwrap();
    assert_eq!(checkpoint::encode(&c), bytes);
    assert_eq!(c.specs(), a.specs());
    let refs: Vec<&Image<f64>> = images.iter().collect();
    let pa = predict(&a, &refs).unwrap();
    let pc = predict(&c, &refs).unwrap();
    assert!(pa.iter().zip(&pc).all(|(x, y)| x.to_bits() == y.to_bits()));

    let mut truncated = bytes.clone();
    truncated.pop();
    assert!(checkpoint::decode::<f64>(&truncated).is_err());
}

#[test]
fn micro_net_learns_separable_blobs() {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (train_x, train_y) = blobs(40, 32, &mut rng);
    let (val_x, val_y) = blobs(20, 32, &mut rng);
    let tr: Vec<&Image<f64>> = train_x.iter().collect();
    let va: Vec<&Image<f64>> = val_x.iter().collect();
    let mut net: MicroNet<f64> = arch::build(0, 32, 0.5, &mut rng).unwrap();
    let initial = {
        let cache = net.infer(&to_batch(&tr).unwrap()).unwrap();
        net.loss(&cache, &train_y).unwrap()
    };
    let o = TrainOptions { batch_size: 8, ..opts(25, 5) };
    let history = train_two_phase(&mut net, (&tr, &train_y), Some((&va, &val_y)), &o, &mut rng).unwrap();
    assert_eq!(history.len(), 30);
    let last = history.last().unwrap();
    let acc = last.val_accuracy.unwrap();
    assert!(acc >= 0.9, "validation accuracy {acc}");
    let final_loss = {
        let cache = net.infer(&to_batch(&tr).unwrap()).unwrap();
        net.loss(&cache, &train_y).unwrap()
    };
    assert!(final_loss < initial, "{final_loss} >= {initial}");
}

#[test]
fn restore_best_keeps_the_lowest_validation_epoch() {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 1);
    let (train_x, train_y) = blobs(12, 16, &mut rng);
    let (val_x, val_y) = blobs(6, 16, &mut rng);
    let tr: Vec<&Image<f64>> = train_x.iter().collect();
    let va: Vec<&Image<f64>> = val_x.iter().collect();
    let mut net: MicroNet<f64> = arch::build(1, 16, 0.5, &mut rng).unwrap();
    let o = TrainOptions {
        batch_size: 6,
        head_learning_rate: 1e-2,
        restore_best: true,
        ..opts(4, 4)
    };
    let history = train_two_phase(&mut net, (&tr, &train_y), Some((&va, &val_y)), &o, &mut rng).unwrap();
    assert_eq!(history.len(), 8);
    let best = history.iter().filter_map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    let kept = {
        let cache = net.infer(&to_batch(&va).unwrap()).unwrap();
        net.loss(&cache, &val_y).unwrap()
    };
    assert!((kept - best).abs() <= 1e-12 * best.max(1.0), "{kept} vs {best}");

    // without validation data the flag changes nothing
    let mut a: MicroNet<f64> = arch::build(1, 16, 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut b = a.clone();
    train_two_phase(&mut a, (&tr, &train_y), None, &o, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    train_two_phase(&mut b, (&tr, &train_y), None, &TrainOptions { restore_best: false, ..o }, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(a, b);
}
