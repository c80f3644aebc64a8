use super::*;
use crate::data::Dataset;

fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn tiny_net(seed: u64) -> Network {
    NetworkBuilder::new(
        Shape::Maps {
            maps: 2,
            width: 6,
            height: 6,
        },
        seed,
    )
    .conv(3, 3, 1, 1)
    .and_then(|b| b.relu())
    .and_then(|b| b.maxpool(2, 2))
    .and_then(|b| b.conv(2, 3, 0, 1))
    .and_then(|b| b.fc(5))
    .and_then(|b| b.relu())
    .and_then(|b| b.fc(3))
    .and_then(|b| b.softmax_xent())
    .and_then(|b| b.build())
    .unwrap()
}

fn perturbed(net: &Network, layer: usize, weight: bool, k: usize, delta: f32) -> Network {
    let mut n = net.clone();
    let (w, b) = n.params_mut(layer).unwrap();
    if weight {
        w[k] += delta;
    } else {
        b[k] += delta;
    }
    n
}

#[test]
fn every_layer_matches_finite_differences() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
        let mut net = tiny_net(seed);
        // biases away from zero so ReLU kinks are unlikely at the probe points
        for idx in 0..net.layers().len() {
            if let Some((_, b)) = net.params_mut(idx) {
                b.iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
            }
        }
        let mut q = SparsityPatternSet::full(3, 2);
        q.set(0, 0, 1, false);
        q.set(1, 2, 2, false);
        net.set_pattern(0, q).unwrap();

        let batch = MapBatch::from_vec(2, 3, 6, 6, rand_vec(2 * 3 * 36, &mut rng)).unwrap();
        let labels = [0u8, 2, 1];
        let (_, cache) = net.forward(&batch).unwrap();
        let grads = net.backward(&cache, &labels).unwrap();
        let h = 1e-3f32;
        for idx in 0..net.layers().len() {
            let Some(g) = &grads.layers[idx] else { continue };
            for (weight, values) in [(true, &g.weight), (false, &g.bias)] {
                for (k, &an) in values.iter().enumerate() {
                    let lp = perturbed(&net, idx, weight, k, h).loss(&batch, &labels).unwrap();
                    let lm = perturbed(&net, idx, weight, k, -h).loss(&batch, &labels).unwrap();
                    let fd = (lp - lm) / (2.0 * h as f64);
                    let err = (fd - an as f64).abs();
                    assert!(
                        err <= 1e-2 * fd.abs().max(an.abs() as f64) || err <= 1e-4,
                        "layer {idx} {} {k}: fd {fd} analytic {an}",
                        if weight { "weight" } else { "bias" }
                    );
                }
            }
        }
    }
}

#[test]
fn masked_groups_get_zero_gradient() {
    let mut net = tiny_net(7);
    let mut q = SparsityPatternSet::full(3, 2);
    q.set(1, 1, 1, false);
    net.set_pattern(0, q).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = MapBatch::from_vec(2, 2, 6, 6, rand_vec(144, &mut rng)).unwrap();
    let (_, cache) = net.forward(&batch).unwrap();
    let g = net.backward(&cache, &[1, 0]).unwrap();
    let k = &net.conv(0).unwrap().kernel;
    for t in 0..3 {
        assert_eq!(g.layers[0].as_ref().unwrap().weight[k.index(1, 1, 1, t)], 0.0);
    }
}

#[test]
fn softmax_gradient_closed_form() {
    let probs = softmax(&Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap());
    let (loss, g) = softmax_xent_backward(&probs, &[0]).unwrap();
    assert_eq!(g.data(), &[-0.5, 0.5]);
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-7);
}

#[test]
fn identity_conv_passes_input_through() {
    let mut net = NetworkBuilder::new(
        Shape::Maps {
            maps: 1,
            width: 3,
            height: 4,
        },
        0,
    )
    .conv(1, 1, 0, 1)
    .unwrap()
    .build()
    .unwrap();
    net.conv_mut(0).unwrap().kernel.data_mut()[0] = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_vec(24, &mut rng);
    let batch = MapBatch::from_vec(1, 2, 3, 4, x.clone()).unwrap();
    let (logits, _) = net.forward(&batch).unwrap();
    assert_eq!(logits.shape(), (2, 12));
    assert_eq!(logits.data(), x.as_slice());
}

#[test]
fn relu_definition() {
    let net = Network::new(Shape::Flat(2), vec![Layer::Relu], 0).unwrap();
    let batch = MapBatch::from_vec(1, 1, 1, 2, vec![-1.0, 2.0]).unwrap();
    assert_eq!(net.predict(&batch).unwrap().data(), &[0.0, 2.0]);
}

#[test]
fn zero_lenet_outputs_final_bias() {
    let mut net = build_lenet(3);
    let last = net.layers().len() - 2;
    for idx in 0..net.layers().len() {
        if let Some((w, b)) = net.params_mut(idx) {
            w.fill(0.0);
            b.fill(0.0);
        }
    }
    let bias: Vec<f32> = (0..10).map(|v| v as f32 * 0.1 - 0.3).collect();
    net.params_mut(last).unwrap().1.copy_from_slice(&bias);
    let batch = MapBatch::from_vec(1, 2, 28, 28, vec![0.0; 2 * 784]).unwrap();
    let logits = net.predict(&batch).unwrap();
    assert_eq!(logits.row(0), bias.as_slice());
    assert_eq!(logits.row(1), bias.as_slice());
}

#[test]
fn lenet_shape_facts() {
    let a = build_lenet(17);
    assert_eq!(a, build_lenet(17));
    assert_ne!(a, build_lenet(18));
    let convs = a.conv_indices();
    assert_eq!(convs, vec![0, 2]);
    for &c in &convs {
        let c = a.conv(c).unwrap();
        assert_eq!(c.geometry.d, 5);
        assert_eq!(c.pattern.density(), 1.0);
    }
    let conv2 = a.conv(2).unwrap();
    assert_eq!(conv2.kernel.data().len(), 25_000);
    assert_eq!(conv2.bias.len(), 50);
    assert_eq!((conv2.geometry.in_w, conv2.geometry.out_w()), (12, 8));
    assert_eq!(a.parameter_count(), 520 + 25_050 + 400_500 + 5_010);
}

#[test]
fn xavier_bounds() {
    let net = build_lenet(5);
    let c1 = net.conv(0).unwrap();
    let bound = (6.0f32 / (25.0 + 500.0)).sqrt();
    assert!(c1.kernel.data().iter().all(|v| v.abs() <= bound));
    assert!(c1.kernel.data().iter().any(|v| v.abs() > 0.9 * bound));
}

#[test]
fn backward_rejects_foreign_or_inference_cache() {
    let net = tiny_net(1);
    let other = build_lenet(1);
    let batch = MapBatch::from_vec(1, 1, 28, 28, vec![0.0; 784]).unwrap();
    let (_, cache) = other.forward(&batch).unwrap();
    assert!(matches!(net.backward(&cache, &[0]), Err(Error::State(_))));
    let (_, cache) = other.run(&batch, false).unwrap();
    assert!(matches!(other.backward(&cache, &[0]), Err(Error::State(_))));
}

#[test]
fn shape_validation() {
    let bad = NetworkBuilder::new(Shape::Flat(4), 0).conv(2, 3, 0, 1);
    assert!(bad.is_err());
    let net = tiny_net(0);
    let wrong = MapBatch::from_vec(1, 1, 6, 6, vec![0.0; 36]).unwrap();
    assert!(matches!(net.forward(&wrong), Err(Error::Dimension(_))));
    let layers = vec![Layer::SoftmaxXent, Layer::Relu];
    assert!(Network::new(Shape::Flat(3), layers, 0).is_err());
}

#[test]
fn forward_is_batch_order_invariant() {
    let net = build_lenet(9);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let imgs: Vec<Vec<f32>> = (0..3).map(|_| rand_vec(784, &mut rng)).collect();
    let fwd = imgs.concat();
    let rev: Vec<f32> = imgs.iter().rev().flatten().copied().collect();
    let a = net.predict(&MapBatch::from_vec(1, 3, 28, 28, fwd).unwrap()).unwrap();
    let b = net.predict(&MapBatch::from_vec(1, 3, 28, 28, rev).unwrap()).unwrap();
    for r in 0..3 {
        for (x, y) in a.row(r).iter().zip(b.row(2 - r)) {
            assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0));
        }
    }
}

fn grads_like(net: &Network, value: f32) -> Gradients {
    Gradients {
        layers: (0..net.layers().len())
            .map(|i| {
                net.param_sizes(i).map(|(w, b)| ParamGrad {
                    weight: vec![value; w],
                    bias: vec![value; b],
                })
            })
            .collect(),
        loss: 0.0,
    }
}

#[test]
fn sgd_zero_gradient_keeps_parameters() {
    let mut net = tiny_net(2);
    let before = net.clone();
    let mut state = SgdState::new(&net, SgdConfig { weight_decay: 0.0, ..SgdConfig::default() });
    let g = grads_like(&net, 0.0);
    sgd_step(&mut net, &g, &mut state, None).unwrap();
    assert_eq!(net, before);
}

#[test]
fn sgd_plain_step() {
    let mut net = tiny_net(2);
    let before = net.clone();
    let cfg = SgdConfig {
        lr: LrSchedule::fixed(1.0),
        momentum: 0.0,
        weight_decay: 0.0,
    };
    let mut state = SgdState::new(&net, cfg);
    let g = grads_like(&net, 1.0);
    sgd_step(&mut net, &g, &mut state, None).unwrap();
    for idx in [0, 3, 4, 6] {
        let (wa, ba) = before.clone().params_mut(idx).map(|(w, b)| (w.to_vec(), b.to_vec())).unwrap();
        let (wb, bb) = net.params_mut(idx).map(|(w, b)| (w.to_vec(), b.to_vec())).unwrap();
        for (x, y) in wa.iter().zip(&wb).chain(ba.iter().zip(&bb)) {
            assert!((x - 1.0 - y).abs() < 1e-6);
        }
    }
}

#[test]
fn extra_gradient_equals_folding() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let base = tiny_net(4);
    let mut g = grads_like(&base, 0.0);
    for l in g.layers.iter_mut().flatten() {
        l.weight = rand_vec(l.weight.len(), &mut rng);
    }
    let mut extra = ExtraGrad::for_network(&base);
    let c = base.conv(0).unwrap();
    let e = Tensor4::from_vec(3, 2, 3, rand_vec(c.kernel.data().len(), &mut rng)).unwrap();
    extra.layers[0] = Some(e.clone());
    let mut folded = g.clone();
    for (a, b) in folded.layers[0].as_mut().unwrap().weight.iter_mut().zip(e.data()) {
        *a += b;
    }
    let cfg = SgdConfig::default();
    let (mut n1, mut n2) = (base.clone(), base.clone());
    let (mut s1, mut s2) = (SgdState::new(&base, cfg), SgdState::new(&base, cfg));
    for _ in 0..3 {
        sgd_step(&mut n1, &g, &mut s1, Some(&extra)).unwrap();
        sgd_step(&mut n2, &folded, &mut s2, None).unwrap();
    }
    assert_eq!(n1, n2);
}

#[test]
fn masked_coordinates_survive_steps() {
    let mut net = tiny_net(5);
    let mut q = SparsityPatternSet::full(3, 3);
    q.set(2, 0, 0, false);
    q.set(0, 1, 2, false);
    net.set_pattern(3, q.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = grads_like(&net, 0.0);
    let mut state = SgdState::new(&net, SgdConfig::default());
    for _ in 0..20 {
        for l in g.layers.iter_mut().flatten() {
            l.weight = rand_vec(l.weight.len(), &mut rng);
        }
        sgd_step(&mut net, &g, &mut state, None).unwrap();
        let k = &net.conv(3).unwrap().kernel;
        for t in 0..2 {
            assert_eq!(k.get(0, 0, 2, t).unwrap(), 0.0);
            assert_eq!(k.get(1, 2, 0, t).unwrap(), 0.0);
        }
    }
}

#[test]
fn lr_schedule_inverse_decay() {
    let s = SgdConfig::default().lr;
    assert_eq!(s.at(0), 0.01);
    let expect = 0.01 * (1.0f64 + 1e-4 * 10_000.0).powf(-0.75);
    assert!((s.at(10_000) as f64 - expect).abs() < 1e-9);
    assert_eq!(LrSchedule::fixed(0.3).at(1_000_000), 0.3);
}

fn identity_classifier(k: usize) -> Network {
    let mut w = Matrix::zeros(k, k);
    for i in 0..k {
        w.set(i, i, 1.0).unwrap();
    }
    let fc = Layer::FullyConnected(FcLayer {
        weights: w,
        bias: vec![0.0; k],
    });
    Network::new(Shape::Flat(k), vec![fc, Layer::SoftmaxXent], 0).unwrap()
}

fn one_hot_set(labels: &[u8], shown: &[u8], k: usize) -> Dataset {
    let mut images = vec![0.0; labels.len() * k];
    for (n, &c) in shown.iter().enumerate() {
        images[n * k + c as usize] = 1.0;
    }
    Dataset::new(1, k, images, labels.to_vec()).unwrap()
}

#[test]
fn evaluate_counts() {
    let net = identity_classifier(4);
    let ds = one_hot_set(&[0, 1, 2, 3], &[0, 1, 2, 3], 4);
    assert_eq!(evaluate(&net, &ds).unwrap(), 1.0);
    let ds = one_hot_set(&[0, 1, 2, 3], &[0, 1, 2, 0], 4);
    assert_eq!(evaluate(&net, &ds).unwrap(), 0.75);
    let empty = Dataset::new(1, 4, vec![], vec![]).unwrap();
    assert!(matches!(evaluate(&net, &empty), Err(Error::Input(_))));
}

#[test]
fn constant_logits_score_chance() {
    let mut net = identity_classifier(10);
    if let Layer::FullyConnected(f) = &mut net.layers[0] {
        f.weights = Matrix::zeros(10, 10);
    }
    let labels: Vec<u8> = (0..100).map(|n| (n % 10) as u8).collect();
    let ds = one_hot_set(&labels, &labels, 10);
    assert!((evaluate(&net, &ds).unwrap() - 0.1).abs() < 1e-12);
}

#[test]
fn loss_decreases_on_separable_toy() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 32;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for k in 0..n {
        let c = (k % 2) as u8;
        for p in 0..16 {
            let bright = (p < 8) == (c == 0);
            images.push(if bright { 0.8 } else { 0.1 } + rng.gen_range(-0.05..0.05));
        }
        labels.push(c);
    }
    let ds = Dataset::new(4, 4, images, labels).unwrap();
    let mut net = NetworkBuilder::new(
        Shape::Maps {
            maps: 1,
            width: 4,
            height: 4,
        },
        1,
    )
    .conv(2, 3, 1, 1)
    .and_then(|b| b.maxpool(2, 2))
    .and_then(|b| b.fc(2))
    .and_then(|b| b.softmax_xent())
    .and_then(|b| b.build())
    .unwrap();
    let cfg = SgdConfig {
        lr: LrSchedule::fixed(0.1),
        momentum: 0.0,
        weight_decay: 0.0,
    };
    let mut state = SgdState::new(&net, cfg);
    let idx: Vec<usize> = (0..n).collect();
    let (batch, labels) = ds.batch(&idx);
    let mut last = net.loss(&batch, &labels).unwrap();
    for _ in 0..50 {
        let (_, cache) = net.forward(&batch).unwrap();
        let g = net.backward(&cache, &labels).unwrap();
        sgd_step(&mut net, &g, &mut state, None).unwrap();
        let now = net.loss(&batch, &labels).unwrap();
        assert!(now < last, "{now} >= {last}");
        last = now;
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut net = build_lenet(21);
    let mut q = SparsityPatternSet::full(5, 20);
    for k in 0..125 {
        q.set(k % 20, (k * 7) % 5, (k * 3) % 5, false);
    }
    net.set_pattern(2, q).unwrap();
    let bytes = write_checkpoint(&net);
    let back = read_checkpoint(&bytes).unwrap();
    assert_eq!(back, net);
    assert_eq!(write_checkpoint(&back), bytes);
}

#[test]
fn checkpoint_rejects_corruption() {
    let mut net = tiny_net(3);
    let mut q = SparsityPatternSet::full(3, 2);
    q.set(0, 0, 0, false);
    net.set_pattern(0, q).unwrap();
    let bytes = write_checkpoint(&net);
    assert!(matches!(read_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(read_checkpoint(&extra), Err(Error::Format { .. })));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(read_checkpoint(&magic), Err(Error::Format { offset: 0, .. })));
    // header 8+4+8 + input 13 + count 4, conv tag 1 + 7·4 dims: first kernel value
    let first_kernel = 8 + 4 + 8 + 13 + 4 + 1 + 28;
    let mut masked = bytes.clone();
    masked[first_kernel..first_kernel + 4].copy_from_slice(&1.0f32.to_le_bytes());
    assert!(matches!(read_checkpoint(&masked), Err(Error::Format { .. })));
}
