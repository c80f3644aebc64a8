use super::*;
use crate::net::{NetworkBuilder, Shape};
use rand::Rng;

/// Two classes of 8×8 images: a bright bar in the top or the bottom half.
fn bars(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * 64);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n {
        let label = (k % 2) as u8;
        let row = if label == 0 { rng.gen_range(0..4) } else { rng.gen_range(4..8) };
        for x in 0..8 {
            for _ in 0..8 {
                let noise: f32 = rng.gen_range(0.0..0.2);
                images.push(if x == row { 0.8 + noise } else { noise });
            }
        }
        labels.push(label);
    }
    Dataset::new(8, 8, images, labels).unwrap()
}

fn small_net(seed: u64) -> Network {
    NetworkBuilder::new(
        Shape::Maps {
            maps: 1,
            width: 8,
            height: 8,
        },
        seed,
    )
    .conv(4, 3, 1, 1)
    .and_then(|b| b.relu())
    .and_then(|b| b.maxpool(2, 2))
    .and_then(|b| b.conv(4, 3, 1, 1))
    .and_then(|b| b.relu())
    .and_then(|b| b.fc(2))
    .and_then(|b| b.softmax_xent())
    .and_then(|b| b.build())
    .unwrap()
}

fn settings() -> TrainSettings {
    TrainSettings {
        batch_size: 16,
        seed: 3,
        ..TrainSettings::default()
    }
}

fn masked_entries_are_zero(net: &Network) -> bool {
    net.conv_indices().into_iter().all(|idx| {
        let c = net.conv(idx).unwrap();
        let per_t = c.kernel.group_stride();
        c.kernel
            .data()
            .chunks(per_t)
            .all(|row| row.iter().zip(c.pattern.masks()).all(|(&v, &live)| live || v == 0.0))
    })
}

#[test]
fn theta_moves_one_quantile_step() {
    let norms: Vec<f32> = (1..=20).map(|k| k as f32 * 0.1).collect();
    // θ sitting between 0.2 and 0.3 leaves two of twenty groups below it
    let below = fraction_below(&norms, 0.25);
    assert_eq!(below, 0.1);
    let up = theta_for_fraction(&norms, below + 0.05).unwrap();
    assert!((up - 0.35).abs() < 1e-6, "{up}");
    assert_eq!(fraction_below(&norms, up), 0.15);
    let down = theta_for_fraction(&norms, below - 0.05).unwrap();
    assert!((down - 0.15).abs() < 1e-6, "{down}");
    assert_eq!(fraction_below(&norms, down), 0.05);
    assert_eq!(theta_for_fraction(&norms, -0.05).unwrap(), 0.0);
    let all = theta_for_fraction(&norms, 1.2).unwrap();
    assert!(all > 2.0);
    assert_eq!(fraction_below(&norms, all), 1.0);
}

#[test]
fn theta_with_ties_jumps_past_the_tied_block() {
    let norms = [0.5f32, 0.5, 0.5, 1.0];
    let t = theta_for_fraction(&norms, 0.25).unwrap();
    assert!((t - 0.75).abs() < 1e-6);
    assert!(theta_for_fraction(&[], 0.5).is_err());
}

#[test]
fn inert_controller_never_prunes() {
    let train = bars(64, 1);
    let (val, test) = split_validation(&bars(40, 2), 5).unwrap();
    let mut net = small_net(7);
    let mut schedule = DamageSchedule {
        delta: 0.0,
        epsilon: 0.0,
        theta: Some(0.0),
        stall_epochs: 3,
        ..DamageSchedule::default()
    };
    let report = gradual_sparsify(&mut net, &train, &val, &test, &mut schedule, &settings()).unwrap();
    assert_eq!(report.epochs.len(), 3);
    assert_eq!(report.stop_reason.as_deref(), Some("stall"));
    assert!(schedule.pruned_ledger.is_empty());
    assert!(report.layers.iter().all(|l| l.density == 1.0));
}

#[test]
fn gradual_damage_is_monotone_and_permanent() {
    let train = bars(96, 1);
    let (val, test) = split_validation(&bars(60, 2), 5).unwrap();
    let mut net = small_net(8);
    let mut schedule = DamageSchedule {
        delta: 0.05,
        lambda: 0.05,
        epsilon: 0.25,
        stall_epochs: 2,
        max_epochs: Some(30),
        ..DamageSchedule::default()
    };
    let report = gradual_sparsify(&mut net, &train, &val, &test, &mut schedule, &settings()).unwrap();
    assert!(!schedule.pruned_ledger.is_empty(), "large ε should remove something");
    for w in report.epochs.windows(2) {
        for (a, b) in w[0].densities.iter().zip(&w[1].densities) {
            assert!(b <= a);
        }
    }
    for g in &schedule.pruned_ledger {
        let c = net.conv(g.layer).unwrap();
        assert!(!c.pattern.is_live(g.s, g.i, g.j));
        for t in 0..c.geometry.out_maps {
            assert_eq!(c.kernel.get(g.i, g.j, g.s, t).unwrap(), 0.0);
        }
    }
    let dead: usize = report.layers.iter().map(|l| l.total_groups - l.live_groups).sum();
    assert_eq!(dead, schedule.pruned_ledger.len());
    assert!(report.controller.iter().all(|s| s.theta_after >= 0.0));
    assert_eq!(schedule.history, report.controller);
}

#[test]
fn gradual_rejects_empty_validation() {
    let train = bars(16, 1);
    let empty = train.take(0);
    let mut net = small_net(1);
    let mut schedule = DamageSchedule::default();
    let err = gradual_sparsify(&mut net, &train, &empty, &train, &mut schedule, &settings());
    assert!(matches!(err, Err(Error::Input(_))));
}

#[test]
fn finetune_prunes_to_the_requested_count() {
    let train = bars(64, 1);
    let test = bars(32, 9);
    let mut net = small_net(2);
    let plan = FinetunePlan {
        tau: 0.3,
        regularizer: Some(RegularizerConfig::l21(0.01).unwrap()),
        epochs_reg: 1,
        epochs_ft: 1,
    };
    let report = sparsify_with_finetune(&mut net, &train, &test, &plan, &settings()).unwrap();
    for l in &report.layers {
        let total = l.d * l.d * l.in_maps;
        let removed = (total as f64 * 0.7 + 1e-9).floor() as usize;
        assert_eq!(l.live_groups, total - removed);
    }
    let phases: Vec<&str> = report.phases.iter().map(|p| p.phase.as_str()).collect();
    assert_eq!(phases, ["regularized", "pruned", "finetuned"]);
    assert_eq!(report.epochs.len(), 2);
    assert!(masked_entries_are_zero(&net));
}

#[test]
fn finetune_density_bounds() {
    let train = bars(16, 1);
    let mut net = small_net(2);
    let mut plan = FinetunePlan {
        tau: 0.0,
        regularizer: None,
        epochs_reg: 0,
        epochs_ft: 0,
    };
    assert!(matches!(
        sparsify_with_finetune(&mut net, &train, &train, &plan, &settings()),
        Err(Error::Input(_))
    ));
    plan.tau = 1.0;
    let report = sparsify_with_finetune(&mut net, &train, &train, &plan, &settings()).unwrap();
    assert!(report.layers.iter().all(|l| l.density == 1.0));
}

#[test]
fn full_pattern_equals_plain_training() {
    let train = bars(48, 1);
    let test = bars(16, 4);
    let mut a = small_net(5);
    let mut b = small_net(5);
    let full = patterns_for_network(&b, PatternName::Full).unwrap();
    train_network(&mut a, &train, &test, 2, &settings(), None).unwrap();
    train_fixed_pattern(&mut b, &train, &test, &full, 2, &settings()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn fixed_pattern_stays_fixed() {
    let train = bars(48, 1);
    let test = bars(16, 4);
    let mut net = small_net(6);
    let q = patterns_for_network(&net, PatternName::Cross3x3).unwrap();
    let report = train_fixed_pattern(&mut net, &train, &test, &q, 2, &settings()).unwrap();
    for e in &report.epochs {
        assert_eq!(e.densities, vec![5.0 / 9.0, 5.0 / 9.0]);
    }
    assert!(masked_entries_are_zero(&net));
    assert!(train_fixed_pattern(&mut net, &train, &test, &q[..1], 1, &settings()).is_err());
}

#[test]
fn split_is_a_deterministic_partition() {
    let data = bars(11, 3);
    let (a, b) = split_validation(&data, 42).unwrap();
    assert_eq!(a.len() + b.len(), 11);
    assert!(a.len().abs_diff(b.len()) <= 1);
    let (a2, b2) = split_validation(&data, 42).unwrap();
    assert_eq!((a.clone(), b.clone()), (a2, b2));
    let mut seen: Vec<&[f32]> = (0..a.len()).map(|k| a.image(k)).collect();
    seen.extend((0..b.len()).map(|k| b.image(k)));
    let mut orig: Vec<&[f32]> = (0..data.len()).map(|k| data.image(k)).collect();
    let key = |v: &&[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    seen.sort_by_key(key);
    orig.sort_by_key(key);
    assert_eq!(seen, orig);
    assert!(split_validation(&data.take(1), 0).is_err());
}

#[test]
fn report_round_trips() {
    let train = bars(32, 1);
    let (val, test) = split_validation(&bars(20, 2), 5).unwrap();
    let mut net = small_net(3);
    let mut schedule = DamageSchedule {
        epsilon: 0.2,
        stall_epochs: 1,
        max_epochs: Some(3),
        ..DamageSchedule::default()
    };
    let report = gradual_sparsify(&mut net, &train, &val, &test, &mut schedule, &settings()).unwrap();
    let back = SparsifyReport::from_json(&report.to_json().unwrap()).unwrap();
    assert_eq!(back, report);
    let (layers, rows) = parse_epoch_csv(&report.to_csv().unwrap()).unwrap();
    assert_eq!(layers, vec![0, 3]);
    assert_eq!(rows, report.epochs);
    for l in &report.layers {
        let expect = (l.live_groups > 0).then(|| l.total_groups as f64 / l.live_groups as f64);
        assert_eq!(l.speedup, expect);
    }
}

#[test]
fn malformed_epoch_log_is_rejected() {
    assert!(parse_epoch_csv("epoch,theta\n1,2\n").is_err());
    assert!(parse_epoch_csv("epoch,theta,density_x,val_accuracy,test_accuracy\n").is_err());
    assert!(parse_epoch_csv("epoch,theta,density_0,val_accuracy,test_accuracy\n1,,abc,,\n").is_err());
}
