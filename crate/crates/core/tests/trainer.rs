use multiquant::data::{make_synthetic, Dataset};
use multiquant::engine::{Graph, ParamGroup, ParamStore};
use multiquant::topology::{ArchSpec, ConvSpec, Mode, Strategy};
use multiquant::trainer::{
    build_model, evaluate, loss_bundle, rounding_bias, train, train_step, Method, Optimizers, TrainConfig,
};
use multiquant::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Feature vectors as `dim` channels of a 1x1 image.
fn vector_arch(dim: usize, classes: usize) -> ArchSpec {
    ArchSpec {
        in_channels: dim,
        height: 1,
        width: 1,
        classes,
        stem: ConvSpec::new(6, 1, 0, false),
        body: vec![ConvSpec::new(6, 1, 0, false), ConvSpec::new(4, 1, 0, false)],
        bn_eps: 1e-5,
        bn_momentum: 0.1,
    }
}

fn cfg(bits: &[u8]) -> TrainConfig {
    TrainConfig {
        bits: bits.to_vec(),
        epochs: 2,
        batch_size: 16,
        ..TrainConfig::default()
    }
}

fn blobs() -> Dataset {
    make_synthetic(3, 5, 48, 4).unwrap()
}

/// One zero-rate step so activation bounds and running statistics exist.
fn warmed(c: &TrainConfig, data: &Dataset) -> multiquant::topology::MultiQuantModel {
    let mut m = build_model(&vector_arch(data.shape[0], data.classes), c).unwrap();
    let (x, y) = data.batch(&(0..16).collect::<Vec<_>>());
    let mut opt = Optimizers::new(c);
    train_step(&mut m, &mut opt, &x, &y, false, 0.0).unwrap();
    m
}

fn values(store: &ParamStore) -> Vec<Vec<f64>> {
    store.iter().map(|(_, p)| p.value.data().to_vec()).collect()
}

#[test]
fn uniform_logits_distill_to_log_two() {
    let mut g = Graph::new();
    let s = g.input(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
    let t = g.input(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
    let kd = g.soft_cross_entropy(s, t).unwrap();
    assert!((g.value(kd).item() - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn bundle_shape_and_order() {
    let data = blobs();
    let (x, y) = data.batch(&(0..8).collect::<Vec<_>>());
    let mut m = warmed(&cfg(&[2, 4, 8]), &data);
    let mut g = Graph::new();
    let b = loss_bundle(&mut m, &mut g, &x, &y, true).unwrap();
    let order: Vec<u8> = b.per_bit.iter().map(|l| l.bits).collect();
    assert_eq!(order, vec![8, 4, 2]);
    assert!(b.per_bit[0].kd.is_none());
    assert!(b.per_bit[1..].iter().all(|l| l.kd.is_some()));
    let sum: f64 = b.per_bit.iter().map(|l| l.ce + l.kd.unwrap_or(0.0)).sum();
    assert!((g.value(b.total).item() - sum).abs() < 1e-12);

    let mut single = warmed(&cfg(&[8]), &data);
    let mut g = Graph::new();
    let b = loss_bundle(&mut single, &mut g, &x, &y, true).unwrap();
    assert_eq!(b.per_bit.len(), 1);
    assert!(b.per_bit[0].kd.is_none());
}

#[test]
fn teacher_is_detached() {
    let data = blobs();
    let (x, y) = data.batch(&(0..8).collect::<Vec<_>>());
    let mut m = warmed(&cfg(&[2, 4]), &data);
    let mut g = Graph::new();
    let b = loss_bundle(&mut m, &mut g, &x, &y, true).unwrap();
    let grads = g.backward(b.total).unwrap();
    let teacher = b.teacher.unwrap();
    assert!(grads.get(teacher).is_none_or(|d| d.iter().all(|&v| v == 0.0)));

    // Only the CE path reaches the teacher's logits.
    let teacher_logits = b.per_bit[0].logits;
    let mut gc = Graph::new();
    let bc = loss_bundle(&mut m, &mut gc, &x, &y, true).unwrap();
    let gce = gc.backward(bc.per_bit[0].ce_var).unwrap();
    assert_eq!(
        grads.get(teacher_logits).unwrap(),
        gce.get(bc.per_bit[0].logits).unwrap()
    );
}

#[test]
fn summed_backward_matches_separate_passes() {
    let data = blobs();
    let (x, y) = data.batch(&(0..12).collect::<Vec<_>>());
    let mut m = warmed(&cfg(&[2, 4, 8]), &data);
    let mut g = Graph::new();
    let bundle = loss_bundle(&mut m, &mut g, &x, &y, true).unwrap();
    let grads = g.backward(bundle.total).unwrap();
    let mut joint = m.store().clone();
    joint.zero_grad();
    joint.accumulate(&g, &grads);

    let teacher = g.value(bundle.teacher.unwrap()).clone();
    let mut separate = m.store().clone();
    separate.zero_grad();
    for b in [8u8, 4, 2] {
        let mut gb = Graph::new();
        let out = m.forward_at(&mut gb, &x, b, Mode::Train).unwrap();
        let mut loss = gb.softmax_cross_entropy(out.logits, &y).unwrap();
        if b != 8 {
            let t = gb.input(teacher.clone());
            let kd = gb.soft_cross_entropy(out.logits, t).unwrap();
            loss = gb.add(loss, kd).unwrap();
        }
        let gr = gb.backward(loss).unwrap();
        separate.accumulate(&gb, &gr);
    }
    for ((_, a), (_, b)) in joint.iter().zip(separate.iter()) {
        for (p, q) in a.grad.data().iter().zip(b.grad.data()) {
            assert!((p - q).abs() <= 1e-10, "{}", a.name);
        }
    }
}

#[test]
fn optimizer_groups_partition_parameters() {
    let data = blobs();
    let m = warmed(&cfg(&[2, 4, 8]), &data);
    let store = m.store();
    let w = store.ids_in(ParamGroup::Weight);
    let q = store.ids_in(ParamGroup::Quantizer);
    assert_eq!(w.len() + q.len(), store.len());
    assert!(w.iter().all(|id| !q.contains(id)));
    for branch in m.branches() {
        for block in &branch.blocks {
            for pair in block.weight_clip.values() {
                assert!(q.contains(&pair.l) && q.contains(&pair.u));
            }
            for pair in block.act_clip.values() {
                assert!(q.contains(&pair.l) && q.contains(&pair.u));
            }
            assert!(w.contains(&block.weight));
        }
    }
}

#[test]
fn zero_rates_leave_parameters() {
    let data = blobs();
    let mut c = cfg(&[2, 4]);
    c.sgd.lr = 0.0;
    c.adam.lr = 0.0;
    let mut m = warmed(&c, &data);
    let before = values(m.store());
    let (x, y) = data.batch(&(0..16).collect::<Vec<_>>());
    let mut opt = Optimizers::new(&c);
    let metrics = train_step(&mut m, &mut opt, &x, &y, true, 1.0).unwrap();
    assert!(metrics.total.is_finite() && metrics.total > 0.0);
    assert_eq!(values(m.store()), before);
}

#[test]
fn one_step_descends() {
    let data = make_synthetic(2, 3, 2, 0).unwrap();
    let mut c = cfg(&[4, 8]);
    c.sgd.lr = 0.01;
    let mut m = build_model(&vector_arch(3, 2), &c).unwrap();
    let (x, y) = data.batch(&[0, 1]);
    let mut opt = Optimizers::new(&c);
    let first = train_step(&mut m, &mut opt, &x, &y, true, 1.0).unwrap();
    let mut g = Graph::new();
    let b = loss_bundle(&mut m, &mut g, &x, &y, true).unwrap();
    assert!(g.value(b.total).item() < first.total);
}

#[test]
fn banks_follow_the_selection() {
    let data = blobs();
    let c = cfg(&[2, 4, 8]);
    let mut m = warmed(&c, &data);
    let before = m.clone();
    let (x, y) = data.batch(&(16..32).collect::<Vec<_>>());
    let mut opt = Optimizers::new(&c);
    train_step(&mut m, &mut opt, &x, &y, true, 1.0).unwrap();
    let mut banks = 0;
    for (j, (new, old)) in m.branches().iter().zip(before.branches()).enumerate() {
        for (nb, ob) in new.blocks.iter().zip(&old.blocks) {
            let keys: Vec<u8> = nb.bn.keys().copied().collect();
            for &b in &[2u8, 4, 8] {
                assert_eq!(
                    keys.contains(&b),
                    m.selected(b).unwrap().contains(&j),
                    "branch {j} bits {b}"
                );
            }
            for (b, n) in &nb.bn {
                assert_ne!(n.running_mean, ob.bn[b].running_mean);
                banks += 1;
            }
        }
    }
    let per_block: usize = [2u8, 4, 8].iter().map(|&b| m.selected(b).unwrap().len()).sum();
    assert_eq!(banks, per_block * 2);
}

#[test]
fn nonfinite_loss_leaves_model() {
    let data = blobs();
    let c = cfg(&[2, 4]);
    let mut m = warmed(&c, &data);
    let (fw, _) = m.head();
    m.store_mut().get_mut(fw).value.data_mut()[0] = f64::NAN;
    let before = values(m.store());
    let (x, y) = data.batch(&(0..16).collect::<Vec<_>>());
    let mut opt = Optimizers::new(&c);
    let err = train_step(&mut m, &mut opt, &x, &y, true, 1.0).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }));
    let after = values(m.store());
    assert_eq!(format!("{before:?}"), format!("{after:?}"));

    let report = train(&mut m, &data, None, &c).unwrap();
    assert!(report.aborted.is_some());
    assert!(report.history.is_empty());
}

#[test]
fn training_is_deterministic_and_learns() {
    let data = blobs();
    let mut c = TrainConfig {
        epochs: 20,
        ..cfg(&[2, 4])
    };
    c.sgd.lr = 0.1;
    let arch = vector_arch(5, 3);
    let mut a = build_model(&arch, &c).unwrap();
    let mut b = build_model(&arch, &c).unwrap();
    let ra = train(&mut a, &data, Some(&data), &c).unwrap();
    let rb = train(&mut b, &data, Some(&data), &c).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(ra.history.len(), 20 * 2);
    assert_eq!(ra.steps, 20 * 3);
    let last = &ra.history[38..];
    assert!(last.iter().all(|r| r.eval_acc.unwrap() > 0.9), "{last:?}");
    assert_eq!(ra.weight_bits_seen.iter().copied().collect::<Vec<_>>(), vec![2]);

    let mut zero = c.clone();
    zero.epochs = 0;
    let mut m = build_model(&arch, &zero).unwrap();
    let before = values(m.store());
    let r = train(&mut m, &data, None, &zero).unwrap();
    assert!(r.history.is_empty());
    assert_eq!(values(m.store()), before);
}

#[test]
fn evaluate_is_pure_and_checks_width() {
    let data = make_synthetic(10, 12, 100, 2).unwrap();
    let c = cfg(&[2, 4]);
    let mut m = build_model(&vector_arch(12, 10), &c).unwrap();
    let (fw, fb) = m.head();
    let n = m.store().value(fw).numel();
    m.store_mut().get_mut(fw).value = Tensor::zeros(m.store().value(fw).shape());
    assert_eq!(n, m.store().value(fw).numel());
    let mut bias = vec![0.0; 10];
    bias[3] = 1.0;
    m.store_mut().get_mut(fb).value = Tensor::from_vec(bias);
    let a = evaluate(&m, &data, 2).unwrap();
    assert_eq!(a, 0.1);
    assert_eq!(a.to_bits(), evaluate(&m, &data, 2).unwrap().to_bits());
    assert!(matches!(evaluate(&m, &data, 8), Err(Error::NotACandidate(8))));
}

#[test]
fn baselines_switch_weight_width() {
    let data = blobs();
    for method in [Method::AnyPrecision, Method::AdaBit] {
        let c = TrainConfig {
            method,
            bits: vec![4, 8],
            epochs: 1,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let mut m = build_model(&vector_arch(5, 3), &c).unwrap();
        let r = train(&mut m, &data, Some(&data), &c).unwrap();
        assert!(r.aborted.is_none());
        assert_eq!(r.weight_bits_seen.iter().copied().collect::<Vec<_>>(), vec![4, 8]);
        assert!(r.history.iter().all(|h| h.loss_kd.is_none()));
    }
}

#[test]
fn floor_rounding_shifts_mean_down() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let half: Vec<f64> = (0..5000).map(|_| StandardNormal.sample(&mut rng)).collect();
    let sym: Vec<f64> = half.iter().copied().chain(half.iter().map(|v| -v)).collect();
    let w = Tensor::from_vec(sym);
    for bits in [2u8, 4, 8] {
        assert!(rounding_bias(&w, bits).unwrap() < 0.0, "bits={bits}");
    }
}

#[test]
fn config_problems_are_listed_together() {
    let c = TrainConfig {
        bits: vec![],
        batch_size: 0,
        strategy: Strategy::Explicit,
        ..TrainConfig::default()
    };
    let p = c.problems();
    assert!(p.len() >= 3, "{p:?}");
    let mut e = TrainConfig::default();
    e.strategy = Strategy::Explicit;
    e.explicit_map = Some("2:1;4:1,2;8:1,2,3,4".into());
    e.validate().unwrap();
    e.explicit_map = Some("2:1;4:1;8:1,2,3,4".into());
    assert!(e.validate().is_err());
}

#[test]
fn single_candidate_trains_without_distillation() {
    let data = blobs();
    for method in [Method::MultiQuant, Method::AnyPrecision, Method::AdaBit] {
        let mut c = TrainConfig {
            method,
            epochs: 15,
            ..cfg(&[8])
        };
        c.sgd.lr = 0.1;
        let mut m = build_model(&vector_arch(5, 3), &c).unwrap();
        let r = train(&mut m, &data, Some(&data), &c).unwrap();
        assert!(r.aborted.is_none(), "{method:?}");
        assert_eq!(r.history.len(), 15);
        assert!(
            r.history.iter().all(|h| h.bit == 8 && h.loss_kd.is_none()),
            "{method:?}"
        );
        assert!(
            r.history.last().unwrap().eval_acc.unwrap() > 0.9,
            "{method:?}: {:?}",
            r.history.last()
        );
    }
}
